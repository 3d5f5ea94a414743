//! A small encoder–decoder convolutional network with skip connections and
//! a mask channel injected before the final 1×1 convolution, written
//! against plain `f64` tensors with hand-derived backpropagation.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::movie_store::HEADING_CLASSES;
use crate::tensor::{Plane, Tensor3};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::grad_check;
pub use loss::OutputLoss;
pub use optim::{apply_update, OptimizerState, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// `horizon` real-valued maps.
    Regression,
    /// `5 · horizon` class logits, class-minor within each step.
    Heading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub head: HeadKind,
    pub horizon: usize,
    pub tile: (usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: crate::feature_stack::FEATURE_CHANNELS,
            base_width: 8,
            depth: 3,
            head: HeadKind::Regression,
            horizon: 3,
            tile: (crate::tiling::DEFAULT_TILE, crate::tiling::DEFAULT_TILE),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig(format!("zero-sized network config {self:?}")));
        }
        if !(1..=8).contains(&self.depth) {
            return Err(Error::InvalidConfig(format!("depth {} outside [1, 8]", self.depth)));
        }
        if self.tile.0 == 0 || self.tile.1 == 0 {
            return Err(Error::InvalidConfig("tile dims must be positive".into()));
        }
        Ok(())
    }

    pub fn out_maps(&self) -> usize {
        match self.head {
            HeadKind::Regression => self.horizon,
            HeadKind::Heading => HEADING_CLASSES * self.horizon,
        }
    }

    /// Tile dims rounded up to a multiple of `2^depth`, and the top/left
    /// offsets of the symmetric zero padding.
    pub fn padded(&self) -> (usize, usize, usize, usize) {
        let m = 1 << self.depth;
        let ph = self.tile.0.div_ceil(m) * m;
        let pw = self.tile.1.div_ceil(m) * m;
        (ph, pw, (ph - self.tile.0) / 2, (pw - self.tile.1) / 2)
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Convolution shapes `(in, out, k)` in parameter declaration order:
    /// two per encoder level, two in the bottleneck, two per decoder level
    /// (deepest first), then the 1×1 head.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut ch = self.in_channels;
        for l in 0..self.depth {
            let w = self.width_at(l);
            specs.push(ConvSpec::new(format!("enc{l}.conv1"), ch, w, 3));
            specs.push(ConvSpec::new(format!("enc{l}.conv2"), w, w, 3));
            ch = w;
        }
        let mid = self.width_at(self.depth);
        specs.push(ConvSpec::new("mid.conv1".into(), ch, mid, 3));
        specs.push(ConvSpec::new("mid.conv2".into(), mid, mid, 3));
        ch = mid;
        for l in (0..self.depth).rev() {
            let w = self.width_at(l);
            specs.push(ConvSpec::new(format!("dec{l}.conv1"), ch + w, w, 3));
            specs.push(ConvSpec::new(format!("dec{l}.conv2"), w, w, 3));
            ch = w;
        }
        specs.push(ConvSpec::new("head".into(), ch + 1, self.out_maps(), 1));
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(name: String, in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvSpec { name, in_ch, out_ch, k }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// One gradient tensor per parameter tensor, same order and sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[Param]) -> Self {
        Gradients {
            tensors: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// `self += other * scale`
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Binary plane: 1 where the mean over input channels is non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskPlane {
    pub fn ones(height: usize, width: usize) -> Self {
        MaskPlane {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn as_tensor(&self) -> Tensor3 {
        Tensor3 {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&m| f64::from(m)).collect(),
        }
    }

    pub fn as_plane(&self) -> Plane {
        self.as_tensor().plane(0)
    }
}

/// Exact-zero test on the channel mean at each pixel.
pub fn compute_mask(stack: &Tensor3) -> MaskPlane {
    let n = stack.plane_len();
    let mut sums = vec![0.0; n];
    for c in 0..stack.channels {
        for (s, v) in sums.iter_mut().zip(stack.channel(c)) {
            *s += v;
        }
    }
    let channels = stack.channels.max(1) as f64;
    MaskPlane {
        height: stack.height,
        width: stack.width,
        data: sums.into_iter().map(|s| u8::from(s / channels != 0.0)).collect(),
    }
}

/// Anything with parameters, a cached forward pass and a backward pass.
pub trait Network {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    /// Forward pass that keeps the activations needed by `backward`.
    fn forward(&mut self, input: &Tensor3, mask: &MaskPlane) -> Result<Tensor3>;
    /// Forward pass without caching.
    fn predict(&self, input: &Tensor3, mask: &MaskPlane) -> Result<Tensor3>;
    /// Gradients of `<grad_out, output>` for the last cached forward.
    fn backward(&self, grad_out: &Tensor3) -> Result<Gradients>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

fn init_params(specs: &[ConvSpec], seed: u64) -> Vec<Param> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(2 * specs.len());
    for s in specs {
        // He-uniform: variance 2 / fan_in
        let bound = (6.0 / (s.in_ch * s.k * s.k) as f64).sqrt();
        params.push(Param {
            name: format!("{}.weight", s.name),
            shape: vec![s.out_ch, s.in_ch, s.k, s.k],
            data: (0..s.weight_len()).map(|_| rng.gen_range(-bound..bound)).collect(),
        });
        params.push(Param {
            name: format!("{}.bias", s.name),
            shape: vec![s.out_ch],
            data: vec![0.0; s.out_ch],
        });
    }
    params
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: Tensor3,
    pre: Tensor3,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    convs: Vec<ConvCache>,
    skip_channels: Vec<usize>,
    pool_args: Vec<Vec<usize>>,
    pool_shapes: Vec<(usize, usize, usize)>,
}

/// The encoder–decoder network.
#[derive(Debug, Clone)]
pub struct UNetModel {
    config: NetConfig,
    seed: u64,
    specs: Vec<ConvSpec>,
    params: Vec<Param>,
    cache: Option<ForwardCache>,
}

impl PartialEq for UNetModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.seed == other.seed && self.params == other.params
    }
}

/// He-initialised model with zero biases; deterministic per seed.
pub fn init_model(config: NetConfig, seed: u64) -> Result<UNetModel> {
    UNetModel::new(config, seed)
}

impl UNetModel {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.conv_specs();
        let params = init_params(&specs, seed);
        Ok(UNetModel {
            config,
            seed,
            specs,
            params,
            cache: None,
        })
    }

    /// All parameters zero.
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        let mut m = UNetModel::new(config, 0)?;
        for p in &mut m.params {
            p.data.fill(0.0);
        }
        Ok(m)
    }

    pub(crate) fn from_parts(config: NetConfig, seed: u64, params: Vec<Param>) -> Result<Self> {
        let mut m = UNetModel::new(config, seed)?;
        if params.len() != m.params.len()
            || params.iter().zip(&m.params).any(|(a, b)| a.data.len() != b.data.len())
        {
            return Err(Error::InvalidInput("parameter shapes do not match config".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Index of the first head tensor; everything before it is the body.
    fn head_start(&self) -> usize {
        self.params.len() - 2
    }

    /// Copies every body parameter whose shape matches from `source`.
    /// Head tensors keep their own initialisation. Returns how many tensors
    /// were copied.
    pub fn transfer_body_from(&mut self, source: &UNetModel) -> usize {
        let mut copied = 0;
        let end = self.head_start();
        for p in &mut self.params[..end] {
            if let Some(src) = source.params[..source.head_start()]
                .iter()
                .find(|s| s.name == p.name && s.shape == p.shape)
            {
                p.data.clone_from(&src.data);
                copied += 1;
            }
        }
        self.cache = None;
        copied
    }

    fn check_input(&self, input: &Tensor3, mask: &MaskPlane) -> Result<()> {
        let (h, w) = self.config.tile;
        if input.channels != self.config.in_channels || input.height != h || input.width != w {
            return Err(Error::InvalidInput(format!(
                "input {:?} does not match config ({}, {h}, {w})",
                input.shape(),
                self.config.in_channels
            )));
        }
        if mask.height != h || mask.width != w {
            return Err(Error::InvalidInput(format!(
                "mask {}x{} does not match tile {h}x{w}",
                mask.height, mask.width
            )));
        }
        Ok(())
    }

    fn conv(&self, i: usize, x: &Tensor3) -> Tensor3 {
        let s = &self.specs[i];
        layers::conv2d(x, &self.params[2 * i].data, &self.params[2 * i + 1].data, s.out_ch, s.k)
    }

    fn run(&self, input: &Tensor3, mask: &MaskPlane, keep: bool) -> Result<(Tensor3, Option<ForwardCache>)> {
        self.check_input(input, mask)?;
        let (ph, pw, top, left) = self.config.padded();
        let mut cache = ForwardCache {
            convs: Vec::new(),
            skip_channels: Vec::new(),
            pool_args: Vec::new(),
            pool_shapes: Vec::new(),
        };
        let mut conv_idx = 0;
        let mut conv_relu = |x: Tensor3, cache: &mut ForwardCache| -> Tensor3 {
            let pre = self.conv(conv_idx, &x);
            conv_idx += 1;
            let out = layers::relu(&pre);
            if keep {
                cache.convs.push(ConvCache { input: x, pre });
            }
            out
        };

        let mut x = layers::pad(input, ph, pw, top, left);
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv_relu(x, &mut cache);
            x = conv_relu(x, &mut cache);
            let (pooled, arg) = layers::maxpool2(&x);
            if keep {
                cache.pool_args.push(arg);
                cache.pool_shapes.push(x.shape());
            }
            skips.push(x);
            x = pooled;
        }
        x = conv_relu(x, &mut cache);
        x = conv_relu(x, &mut cache);
        for skip in skips.into_iter().rev() {
            let up = layers::upsample2(&x);
            if keep {
                cache.skip_channels.push(up.channels);
            }
            x = conv_relu(layers::concat(&up, &skip), &mut cache);
            x = conv_relu(x, &mut cache);
        }
        let mask_t = layers::pad(&mask.as_tensor(), ph, pw, top, left);
        let features = layers::concat(&x, &mask_t);
        let head = self.specs.len() - 1;
        let out = self.conv(head, &features);
        if keep {
            cache.convs.push(ConvCache {
                input: features,
                pre: Tensor3::zeros(0, 0, 0),
            });
        }
        let (h, w) = self.config.tile;
        Ok((layers::unpad(&out, h, w, top, left), keep.then_some(cache)))
    }
}

impl Network for UNetModel {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        self.cache = None;
        &mut self.params
    }

    fn forward(&mut self, input: &Tensor3, mask: &MaskPlane) -> Result<Tensor3> {
        let (out, cache) = self.run(input, mask, true)?;
        self.cache = cache;
        Ok(out)
    }

    fn predict(&self, input: &Tensor3, mask: &MaskPlane) -> Result<Tensor3> {
        Ok(self.run(input, mask, false)?.0)
    }

    fn backward(&self, grad_out: &Tensor3) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let (h, w) = self.config.tile;
        if grad_out.shape() != (self.config.out_maps(), h, w) {
            return Err(Error::InvalidInput(format!(
                "output gradient {:?} does not match ({}, {h}, {w})",
                grad_out.shape(),
                self.config.out_maps()
            )));
        }
        let (ph, pw, top, left) = self.config.padded();
        let mut grads = Gradients::zeros_like(&self.params);
        let mut conv_idx = self.specs.len();

        // head: linear 1x1
        conv_idx -= 1;
        let g = layers::pad(grad_out, ph, pw, top, left);
        let mut g = self.conv_back(conv_idx, &cache.convs[conv_idx], g, &mut grads, true, false);
        let feat_ch = g.channels - 1;
        g = layers::split_channels(&g, feat_ch).0;

        let mut conv_relu_back = |g: Tensor3, grads: &mut Gradients, need_input: bool| -> Tensor3 {
            conv_idx -= 1;
            self.conv_back(conv_idx, &cache.convs[conv_idx], g, grads, need_input, true)
        };

        let depth = self.config.depth;
        let mut skip_grads = vec![None; depth];
        // decoder stages run deepest-first forward, so level 0 comes back first
        for level in 0..depth {
            g = conv_relu_back(g, &mut grads, true);
            g = conv_relu_back(g, &mut grads, true);
            let (g_up, g_skip) = layers::split_channels(&g, cache.skip_channels[depth - 1 - level]);
            skip_grads[level] = Some(g_skip);
            g = layers::upsample2_backward(&g_up);
        }
        g = conv_relu_back(g, &mut grads, true);
        g = conv_relu_back(g, &mut grads, true);
        for level in (0..depth).rev() {
            let mut gs = layers::maxpool2_backward(&g, &cache.pool_args[level], cache.pool_shapes[level]);
            let skip = skip_grads[level].take().expect("every level has a skip gradient");
            for (a, b) in gs.data.iter_mut().zip(&skip.data) {
                *a += b;
            }
            g = conv_relu_back(gs, &mut grads, true);
            g = conv_relu_back(g, &mut grads, level > 0);
        }
        Ok(grads)
    }
}

impl UNetModel {
    /// Backward through conv `i` (and its rectifier when `relu`), writing
    /// parameter gradients and returning the input gradient (empty when not
    /// requested).
    fn conv_back(
        &self,
        i: usize,
        cache: &ConvCache,
        mut g: Tensor3,
        grads: &mut Gradients,
        need_input: bool,
        relu: bool,
    ) -> Tensor3 {
        if relu {
            layers::relu_backward(&cache.pre, &mut g);
        }
        let s = &self.specs[i];
        let cg = layers::conv2d_backward(&cache.input, &self.params[2 * i].data, s.out_ch, s.k, &g, need_input);
        grads.tensors[2 * i] = cg.weight;
        grads.tensors[2 * i + 1] = cg.bias;
        cg.input.unwrap_or_else(|| Tensor3::zeros(0, 0, 0))
    }
}

/// A single 1×1 convolution from the input channels to the output maps:
/// the linear baseline used for exact-gradient checks.
#[derive(Debug, Clone)]
pub struct LinearModel {
    in_channels: usize,
    out_maps: usize,
    params: Vec<Param>,
    cache: Option<Tensor3>,
}

impl LinearModel {
    pub fn new(in_channels: usize, out_maps: usize, seed: u64) -> Self {
        let spec = ConvSpec::new("linear".into(), in_channels, out_maps, 1);
        LinearModel {
            in_channels,
            out_maps,
            params: init_params(&[spec], seed),
            cache: None,
        }
    }

    fn run(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.channels != self.in_channels {
            return Err(Error::InvalidInput(format!(
                "expected {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(layers::conv2d(input, &self.params[0].data, &self.params[1].data, self.out_maps, 1))
    }
}

impl Network for LinearModel {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        self.cache = None;
        &mut self.params
    }

    fn forward(&mut self, input: &Tensor3, _mask: &MaskPlane) -> Result<Tensor3> {
        let out = self.run(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn predict(&self, input: &Tensor3, _mask: &MaskPlane) -> Result<Tensor3> {
        self.run(input)
    }

    fn backward(&self, grad_out: &Tensor3) -> Result<Gradients> {
        let input = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let cg = layers::conv2d_backward(input, &self.params[0].data, self.out_maps, 1, grad_out, false);
        Ok(Gradients {
            tensors: vec![cg.weight, cg.bias],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(in_ch: usize, base: usize, depth: usize, head: HeadKind, tile: (usize, usize)) -> NetConfig {
        NetConfig {
            in_channels: in_ch,
            base_width: base,
            depth,
            head,
            horizon: 1,
            tile,
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = cfg(4, 2, 2, HeadKind::Heading, (8, 8));
        let a = init_model(c, 3).unwrap();
        let b = init_model(c, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(c, 4).unwrap());
        for p in a.params().iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.data.iter().all(|&v| v == 0.0));
        }
        assert!(init_model(cfg(4, 2, 0, HeadKind::Heading, (8, 8)), 0).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        // depth 1, width 1, one input channel, one regression map:
        // enc0: 2 × (1·1·9 + 1); mid: (2·1·9 + 2) + (2·2·9 + 2);
        // dec0: (1·3·9 + 1) + (1·1·9 + 1); head: (1·2 + 1)
        let expected = 2 * 10 + 20 + 38 + 28 + 10 + 3;
        let m = init_model(cfg(1, 1, 1, HeadKind::Regression, (4, 4)), 0).unwrap();
        assert_eq!(m.param_count(), expected);
        assert_eq!(m.params().len(), 2 * 7);
    }

    #[test]
    fn mask_examples() {
        assert!(compute_mask(&Tensor3::zeros(3, 2, 2)).data.iter().all(|&m| m == 0));
        let ones = Tensor3::from_vec(2, 2, 2, vec![1.0; 8]).unwrap();
        assert!(compute_mask(&ones).data.iter().all(|&m| m == 1));
        let mixed = Tensor3::from_vec(2, 1, 2, vec![1.0, 0.5, -1.0, 0.0]).unwrap();
        assert_eq!(compute_mask(&mixed).data, vec![0, 1]);
    }

    #[test]
    fn output_shape_and_zero_model() {
        let c = cfg(3, 2, 2, HeadKind::Heading, (16, 16));
        let m = init_model(c, 1).unwrap();
        let x = ramp(3, 16, 16);
        let out = m.predict(&x, &compute_mask(&x)).unwrap();
        assert_eq!(out.shape(), (5, 16, 16));

        let z = UNetModel::zeroed(c).unwrap();
        assert!(z.predict(&x, &compute_mask(&x)).unwrap().data.iter().all(|&v| v == 0.0));

        let bad = ramp(3, 15, 16);
        assert!(matches!(m.predict(&bad, &compute_mask(&bad)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn identity_weights_reproduce_input() {
        // Non-negative input survives every rectifier; the skip path carries
        // it through the decoder and the head reads it back.
        let c = cfg(1, 1, 1, HeadKind::Regression, (5, 7));
        let mut m = UNetModel::zeroed(c).unwrap();
        let centre = |p: &mut Param, in_ch: usize, pick: usize| {
            p.data.fill(0.0);
            p.data[pick * 9 + 4] = 1.0;
            assert_eq!(p.data.len(), in_ch * 9);
        };
        centre(m.param_mut("enc0.conv1.weight").unwrap(), 1, 0);
        centre(m.param_mut("enc0.conv2.weight").unwrap(), 1, 0);
        // decoder input is [upsampled (2 ch), skip (1 ch)]
        centre(m.param_mut("dec0.conv1.weight").unwrap(), 3, 2);
        centre(m.param_mut("dec0.conv2.weight").unwrap(), 1, 0);
        m.param_mut("head.weight").unwrap().data = vec![1.0, 0.0];
        let x = ramp(1, 5, 7);
        let out = m.predict(&x, &compute_mask(&x)).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn backward_requires_cache_and_is_linear_in_output_grad() {
        let c = cfg(2, 2, 2, HeadKind::Regression, (8, 8));
        let mut m = init_model(c, 5).unwrap();
        assert!(matches!(m.backward(&Tensor3::zeros(1, 8, 8)), Err(Error::State(_))));
        let x = ramp(2, 8, 8);
        m.forward(&x, &compute_mask(&x)).unwrap();
        let g = m.backward(&Tensor3::zeros(1, 8, 8)).unwrap();
        assert!(g.tensors.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_kernel_gradient_closed_form() {
        let mut m = LinearModel::new(3, 2, 1);
        let x = ramp(3, 4, 5);
        m.forward(&x, &MaskPlane::ones(4, 5)).unwrap();
        let go = ramp(2, 4, 5);
        let g = m.backward(&go).unwrap();
        for co in 0..2 {
            for ci in 0..3 {
                let expected: f64 = x.channel(ci).iter().zip(go.channel(co)).map(|(a, b)| a * b).sum();
                assert!((g.tensors[0][co * 3 + ci] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_pixel_changes_output() {
        let c = cfg(2, 2, 1, HeadKind::Regression, (6, 6));
        let mut m = init_model(c, 8).unwrap();
        let head = m.param_mut("head.weight").unwrap();
        let last = head.data.len() - 1;
        head.data[last] = 0.75;
        let x = ramp(2, 6, 6);
        let mask = compute_mask(&x);
        let base = m.predict(&x, &mask).unwrap();
        let mut flipped = mask.clone();
        flipped.data[14] ^= 1;
        let out = m.predict(&x, &flipped).unwrap();
        assert!((out.data[14] - base.data[14]).abs() > 0.5);
        for i in (0..36).filter(|&i| i != 14) {
            assert_eq!(out.data[i], base.data[i]);
        }
    }

    #[test]
    fn transfer_copies_body_only() {
        let reg = cfg(2, 2, 2, HeadKind::Regression, (8, 8));
        let head = NetConfig { head: HeadKind::Heading, ..reg };
        let src = init_model(head, 1).unwrap();
        let mut dst = init_model(reg, 2).unwrap();
        let before_head = dst.param("head.weight").unwrap().clone();
        assert_eq!(dst.transfer_body_from(&src), dst.params().len() - 2);
        assert_eq!(dst.param("enc0.conv1.weight"), src.param("enc0.conv1.weight"));
        assert_eq!(dst.param("head.weight").unwrap(), &before_head);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let c = cfg(3, 2, 2, HeadKind::Heading, (9, 11));
        let mut a = init_model(c, 4).unwrap();
        let mut b = init_model(c, 4).unwrap();
        let x = ramp(3, 9, 11);
        let mask = compute_mask(&x);
        assert_eq!(a.forward(&x, &mask).unwrap(), b.forward(&x, &mask).unwrap());
        let go = ramp(5, 9, 11);
        assert_eq!(a.backward(&go).unwrap(), b.backward(&go).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_dims_equal_input_dims(
            depth in 1usize..4,
            h in 1usize..20,
            w in 1usize..20,
            in_ch in 1usize..4,
            heading in any::<bool>(),
            horizon in 1usize..3,
        ) {
            let c = NetConfig {
                in_channels: in_ch,
                base_width: 2,
                depth,
                head: if heading { HeadKind::Heading } else { HeadKind::Regression },
                horizon,
                tile: (h, w),
            };
            let m = init_model(c, 0).unwrap();
            let x = ramp(in_ch, h, w);
            let out = m.predict(&x, &compute_mask(&x)).unwrap();
            prop_assert_eq!(out.shape(), (c.out_maps(), h, w));
        }

        #[test]
        fn upsample_of_pool_keeps_shape(c in 1usize..4, h in 1usize..8, w in 1usize..8) {
            let x = ramp(c, 2 * h, 2 * w);
            let (p, _) = layers::maxpool2(&x);
            prop_assert_eq!(layers::upsample2(&p).shape(), x.shape());
        }
    }
}
