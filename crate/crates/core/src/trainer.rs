//! Staged training over the per-(city, subtask, subregion) model registry:
//! a heading model trained from scratch on subregion 0 seeds every other
//! model, which are then fine-tuned and finally polished with a lower
//! learning rate, less data and flip augmentation. Also mini-batch
//! sampling, similarity-ranked online fine-tuning and city-wide prediction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_stack::{assemble, ChannelSource, FeatureConfig, FeatureRequest, FEATURE_CHANNELS, LAG_COUNT};
use crate::losses_metrics::{softmax_classes, LossWeights};
use crate::movie_store::{
    is_heading_code, real_to_byte, Frame, GridDims, MovieArchive, Subtask, FRAMES_PER_DAY, HEADING_CLASSES,
    HEADING_CODES, MOVIE_CHANNELS,
};
use crate::neuralnet::{
    apply_update, compute_mask, load_checkpoint, save_checkpoint, Gradients, HeadKind, MaskPlane, NetConfig,
    Network, OptimizerState, OutputLoss, UNetModel, UpdateRule,
};
use crate::tensor::{Plane, Tensor3};
use crate::tiling::{crop_bytes, stitch, stitch_heading, Crop, Rect, TileLayout, TILE_COUNT};

pub const MAX_CITIES: usize = 3;
pub const MAX_MODELS: usize = MAX_CITIES * 3 * TILE_COUNT;

// ---------------------------------------------------------------------------
// phases

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Scratch,
    FinetuneTask,
    FinetunePolish,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Scratch, Phase::FinetuneTask, Phase::FinetunePolish];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Scratch => "scratch",
            Phase::FinetuneTask => "finetune_task",
            Phase::FinetunePolish => "finetune_polish",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub lr: f64,
    pub epochs: usize,
    /// Share of the sample pool used, in `(0, 1]`.
    pub data_fraction: f64,
    pub augmentation: bool,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{} phase: {msg}", self.phase)));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.epochs == 0 {
            return bad("needs at least one epoch".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data fraction {} outside (0, 1]", self.data_fraction));
        }
        if self.phase == Phase::Scratch && (self.augmentation || self.data_fraction != 1.0) {
            return bad("training from scratch uses all data and no augmentation".into());
        }
        Ok(())
    }

    /// How many of `pool` samples this phase trains on (at least one).
    pub fn sample_count(&self, pool: usize) -> usize {
        ((self.data_fraction * pool as f64).ceil() as usize).clamp(1, pool.max(1))
    }
}

/// The three phases, ordered from large learning rate / all data / no
/// augmentation to small learning rate / less data / augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSchedule {
    pub scratch: PhaseConfig,
    pub task: PhaseConfig,
    pub polish: PhaseConfig,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            scratch: PhaseConfig {
                phase: Phase::Scratch,
                lr: 1e-3,
                epochs: 1,
                data_fraction: 1.0,
                augmentation: false,
            },
            task: PhaseConfig {
                phase: Phase::FinetuneTask,
                lr: 1e-3,
                epochs: 1,
                data_fraction: 1.0,
                augmentation: false,
            },
            polish: PhaseConfig {
                phase: Phase::FinetunePolish,
                lr: 1e-4,
                epochs: 1,
                data_fraction: 0.5,
                augmentation: true,
            },
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        for (cfg, phase) in [(&self.scratch, Phase::Scratch), (&self.task, Phase::FinetuneTask), (&self.polish, Phase::FinetunePolish)] {
            if cfg.phase != phase {
                return Err(Error::InvalidConfig(format!("{} config in the {phase} slot", cfg.phase)));
            }
            cfg.validate()?;
        }
        if self.polish.lr >= self.task.lr {
            return Err(Error::InvalidConfig(format!(
                "polish learning rate {} must be below the task fine-tune rate {}",
                self.polish.lr, self.task.lr
            )));
        }
        if self.polish.data_fraction > self.task.data_fraction {
            return Err(Error::InvalidConfig(format!(
                "polish data fraction {} exceeds the task fine-tune fraction {}",
                self.polish.data_fraction, self.task.data_fraction
            )));
        }
        if !self.polish.augmentation {
            return Err(Error::InvalidConfig("polish phase must use augmentation".into()));
        }
        Ok(())
    }

    pub fn get(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::Scratch => &self.scratch,
            Phase::FinetuneTask => &self.task,
            Phase::FinetunePolish => &self.polish,
        }
    }

    pub fn get_mut(&mut self, phase: Phase) -> &mut PhaseConfig {
        match phase {
            Phase::Scratch => &mut self.scratch,
            Phase::FinetuneTask => &mut self.task,
            Phase::FinetunePolish => &mut self.polish,
        }
    }
}

// ---------------------------------------------------------------------------
// training configuration

/// How heading models are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadingMode {
    /// 5-class head with cross-entropy.
    #[default]
    Classification,
    /// One regression map per step fitted with MSE on `byte / 255`, the way
    /// a leaderboard that scores headings as numbers would reward.
    LeaderboardMse,
}

impl HeadingMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadingMode::Classification => "classification",
            HeadingMode::LeaderboardMse => "leaderboard-mse",
        }
    }
}

impl FromStr for HeadingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(HeadingMode::Classification),
            "leaderboard-mse" => Ok(HeadingMode::LeaderboardMse),
            _ => Err(Error::InvalidInput(format!("unknown heading mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_width: usize,
    pub depth: usize,
    pub horizon: usize,
    pub batch_size: usize,
    /// `(day, time)` pairs drawn per city; every model of the city trains on
    /// (a prefix of) the same pool.
    pub pool_size: usize,
    pub weights: LossWeights,
    pub heading_mode: HeadingMode,
    pub features: FeatureConfig,
    pub optimizer: UpdateRule,
    pub seed: u64,
    /// Worker threads across registry keys. Results do not depend on it.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_width: 8,
            depth: 3,
            horizon: 3,
            batch_size: 4,
            pool_size: 8,
            weights: LossWeights::default(),
            heading_mode: HeadingMode::default(),
            features: FeatureConfig::default(),
            optimizer: UpdateRule::Adam,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pool_size == 0 || self.jobs == 0 {
            return Err(Error::InvalidConfig("batch size, pool size and jobs must be >= 1".into()));
        }
        if self.horizon == 0 || self.horizon > FRAMES_PER_DAY - LAG_COUNT {
            return Err(Error::InvalidConfig(format!("horizon {} out of range", self.horizon)));
        }
        self.weights.validate()?;
        self.net_config(Subtask::Volume, (1, 1)).validate()
    }

    pub fn head_for(&self, subtask: Subtask) -> HeadKind {
        match (subtask, self.heading_mode) {
            (Subtask::Heading, HeadingMode::Classification) => HeadKind::Heading,
            _ => HeadKind::Regression,
        }
    }

    pub fn net_config(&self, subtask: Subtask, tile: (usize, usize)) -> NetConfig {
        NetConfig {
            in_channels: FEATURE_CHANNELS,
            base_width: self.base_width,
            depth: self.depth,
            head: self.head_for(subtask),
            horizon: self.horizon,
            tile,
        }
    }

    /// The training objective of one model on one target.
    pub fn loss_for(&self, subtask: Subtask, target: &[u8]) -> Result<OutputLoss> {
        match (subtask, self.heading_mode) {
            (Subtask::Heading, HeadingMode::LeaderboardMse) => Ok(OutputLoss::leaderboard_mse(target)),
            _ => OutputLoss::composite_share(subtask, &self.weights, target),
        }
    }
}

/// Deterministic 64-bit seed from a base seed and a label (FNV-1a then a
/// splitmix64 finaliser).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

// ---------------------------------------------------------------------------
// registry

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegistryKey {
    pub city: String,
    pub subtask: Subtask,
    pub subregion: usize,
}

impl RegistryKey {
    pub fn new(city: impl Into<String>, subtask: Subtask, subregion: usize) -> Self {
        RegistryKey {
            city: city.into(),
            subtask,
            subregion,
        }
    }

    /// All 15 keys of a city, subtask-major.
    pub fn city_keys(city: &str) -> Vec<RegistryKey> {
        Subtask::ALL
            .into_iter()
            .flat_map(|s| (0..TILE_COUNT).map(move |r| RegistryKey::new(city, s, r)))
            .collect()
    }
}

impl fmt::Display for RegistryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.city, self.subtask.name(), self.subregion)
    }
}

/// Checkpoints on disk at `<root>/<city>/<subtask>/<subregion>.t4nn`.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
    entries: BTreeMap<RegistryKey, PathBuf>,
}

impl ModelRegistry {
    /// Opens `root`, creating it when missing, and indexes any checkpoints
    /// already there.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::NotFound(format!("registry directory {}", root.display())));
        }
        let mut registry = ModelRegistry {
            root: root.to_path_buf(),
            entries: BTreeMap::new(),
        };
        for city in read_dir_sorted(root)? {
            if !city.is_dir() {
                continue;
            }
            let city_name = file_name(&city);
            for sub in read_dir_sorted(&city)? {
                let Ok(subtask) = file_name(&sub).parse::<Subtask>() else { continue };
                if !sub.is_dir() {
                    continue;
                }
                for file in read_dir_sorted(&sub)? {
                    if file.extension().and_then(|e| e.to_str()) != Some("t4nn") {
                        continue;
                    }
                    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let Ok(subregion) = stem.parse::<usize>() else { continue };
                    let key = RegistryKey::new(city_name.clone(), subtask, subregion);
                    registry.check_key(&key)?;
                    registry.entries.insert(key, file);
                }
            }
        }
        Ok(registry)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> Vec<RegistryKey> {
        self.entries.keys().cloned().collect()
    }

    pub fn contains(&self, key: &RegistryKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn cities(&self) -> BTreeSet<String> {
        self.entries.keys().map(|k| k.city.clone()).collect()
    }

    pub fn path_for(&self, key: &RegistryKey) -> PathBuf {
        self.root
            .join(&key.city)
            .join(key.subtask.name())
            .join(format!("{}.t4nn", key.subregion))
    }

    pub fn log_path_for(&self, key: &RegistryKey) -> PathBuf {
        self.path_for(key).with_extension("log")
    }

    /// Would inserting `key` keep the registry within its bounds?
    pub fn check_key(&self, key: &RegistryKey) -> Result<()> {
        if key.subregion >= TILE_COUNT {
            return Err(Error::Registry(format!("subregion {} of {key} outside 0..{TILE_COUNT}", key.subregion)));
        }
        if key.city.is_empty() || key.city.contains(['/', '\\']) {
            return Err(Error::Registry(format!("bad city name {:?}", key.city)));
        }
        if self.entries.contains_key(key) {
            return Ok(());
        }
        let mut cities = self.cities();
        cities.insert(key.city.clone());
        if cities.len() > MAX_CITIES || self.entries.len() >= MAX_MODELS {
            return Err(Error::Registry(format!(
                "adding {key} exceeds {MAX_MODELS} models over {MAX_CITIES} cities"
            )));
        }
        Ok(())
    }

    /// Writes (or overwrites) the checkpoint for `key`.
    pub fn save(&mut self, key: &RegistryKey, model: &UNetModel) -> Result<PathBuf> {
        self.check_key(key)?;
        let path = self.path_for(key);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(model, &path)?;
        self.entries.insert(key.clone(), path.clone());
        Ok(path)
    }

    pub fn load(&self, key: &RegistryKey) -> Result<UNetModel> {
        let path = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Registry(format!("no model for {key} in {}", self.root.display())))?;
        load_checkpoint(path)
    }

    /// Keys of `city` that have no checkpoint yet.
    pub fn missing(&self, city: &str) -> Vec<RegistryKey> {
        RegistryKey::city_keys(city)
            .into_iter()
            .filter(|k| !self.contains(k))
            .collect()
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// samples

/// One training example cropped to a subregion.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Tensor3,
    pub mask: MaskPlane,
    /// Raw truth bytes of the sample's subtask, `horizon` tiles step-major.
    pub target: Vec<u8>,
    pub subtask: Subtask,
    pub horizon: usize,
    /// Input channels that hold raw heading codes (`code / 255`).
    pub heading_inputs: Vec<usize>,
    pub day: u32,
    pub time: usize,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.input.height, self.input.width);
        if self.mask.height != h || self.mask.width != w || self.target.len() != self.horizon * h * w {
            return Err(Error::InvalidInput(format!(
                "sample parts disagree: input {h}x{w}, mask {}x{}, {} target bytes for horizon {}",
                self.mask.height,
                self.mask.width,
                self.target.len(),
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Seeded `(day, time)` sampler. Pairs whose horizon would run past the end
/// of the day, or that lack lag history, are skipped.
#[derive(Debug, Clone)]
pub struct DaySampler {
    rng: ChaCha8Rng,
    days: Vec<u32>,
    horizon: usize,
    fallback: bool,
}

impl DaySampler {
    pub fn new(days: &[u32], horizon: usize, features: &FeatureConfig, seed: u64) -> Self {
        let mut days = days.to_vec();
        days.sort_unstable();
        days.dedup();
        DaySampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            days,
            horizon,
            fallback: features.previous_day_fallback,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_feasible(&self, day: u32, time: usize) -> bool {
        if time + self.horizon > FRAMES_PER_DAY || self.days.binary_search(&day).is_err() {
            return false;
        }
        time >= LAG_COUNT || (self.fallback && day > 0 && self.days.binary_search(&(day - 1)).is_ok())
    }

    fn any_feasible(&self) -> bool {
        self.days.iter().any(|&d| (0..FRAMES_PER_DAY).any(|t| self.is_feasible(d, t)))
    }

    /// Next feasible pair, or `None` when none exists at all.
    pub fn next_pair(&mut self) -> Option<(u32, usize)> {
        if !self.any_feasible() {
            return None;
        }
        loop {
            let day = self.days[self.rng.gen_range(0..self.days.len())];
            let time = self.rng.gen_range(0..FRAMES_PER_DAY);
            if self.is_feasible(day, time) {
                return Some((day, time));
            }
        }
    }

    pub fn draw(&mut self, n: usize) -> Result<Vec<(u32, usize)>> {
        (0..n)
            .map(|_| {
                self.next_pair()
                    .ok_or_else(|| Error::Data("no (day, time) pair has enough history".into()))
            })
            .collect()
    }
}

#[derive(Debug)]
struct CachedStack {
    channels: Tensor3,
    heading_inputs: Vec<usize>,
}

/// Full-grid feature stacks keyed by `(city, day, time, subtask)`, shared
/// by every model of a city.
#[derive(Debug)]
pub struct StackCache<'a> {
    archive: &'a MovieArchive,
    features: FeatureConfig,
    horizon: usize,
    stacks: Mutex<HashMap<(String, u32, usize, Subtask), Arc<CachedStack>>>,
}

impl<'a> StackCache<'a> {
    pub fn new(archive: &'a MovieArchive, features: FeatureConfig, horizon: usize) -> Self {
        StackCache {
            archive,
            features,
            horizon,
            stacks: Mutex::new(HashMap::new()),
        }
    }

    fn get(&self, city: &str, day: u32, time: usize, subtask: Subtask) -> Result<Arc<CachedStack>> {
        let key = (city.to_string(), day, time, subtask);
        if let Some(s) = self.stacks.lock().expect("stack cache poisoned").get(&key) {
            return Ok(Arc::clone(s));
        }
        let mut req = FeatureRequest::new(city, day, time, subtask);
        req.horizon = self.horizon;
        let stack = assemble(self.archive, &req, &self.features)?;
        let heading_inputs = stack
            .manifest
            .iter()
            .filter(|d| d.subtask == Subtask::Heading && matches!(d.source, ChannelSource::Lag { .. }))
            .map(|d| d.index)
            .collect();
        let entry = Arc::new(CachedStack {
            channels: stack.channels,
            heading_inputs,
        });
        self.stacks
            .lock()
            .expect("stack cache poisoned")
            .insert(key, Arc::clone(&entry));
        Ok(entry)
    }

    /// Input crop, mask and horizon targets at `(day, time)`.
    pub fn sample(&self, city: &str, rect: &Rect, subtask: Subtask, day: u32, time: usize) -> Result<TrainSample> {
        if time + self.horizon > FRAMES_PER_DAY {
            return Err(Error::InvalidInput(format!("time {time} + horizon {} passes the day end", self.horizon)));
        }
        let stack = self.get(city, day, time, subtask)?;
        let input = stack.channels.crop(rect)?;
        let mask = compute_mask(&input);
        let movie = self.archive.movie(city, day)?;
        let dims = self.archive.dims();
        let mut target = Vec::with_capacity(self.horizon * rect.h * rect.w);
        for k in 0..self.horizon {
            target.extend(crop_bytes(&movie.frame(time + k).channel_bytes(subtask), dims, rect)?);
        }
        Ok(TrainSample {
            input,
            mask,
            target,
            subtask,
            horizon: self.horizon,
            heading_inputs: stack.heading_inputs.clone(),
            day,
            time,
        })
    }
}

/// `batch_size` samples at pairs drawn from `sampler`, cropped to `rect`.
pub fn make_batch(
    archive: &MovieArchive,
    city: &str,
    rect: &Rect,
    subtask: Subtask,
    sampler: &mut DaySampler,
    batch_size: usize,
    features: &FeatureConfig,
) -> Result<Vec<TrainSample>> {
    let cache = StackCache::new(archive, *features, sampler.horizon());
    sampler
        .draw(batch_size)?
        .into_iter()
        .map(|(day, time)| cache.sample(city, rect, subtask, day, time))
        .collect()
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlipOp {
    Identity,
    /// Mirror left–right.
    HFlip,
    /// Mirror top–bottom.
    VFlip,
    HVFlip,
}

impl FlipOp {
    pub const ALL: [FlipOp; 4] = [FlipOp::Identity, FlipOp::HFlip, FlipOp::VFlip, FlipOp::HVFlip];

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        FlipOp::ALL[rng.gen_range(0..FlipOp::ALL.len())]
    }

    fn flips(self) -> (bool, bool) {
        match self {
            FlipOp::Identity => (false, false),
            FlipOp::HFlip => (true, false),
            FlipOp::VFlip => (false, true),
            FlipOp::HVFlip => (true, true),
        }
    }

    /// Heading code after the flip. A left–right mirror swaps east and west
    /// (NW↔NE, SW↔SE); a top–bottom mirror swaps north and south (NW↔SW,
    /// NE↔SE). Missing (0) and non-codes are returned unchanged.
    pub fn remap_heading(self, code: u8) -> u8 {
        let (h, v) = self.flips();
        let mut c = code;
        if h {
            c = match c {
                1 => 85,
                85 => 1,
                170 => 255,
                255 => 170,
                other => other,
            };
        }
        if v {
            c = match c {
                1 => 170,
                170 => 1,
                85 => 255,
                255 => 85,
                other => other,
            };
        }
        c
    }

    fn source(self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let (fh, fv) = self.flips();
        let sy = if fv { h - 1 - y } else { y };
        let sx = if fh { w - 1 - x } else { x };
        sy * w + sx
    }

    fn apply<T: Copy>(self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(plane[self.source(y, x, h, w)]);
            }
        }
        out
    }
}

fn remap_heading_real(op: FlipOp, v: f64) -> f64 {
    let code = real_to_byte(v * 255.0);
    if is_heading_code(code) && f64::from(code) / 255.0 == v {
        f64::from(op.remap_heading(code)) / 255.0
    } else {
        v
    }
}

/// Flips every input channel, the mask and the targets; heading codes in
/// the heading input channels and in heading targets are remapped to the
/// mirrored direction.
pub fn augment(sample: &TrainSample, op: FlipOp) -> TrainSample {
    if op == FlipOp::Identity {
        return sample.clone();
    }
    let (h, w) = (sample.input.height, sample.input.width);
    let n = h * w;
    let mut input = Tensor3::zeros(sample.input.channels, h, w);
    for c in 0..sample.input.channels {
        let mut flipped = op.apply(sample.input.channel(c), h, w);
        if sample.heading_inputs.contains(&c) {
            for v in &mut flipped {
                *v = remap_heading_real(op, *v);
            }
        }
        input.channel_mut(c).copy_from_slice(&flipped);
    }
    let mut target = Vec::with_capacity(sample.target.len());
    for k in 0..sample.horizon {
        let mut step = op.apply(&sample.target[k * n..(k + 1) * n], h, w);
        if sample.subtask == Subtask::Heading {
            for b in &mut step {
                *b = op.remap_heading(*b);
            }
        }
        target.extend(step);
    }
    TrainSample {
        input,
        mask: MaskPlane {
            height: h,
            width: w,
            data: op.apply(&sample.mask.data, h, w),
        },
        target,
        ..sample.clone()
    }
}

// ---------------------------------------------------------------------------
// optimisation

/// Mean loss of `model` over `samples` (no caching, no update).
pub fn evaluate_loss(model: &UNetModel, samples: &[TrainSample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let out = model.predict(&s.input, &s.mask)?;
        total += cfg.loss_for(s.subtask, &s.target)?.value(&out)?;
    }
    Ok(total / samples.len() as f64)
}

/// One optimiser step on the batch-mean loss. Returns the loss before the
/// update.
pub fn train_step(model: &mut UNetModel, batch: &[TrainSample], cfg: &TrainConfig, opt: &mut OptimizerState) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(model.params());
    let mut total = 0.0;
    for s in batch {
        let out = model.forward(&s.input, &s.mask)?;
        let (loss, g_out) = cfg.loss_for(s.subtask, &s.target)?.loss_and_grad(&out)?;
        grads.accumulate(&model.backward(&g_out)?, scale);
        total += loss * scale;
    }
    model.clear_cache();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    apply_update(model, &grads, opt)?;
    Ok(total)
}

/// One logged optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:e}", self.step, self.phase, self.loss)
    }
}

/// Runs one phase over the leading `data_fraction` of `pool`. Step numbers
/// continue from `log`.
pub fn train_phase(
    model: &mut UNetModel,
    pool: &[TrainSample],
    phase: &PhaseConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    phase.validate()?;
    if pool.is_empty() {
        return Err(Error::Data(format!("{} phase has no samples", phase.phase)));
    }
    let used = &pool[..phase.sample_count(pool.len())];
    let mut opt = OptimizerState::new(cfg.optimizer, phase.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 0..phase.epochs {
        let mut order: Vec<usize> = (0..used.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    if phase.augmentation {
                        augment(&used[i], FlipOp::random(&mut rng))
                    } else {
                        used[i].clone()
                    }
                })
                .collect();
            let step = log.len();
            let loss = train_step(model, &batch, cfg, &mut opt).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{} phase, epoch {epoch}, step {step}: {m}", phase.phase)),
                other => other,
            })?;
            log.push(StepLog {
                step,
                phase: phase.phase,
                loss,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Algorithm 1

/// What a registry training run did.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(key, phase)` in execution order.
    pub phases: Vec<(RegistryKey, Phase)>,
    pub checkpoints: Vec<PathBuf>,
    /// Last logged loss per key.
    pub final_loss: BTreeMap<RegistryKey, f64>,
}

struct KeyRun {
    key: RegistryKey,
    model: UNetModel,
    log: Vec<StepLog>,
}

fn par_map<T: Send, R: Send>(items: Vec<T>, jobs: usize, f: impl Fn(T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>().into_iter());
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let next = queue.lock().expect("work queue poisoned").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results poisoned")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

fn manifest_text(cities: &[String], layout: &TileLayout, schedule: &PhaseSchedule, cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    kv("cities", cities.join(","));
    kv("dims", layout.dims.to_string());
    for (i, r) in layout.rects.iter().enumerate() {
        kv(&format!("rect.{i}"), format!("{},{},{},{}", r.y0, r.x0, r.h, r.w));
    }
    kv("seed", cfg.seed.to_string());
    kv("base_width", cfg.base_width.to_string());
    kv("depth", cfg.depth.to_string());
    kv("horizon", cfg.horizon.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("pool_size", cfg.pool_size.to_string());
    kv("heading_mode", cfg.heading_mode.name().to_string());
    kv("optimizer", format!("{:?}", cfg.optimizer).to_lowercase());
    kv("smoothing_window", cfg.features.smoothing.window.to_string());
    kv("previous_day_fallback", cfg.features.previous_day_fallback.to_string());
    kv("weight.heading", cfg.weights.heading.to_string());
    kv("weight.volume", cfg.weights.volume.to_string());
    kv("weight.speed", cfg.weights.speed.to_string());
    for phase in Phase::ALL {
        let p = schedule.get(phase);
        kv(&format!("{phase}.lr"), p.lr.to_string());
        kv(&format!("{phase}.epochs"), p.epochs.to_string());
        kv(&format!("{phase}.data_fraction"), p.data_fraction.to_string());
        kv(&format!("{phase}.augmentation"), p.augmentation.to_string());
    }
    out
}

/// Trains all 15 models of each city: the heading model of subregion 0
/// from scratch, every other model initialised from its body and
/// fine-tuned, then all 15 polished. Checkpoints, per-model step logs
/// (`step<TAB>phase<TAB>loss`) and a `manifest.txt` land in the registry.
pub fn run_algorithm1(
    archive: &MovieArchive,
    registry: &mut ModelRegistry,
    cities: &[String],
    layout: &TileLayout,
    schedule: &PhaseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    schedule.validate()?;
    cfg.validate()?;
    if layout.dims != archive.dims() {
        return Err(Error::InvalidConfig(format!(
            "layout grid {} differs from archive grid {}",
            layout.dims,
            archive.dims()
        )));
    }
    if layout.rects.len() != TILE_COUNT {
        return Err(Error::InvalidConfig(format!("layout has {} rects, need {TILE_COUNT}", layout.rects.len())));
    }
    let unique: BTreeSet<&String> = cities.iter().collect();
    if cities.is_empty() || unique.len() != cities.len() {
        return Err(Error::InvalidConfig("cities must be a non-empty list without repeats".into()));
    }
    let mut all = registry.cities();
    all.extend(cities.iter().cloned());
    if all.len() > MAX_CITIES {
        return Err(Error::Registry(format!("registry would hold {} cities, max {MAX_CITIES}", all.len())));
    }

    let mut report = TrainReport {
        phases: Vec::new(),
        checkpoints: Vec::new(),
        final_loss: BTreeMap::new(),
    };
    for city in cities {
        let days = archive.days(city)?;
        if days.is_empty() {
            return Err(Error::Data(format!("city {city:?} has no days in the archive")));
        }
        let pairs = DaySampler::new(&days, cfg.horizon, &cfg.features, derive_seed(cfg.seed, &format!("{city}/pool")))
            .draw(cfg.pool_size)?;
        let cache = StackCache::new(archive, cfg.features, cfg.horizon);
        let pool_for = |key: &RegistryKey| -> Result<Vec<TrainSample>> {
            let rect = &layout.rects[key.subregion];
            pairs
                .iter()
                .map(|&(d, t)| cache.sample(city, rect, key.subtask, d, t))
                .collect()
        };
        let init = |key: &RegistryKey| {
            let rect = &layout.rects[key.subregion];
            UNetModel::new(cfg.net_config(key.subtask, (rect.h, rect.w)), derive_seed(cfg.seed, &format!("{key}/init")))
        };
        let train = |run: &mut KeyRun, phase: Phase| -> Result<()> {
            let pool = pool_for(&run.key)?;
            let seed = derive_seed(cfg.seed, &format!("{}/{phase}", run.key));
            debug!("{} {phase}: {} samples", run.key, pool.len());
            train_phase(&mut run.model, &pool, schedule.get(phase), cfg, seed, &mut run.log)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{}: {m}", run.key)),
                    other => other,
                })
        };

        // 1. heading, subregion 0, from scratch
        let first = RegistryKey::new(city.as_str(), Subtask::Heading, 0);
        let mut scratch = KeyRun {
            model: init(&first)?,
            key: first,
            log: Vec::new(),
        };
        train(&mut scratch, Phase::Scratch)?;
        info!("{}: scratch done, loss {:?}", scratch.key, scratch.log.last().map(|l| l.loss));
        report.phases.push((scratch.key.clone(), Phase::Scratch));

        // 2. every other model starts from the scratch body
        let others: Vec<RegistryKey> = RegistryKey::city_keys(city)
            .into_iter()
            .filter(|k| *k != scratch.key)
            .collect();
        let body = &scratch.model;
        let tuned = par_map(others, cfg.jobs, |key| {
            let mut run = KeyRun {
                model: init(&key)?,
                key,
                log: Vec::new(),
            };
            run.model.transfer_body_from(body);
            train(&mut run, Phase::FinetuneTask)?;
            Ok(run)
        })?;
        report
            .phases
            .extend(tuned.iter().map(|r| (r.key.clone(), Phase::FinetuneTask)));
        info!("{city}: task fine-tuning done for {} models", tuned.len());

        // 3. polish all 15
        let mut runs: Vec<KeyRun> = std::iter::once(scratch).chain(tuned).collect();
        runs.sort_by(|a, b| a.key.cmp(&b.key));
        let polished = par_map(runs, cfg.jobs, |mut run| {
            train(&mut run, Phase::FinetunePolish)?;
            Ok(run)
        })?;
        for run in polished {
            report.phases.push((run.key.clone(), Phase::FinetunePolish));
            let path = registry.save(&run.key, &run.model)?;
            let log_path = registry.log_path_for(&run.key);
            let text: String = run.log.iter().map(|l| format!("{l}\n")).collect();
            fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
            if let Some(last) = run.log.last() {
                report.final_loss.insert(run.key.clone(), last.loss);
            }
            report.checkpoints.push(path);
        }
        info!("{city}: 15 models polished and saved");
    }
    let manifest = registry.root().join("manifest.txt");
    fs::write(&manifest, manifest_text(cities, layout, schedule, cfg)).map_err(|e| Error::io(&manifest, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// similarity and online fine-tuning

#[derive(Debug, Clone, PartialEq)]
pub struct DaySimilarityFeatures {
    pub day: u32,
    /// Caller-supplied context (weather, holiday flags, ...).
    pub external: Option<Vec<f64>>,
}

impl DaySimilarityFeatures {
    pub fn day(day: u32) -> Self {
        DaySimilarityFeatures { day, external: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityWeights {
    pub time: f64,
    pub external: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights { time: 1.0, external: 0.0 }
    }
}

/// Candidate days by ascending `w_t·|Δday| + w_e·‖Δexternal‖₁` (absent
/// vectors contribute 0); ties by smaller `|Δday|`, then smaller day.
pub fn rank_similar_days(
    target: &DaySimilarityFeatures,
    candidates: &[DaySimilarityFeatures],
    weights: SimilarityWeights,
) -> Result<Vec<u32>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate days to rank".into()));
    }
    if [weights.time, weights.external].iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig(format!("similarity weights must be finite and >= 0: {weights:?}")));
    }
    let lengths: BTreeSet<usize> = std::iter::once(target)
        .chain(candidates)
        .filter_map(|c| c.external.as_ref().map(Vec::len))
        .collect();
    if lengths.len() > 1 {
        return Err(Error::InvalidInput(format!("external vectors differ in length: {lengths:?}")));
    }
    let mut scored: Vec<(f64, u64, u32)> = candidates
        .iter()
        .map(|c| {
            let dt = (i64::from(c.day) - i64::from(target.day)).unsigned_abs();
            let de = match (&target.external, &c.external) {
                (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
                _ => 0.0,
            };
            (weights.time * dt as f64 + weights.external * de, dt, c.day)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(scored.into_iter().map(|s| s.2).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFinetune {
    pub city: String,
    pub rect: Rect,
    pub subtask: Subtask,
    pub target: DaySimilarityFeatures,
    pub candidates: Vec<DaySimilarityFeatures>,
    pub weights: SimilarityWeights,
    /// Neighbour days used for training.
    pub k: usize,
    pub lr: f64,
    /// Training samples drawn per neighbour day.
    pub samples_per_day: usize,
    /// Held-out times on the target day for the before/after loss.
    pub validation_times: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineReport {
    pub before: f64,
    pub after: f64,
    pub days_used: Vec<u32>,
    /// Mean loss over the epoch's training samples before the first step
    /// and after each step.
    pub train_losses: Vec<f64>,
    /// Set when there was nothing to train on; the model is untouched.
    pub warning: Option<String>,
}

/// One extra SGD epoch on samples from the `k` days most similar to the
/// target day.
pub fn online_finetune(
    model: &mut UNetModel,
    archive: &MovieArchive,
    job: &OnlineFinetune,
    cfg: &TrainConfig,
) -> Result<OnlineReport> {
    if job.k == 0 || job.samples_per_day == 0 {
        return Err(Error::InvalidConfig("k and samples per day must be >= 1".into()));
    }
    if !(job.lr.is_finite() && job.lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate {} must be finite and >= 0", job.lr)));
    }
    if job.validation_times.is_empty() {
        return Err(Error::InvalidInput("no validation times for the target day".into()));
    }
    let cache = StackCache::new(archive, cfg.features, cfg.horizon);
    let validation = job
        .validation_times
        .iter()
        .map(|&t| cache.sample(&job.city, &job.rect, job.subtask, job.target.day, t))
        .collect::<Result<Vec<_>>>()?;
    let before = evaluate_loss(model, &validation, cfg)?;

    if job.candidates.is_empty() {
        warn!("online fine-tune for day {}: no candidate days, model unchanged", job.target.day);
        return Ok(OnlineReport {
            before,
            after: before,
            days_used: Vec::new(),
            train_losses: Vec::new(),
            warning: Some("no similar days; fine-tuning skipped".into()),
        });
    }
    let ranked = rank_similar_days(&job.target, &job.candidates, job.weights)?;
    let days_used: Vec<u32> = ranked.into_iter().take(job.k).collect();
    let mut samples = Vec::new();
    for &day in &days_used {
        let mut sampler = DaySampler::new(&[day], cfg.horizon, &cfg.features, derive_seed(job.seed, &format!("online/{day}")));
        // the sampler only knows this one day, so the lag fallback is off
        sampler.fallback = cfg.features.previous_day_fallback && archive.contains(&job.city, day.wrapping_sub(1));
        for (d, t) in sampler.draw(job.samples_per_day)? {
            samples.push(cache.sample(&job.city, &job.rect, job.subtask, d, t)?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.seed, "online/order"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut opt = OptimizerState::sgd(job.lr);
    let mut train_losses = vec![evaluate_loss(model, &samples, cfg)?];
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        train_step(model, &batch, cfg, &mut opt)?;
        train_losses.push(evaluate_loss(model, &samples, cfg)?);
    }
    let after = evaluate_loss(model, &validation, cfg)?;
    Ok(OnlineReport {
        before,
        after,
        days_used,
        train_losses,
        warning: None,
    })
}

// ---------------------------------------------------------------------------
// prediction

/// Nearest heading code to a value on the byte scale; ties go to the lower
/// code.
pub fn snap_to_heading_code(v: f64) -> u8 {
    let mut best = HEADING_CODES[0];
    for &c in &HEADING_CODES[1..] {
        if (f64::from(c) - v).abs() < (f64::from(best) - v).abs() {
            best = c;
        }
    }
    best
}

/// Stitched city-wide output of one subtask, one entry per horizon step.
#[derive(Debug, Clone, PartialEq)]
pub enum SubtaskPrediction {
    /// Values on the byte scale (`output · 255`), not yet rounded.
    Values(Vec<Plane>),
    /// Heading codes from the class-probability argmax.
    Codes(Vec<Vec<u8>>),
}

fn check_model(model: &UNetModel, key: &RegistryKey, rect: &Rect, horizon: Option<usize>) -> Result<()> {
    let cfg = model.config();
    if cfg.tile != (rect.h, rect.w) || cfg.in_channels != FEATURE_CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "model {key} expects {}-channel {}x{} tiles, subregion is {}x{}",
            cfg.in_channels, cfg.tile.0, cfg.tile.1, rect.h, rect.w
        )));
    }
    if let Some(h) = horizon {
        if cfg.horizon != h {
            return Err(Error::InvalidConfig(format!("model {key} has horizon {}, expected {h}", cfg.horizon)));
        }
    }
    if (key.subtask != Subtask::Heading) && cfg.head == HeadKind::Heading {
        return Err(Error::InvalidConfig(format!("model {key} has a heading head")));
    }
    Ok(())
}

/// Runs the five subregion models of one subtask and stitches the result.
pub fn predict_subtask(
    registry: &ModelRegistry,
    archive: &MovieArchive,
    city: &str,
    subtask: Subtask,
    day: u32,
    time: usize,
    layout: &TileLayout,
    features: &FeatureConfig,
) -> Result<SubtaskPrediction> {
    if layout.dims != archive.dims() || layout.rects.len() != TILE_COUNT {
        return Err(Error::InvalidConfig(format!(
            "layout ({} rects over {}) does not fit archive grid {}",
            layout.rects.len(),
            layout.dims,
            archive.dims()
        )));
    }
    let keys: Vec<RegistryKey> = (0..TILE_COUNT).map(|r| RegistryKey::new(city, subtask, r)).collect();
    let models = keys.iter().map(|k| registry.load(k)).collect::<Result<Vec<_>>>()?;
    let horizon = models[0].config().horizon;
    let head = models[0].config().head;
    for ((m, k), r) in models.iter().zip(&keys).zip(&layout.rects) {
        check_model(m, k, r, Some(horizon))?;
        if m.config().head != head {
            return Err(Error::InvalidConfig(format!("model {k} head differs from subregion 0")));
        }
    }
    let mut req = FeatureRequest::new(city, day, time, subtask);
    req.horizon = horizon;
    let stack = assemble(archive, &req, features)?.channels;
    let outputs = models
        .iter()
        .zip(&layout.rects)
        .map(|(m, r)| {
            let input = stack.crop(r)?;
            m.predict(&input, &compute_mask(&input))
        })
        .collect::<Result<Vec<_>>>()?;
    match head {
        HeadKind::Regression => (0..horizon)
            .map(|k| {
                let tiles: Vec<Plane> = outputs
                    .iter()
                    .map(|o| {
                        let mut p = o.plane(k);
                        p.data.iter_mut().for_each(|v| *v *= 255.0);
                        p
                    })
                    .collect();
                stitch(&tiles, layout)
            })
            .collect::<Result<Vec<_>>>()
            .map(SubtaskPrediction::Values),
        HeadKind::Heading => {
            let probs = outputs.iter().map(softmax_classes).collect::<Result<Vec<_>>>()?;
            (0..horizon)
                .map(|k| {
                    let tiles: Vec<Tensor3> = probs
                        .iter()
                        .map(|p| {
                            let n = p.plane_len();
                            let data = p.data[k * HEADING_CLASSES * n..(k + 1) * HEADING_CLASSES * n].to_vec();
                            Tensor3::from_vec(HEADING_CLASSES, p.height, p.width, data)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    stitch_heading(&tiles, layout)
                })
                .collect::<Result<Vec<_>>>()
                .map(SubtaskPrediction::Codes)
        }
    }
}

/// `horizon` predicted frames starting at `time`. Volume and speed are
/// rounded to bytes; headings come from the class argmax, or, for
/// regression heading models, are snapped to the nearest legal code.
pub fn predict_city(
    registry: &ModelRegistry,
    archive: &MovieArchive,
    city: &str,
    day: u32,
    time: usize,
    layout: &TileLayout,
    features: &FeatureConfig,
) -> Result<Vec<Frame>> {
    if let Some(k) = registry.missing(city).first() {
        return Err(Error::Registry(format!("no model for {k} in {}", registry.root().display())));
    }
    let dims: GridDims = archive.dims();
    let mut channels: Vec<Vec<Vec<u8>>> = Vec::with_capacity(MOVIE_CHANNELS);
    for subtask in Subtask::ALL {
        let pred = predict_subtask(registry, archive, city, subtask, day, time, layout, features)?;
        channels.push(match pred {
            SubtaskPrediction::Values(planes) => planes
                .into_iter()
                .map(|p| {
                    p.data
                        .into_iter()
                        .map(|v| {
                            if subtask == Subtask::Heading {
                                snap_to_heading_code(v)
                            } else {
                                real_to_byte(v)
                            }
                        })
                        .collect()
                })
                .collect(),
            SubtaskPrediction::Codes(codes) => codes,
        });
    }
    let horizon = channels[0].len();
    if channels.iter().any(|c| c.len() != horizon) {
        return Err(Error::InvalidConfig("subtask models disagree on the horizon".into()));
    }
    (0..horizon)
        .map(|k| {
            let mut pixels = Vec::with_capacity(dims.pixels() * MOVIE_CHANNELS);
            for p in 0..dims.pixels() {
                for ch in &channels {
                    pixels.push(ch[k][p]);
                }
            }
            Frame::new(dims, pixels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::movie_store::{synth_movie, Movie};
    use crate::tiling::plan_layout;

    fn archive(days: &[u32], dims: GridDims, city: &str) -> MovieArchive {
        let mut a = MovieArchive::in_memory(dims);
        for &d in days {
            let mut m = synth_movie(31, dims, d, 0.3);
            m.city = city.to_string();
            a.insert(m).unwrap();
        }
        a
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            base_width: 2,
            depth: 1,
            horizon: 2,
            batch_size: 2,
            pool_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_rules() {
        let s = PhaseSchedule::default();
        s.validate().unwrap();
        let mut bad = s;
        bad.polish.lr = bad.task.lr;
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let mut bad = s;
        bad.scratch.augmentation = true;
        assert!(bad.validate().is_err());
        let mut bad = s;
        bad.polish.data_fraction = 1.0;
        bad.task.data_fraction = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = s;
        bad.polish.augmentation = false;
        assert!(bad.validate().is_err());
        assert_eq!(s.polish.sample_count(8), 4);
        assert_eq!(s.polish.sample_count(1), 1);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    }

    #[test]
    fn sampler_skips_pairs_past_the_day_end() {
        let mut s = DaySampler::new(&[3, 4], 3, &FeatureConfig::default(), 9);
        for _ in 0..500 {
            let (d, t) = s.next_pair().unwrap();
            assert!([3, 4].contains(&d) && t >= LAG_COUNT && t + 3 <= FRAMES_PER_DAY);
        }
        assert!(DaySampler::new(&[], 3, &FeatureConfig::default(), 0).next_pair().is_none());
        assert!(!s.is_feasible(3, 286));
        assert!(s.is_feasible(3, 285));
    }

    #[test]
    fn batches_are_deterministic_and_match_the_archive() {
        let dims = GridDims::new(10, 12).unwrap();
        let a = archive(&[0, 1, 2], dims, "c");
        let rect = Rect::new(2, 3, 6, 7);
        let fc = FeatureConfig::default();
        let batch = |seed| {
            let mut s = DaySampler::new(&[0, 1, 2], 3, &fc, seed);
            make_batch(&a, "c", &rect, Subtask::Speed, &mut s, 4, &fc).unwrap()
        };
        let (b1, b2) = (batch(5), batch(5));
        assert_eq!(b1.len(), 4);
        assert_eq!(b1, b2);
        for s in &b1 {
            s.validate().unwrap();
            assert_eq!(s.input.shape(), (FEATURE_CHANNELS, 6, 7));
            let movie = a.movie("c", s.day).unwrap();
            for k in 0..3 {
                for y in 0..6 {
                    for x in 0..7 {
                        assert_eq!(
                            s.target[k * 42 + y * 7 + x],
                            movie.frame(s.time + k).value(y + 2, x + 3, Subtask::Speed)
                        );
                    }
                }
            }
            assert_eq!(s.heading_inputs, (0..LAG_COUNT).map(|l| 3 * l + 2).collect::<Vec<_>>());
        }
    }

    fn heading_sample(code: u8) -> TrainSample {
        let (h, w) = (3, 4);
        let mut input = Tensor3::zeros(2, h, w);
        input.channel_mut(0).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 20.0);
        input.channel_mut(1).fill(f64::from(code) / 255.0);
        TrainSample {
            mask: compute_mask(&input),
            input,
            target: vec![code; h * w],
            subtask: Subtask::Heading,
            horizon: 1,
            heading_inputs: vec![1],
            day: 0,
            time: 12,
        }
    }

    #[test]
    fn flips() {
        let s = heading_sample(85);
        assert_eq!(augment(&s, FlipOp::Identity), s);
        let h = augment(&s, FlipOp::HFlip);
        assert!(h.target.iter().all(|&b| b == 1));
        assert!(h.input.channel(1).iter().all(|&v| v == 1.0 / 255.0));
        assert_eq!(h.input.get(0, 0, 0), s.input.get(0, 0, 3));
        assert_eq!(augment(&s, FlipOp::VFlip).target[0], 255);
        assert_eq!(augment(&s, FlipOp::HVFlip).target[0], 170);
        for op in FlipOp::ALL {
            assert_eq!(augment(&augment(&s, op), op), s);
            for code in HEADING_CODES {
                assert!(is_heading_code(op.remap_heading(code)));
                assert_eq!(op.remap_heading(op.remap_heading(code)), code);
            }
        }
        // volume values are moved, never changed
        let mut v = heading_sample(85);
        v.subtask = Subtask::Volume;
        v.target = (0..12).collect();
        let f = augment(&v, FlipOp::HFlip);
        assert_eq!(f.target[..4], [3, 2, 1, 0]);
    }

    #[test]
    fn ranking() {
        let days = |v: &[u32]| v.iter().map(|&d| DaySimilarityFeatures::day(d)).collect::<Vec<_>>();
        let t = DaySimilarityFeatures::day(40);
        let w = SimilarityWeights { time: 1.0, external: 0.0 };
        assert_eq!(rank_similar_days(&t, &days(&[10, 35, 39]), w).unwrap(), vec![39, 35, 10]);
        // equal distance either side: smaller day first
        assert_eq!(rank_similar_days(&t, &days(&[41, 39]), w).unwrap(), vec![39, 41]);
        let ext = |d, e: f64| DaySimilarityFeatures { day: d, external: Some(vec![e]) };
        let t = ext(40, 0.0);
        let w = SimilarityWeights { time: 0.0, external: 1.0 };
        assert_eq!(rank_similar_days(&t, &[ext(39, 10.0), ext(10, 0.0)], w).unwrap(), vec![10, 39]);
        assert!(rank_similar_days(&t, &[], w).is_err());
        let bad = DaySimilarityFeatures { day: 1, external: Some(vec![1.0, 2.0]) };
        assert!(rank_similar_days(&t, &[bad], w).is_err());
    }

    #[test]
    fn registry_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ModelRegistry::create(dir.path()).unwrap();
        let cfg = tiny_cfg().net_config(Subtask::Volume, (4, 4));
        let model = UNetModel::new(cfg, 0).unwrap();
        for city in ["a", "b", "c"] {
            for key in RegistryKey::city_keys(city) {
                reg.save(&key, &model).unwrap();
            }
        }
        assert_eq!(reg.len(), MAX_MODELS);
        // overwriting an existing key is fine, a fourth city is not
        reg.save(&RegistryKey::new("a", Subtask::Speed, 2), &model).unwrap();
        assert!(matches!(reg.save(&RegistryKey::new("d", Subtask::Speed, 0), &model), Err(Error::Registry(_))));
        assert!(reg.check_key(&RegistryKey::new("a", Subtask::Speed, 5)).is_err());
        let reopened = ModelRegistry::open(dir.path()).unwrap();
        assert_eq!(reopened.keys(), reg.keys());
        assert_eq!(reopened.load(&RegistryKey::new("b", Subtask::Heading, 4)).unwrap(), model);
        let err = ModelRegistry::create(&dir.path().join("x")).unwrap().load(&RegistryKey::new("q", Subtask::Volume, 1));
        assert!(matches!(err, Err(Error::Registry(m)) if m.contains("q/volume/1")));
    }

    #[test]
    fn algorithm1_small_run_and_prediction() {
        let dims = GridDims::new(12, 14).unwrap();
        let a = archive(&[0, 1], dims, "c");
        let layout = plan_layout(dims, 8, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ModelRegistry::create(dir.path()).unwrap();
        let cfg = tiny_cfg();
        let report = run_algorithm1(&a, &mut reg, &["c".to_string()], &layout, &PhaseSchedule::default(), &cfg).unwrap();
        assert_eq!(reg.len(), 15);
        assert_eq!(report.checkpoints.len(), 15);
        assert_eq!(report.phases[0], (RegistryKey::new("c", Subtask::Heading, 0), Phase::Scratch));
        assert_eq!(report.phases.iter().filter(|p| p.1 == Phase::FinetuneTask).count(), 14);
        assert_eq!(report.phases.iter().filter(|p| p.1 == Phase::FinetunePolish).count(), 15);
        let log = fs::read_to_string(reg.log_path_for(&RegistryKey::new("c", Subtask::Heading, 0))).unwrap();
        assert!(log.lines().next().unwrap().starts_with("0\tscratch\t"));
        assert!(fs::read_to_string(dir.path().join("manifest.txt")).unwrap().contains("finetune_polish.lr = 0.0001"));

        let frames = predict_city(&reg, &a, "c", 1, 100, &layout, &cfg.features).unwrap();
        assert_eq!(frames.len(), 2);
        for f in &frames {
            assert!(f.channel_bytes(Subtask::Heading).iter().all(|&b| is_heading_code(b)));
        }
        let missing = predict_city(&ModelRegistry::create(&dir.path().join("empty")).unwrap(), &a, "c", 1, 100, &layout, &cfg.features);
        assert!(matches!(missing, Err(Error::Registry(_))));
    }

    #[test]
    fn zero_models_predict_zero() {
        let dims = GridDims::new(12, 14).unwrap();
        let mut a = MovieArchive::in_memory(dims);
        a.insert(Movie::constant("z", 0, dims, 0, 0, 0).unwrap()).unwrap();
        let layout = plan_layout(dims, 8, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ModelRegistry::create(dir.path()).unwrap();
        let cfg = tiny_cfg();
        for key in RegistryKey::city_keys("z") {
            let m = UNetModel::zeroed(cfg.net_config(key.subtask, (8, 8))).unwrap();
            reg.save(&key, &m).unwrap();
        }
        let frames = predict_city(&reg, &a, "z", 0, 50, &layout, &cfg.features).unwrap();
        assert!(frames.iter().all(|f| f.pixels().iter().all(|&b| b == 0)));
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_to_heading_code(0.4), 0);
        assert_eq!(snap_to_heading_code(0.5), 0);
        assert_eq!(snap_to_heading_code(43.0), 1);
        assert_eq!(snap_to_heading_code(127.5), 85);
        assert_eq!(snap_to_heading_code(300.0), 255);
    }

    #[test]
    fn online_finetune_cases() {
        let dims = GridDims::new(8, 8).unwrap();
        let a = archive(&[5, 6, 7], dims, "c");
        let cfg = tiny_cfg();
        let rect = Rect::new(0, 0, 8, 8);
        let model = UNetModel::new(cfg.net_config(Subtask::Volume, (8, 8)), 3).unwrap();
        let job = OnlineFinetune {
            city: "c".into(),
            rect,
            subtask: Subtask::Volume,
            target: DaySimilarityFeatures::day(7),
            candidates: vec![DaySimilarityFeatures::day(5), DaySimilarityFeatures::day(6)],
            weights: SimilarityWeights::default(),
            k: 1,
            lr: 0.0,
            samples_per_day: 3,
            validation_times: vec![100, 200],
            seed: 1,
        };
        let mut m = model.clone();
        let r = online_finetune(&mut m, &a, &job, &cfg).unwrap();
        assert_eq!(m, model);
        assert_eq!(r.before, r.after);
        assert_eq!(r.days_used, vec![6]);
        assert!(r.warning.is_none());

        let empty = OnlineFinetune { candidates: vec![], ..job.clone() };
        let r = online_finetune(&mut m, &a, &empty, &cfg).unwrap();
        assert!(r.warning.is_some());
        assert_eq!(m, model);
    }
}
