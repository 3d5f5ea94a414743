//! Forward and backward kernels for the handful of layers the network uses.
//! All tensors are channel-first `f64`; convolutions are stride 1 with
//! zero "same" padding.

use crate::tensor::Tensor3;

/// Convolution with a square `k × k` kernel (odd `k`), weights laid out
/// `out × in × k × k`.
pub fn conv2d(x: &Tensor3, weight: &[f64], bias: &[f64], out_ch: usize, k: usize) -> Tensor3 {
    let (in_ch, h, w) = x.shape();
    debug_assert_eq!(weight.len(), out_ch * in_ch * k * k);
    let pad = k / 2;
    let mut out = Tensor3::zeros(out_ch, h, w);
    let n = h * w;
    for co in 0..out_ch {
        let dst = &mut out.data[co * n..(co + 1) * n];
        dst.fill(bias[co]);
        for ci in 0..in_ch {
            let src = &x.data[ci * n..(ci + 1) * n];
            for ky in 0..k {
                // output row y reads input row y + ky - pad
                let (y_lo, y_hi) = valid_range(h, ky, pad);
                for kx in 0..k {
                    let wv = weight[((co * in_ch + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_range(w, kx, pad);
                    for y in y_lo..y_hi {
                        let sy = y + ky - pad;
                        let drow = &mut dst[y * w + x_lo..y * w + x_hi];
                        let srow = &src[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `[lo, hi)` along an axis of length `len` for which
/// tap `t` reads inside the input.
#[inline]
fn valid_range(len: usize, t: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (len + pad).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

pub struct ConvGrads {
    pub input: Option<Tensor3>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of [`conv2d`]. The input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward(
    x: &Tensor3,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    grad_out: &Tensor3,
    need_input: bool,
) -> ConvGrads {
    let (in_ch, h, w) = x.shape();
    let pad = k / 2;
    let n = h * w;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; out_ch];
    let mut gx = need_input.then(|| Tensor3::zeros(in_ch, h, w));
    for co in 0..out_ch {
        let go = &grad_out.data[co * n..(co + 1) * n];
        gb[co] = go.iter().sum();
        for ci in 0..in_ch {
            let src = &x.data[ci * n..(ci + 1) * n];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(h, ky, pad);
                for kx in 0..k {
                    let wi = ((co * in_ch + ci) * k + ky) * k + kx;
                    let (x_lo, x_hi) = valid_range(w, kx, pad);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - pad;
                        let grow = &go[y * w + x_lo..y * w + x_hi];
                        let srow = &src[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
                        acc += grow.iter().zip(srow).map(|(g, s)| g * s).sum::<f64>();
                    }
                    gw[wi] = acc;
                    if let Some(gx) = gx.as_mut() {
                        let wv = weight[wi];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut gx.data[ci * n..(ci + 1) * n];
                        for y in y_lo..y_hi {
                            let sy = y + ky - pad;
                            let grow = &go[y * w + x_lo..y * w + x_hi];
                            let drow = &mut dst[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward through a rectifier given its pre-activation input.
pub fn relu_backward(pre: &Tensor3, grad: &mut Tensor3) {
    for (g, p) in grad.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max-pool with stride 2 on even-sized input. Returns the pooled
/// tensor and, per output element, the flat input index that won (first
/// maximum in row-major window order).
pub fn maxpool2(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = x.idx(ch, 2 * y, 2 * xx);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = x.idx(ch, 2 * y + dy, 2 * xx + dx);
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = out.idx(ch, y, xx);
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &Tensor3, arg: &[usize], input_shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut g = Tensor3::zeros(c, h, w);
    for (o, &i) in arg.iter().enumerate() {
        g.data[i] += grad_out.data[o];
    }
    g
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let mut out = Tensor3::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let o = out.idx(ch, y, xx);
                out.data[o] = x.get(ch, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, h, w) = grad_out.shape();
    let mut g = Tensor3::zeros(c, h / 2, w / 2);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = g.idx(ch, y / 2, xx / 2);
                g.data[i] += grad_out.get(ch, y, xx);
            }
        }
    }
    g
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3 {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Splits a gradient of `concat` back into its two parts.
pub fn split_channels(g: &Tensor3, first: usize) -> (Tensor3, Tensor3) {
    let n = g.plane_len();
    let a = Tensor3 {
        channels: first,
        height: g.height,
        width: g.width,
        data: g.data[..first * n].to_vec(),
    };
    let b = Tensor3 {
        channels: g.channels - first,
        height: g.height,
        width: g.width,
        data: g.data[first * n..].to_vec(),
    };
    (a, b)
}

/// Zero-pads to `h × w`, placing the input at `(top, left)`.
pub fn pad(x: &Tensor3, h: usize, w: usize, top: usize, left: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..x.height {
            let src = x.idx(c, y, 0);
            let dst = out.idx(c, y + top, left);
            out.data[dst..dst + x.width].copy_from_slice(&x.data[src..src + x.width]);
        }
    }
    out
}

/// Inverse of [`pad`]: the `h × w` window at `(top, left)`.
pub fn unpad(x: &Tensor3, h: usize, w: usize, top: usize, left: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            let src = x.idx(c, y + top, left);
            let dst = out.idx(c, y, 0);
            out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of same-padded convolution.
    fn naive_conv(x: &Tensor3, weight: &[f64], bias: &[f64], out_ch: usize, k: usize) -> Tensor3 {
        let (in_ch, h, w) = x.shape();
        let pad = (k / 2) as isize;
        let mut out = Tensor3::zeros(out_ch, h, w);
        for co in 0..out_ch {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = bias[co];
                    for ci in 0..in_ch {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += weight[((co * in_ch + ci) * k + ky as usize) * k + kx as usize]
                                    * x.get(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    let i = out.idx(co, y as usize, xx as usize);
                    out.data[i] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ci, co, h, w, k) in [(2, 3, 5, 4, 3), (1, 1, 1, 1, 3), (3, 2, 4, 6, 1), (2, 2, 2, 3, 5)] {
            let x = rand_tensor(&mut rng, ci, h, w);
            let wt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d(&x, &wt, &b, co, k);
            let slow = naive_conv(&x, &wt, &b, co, k);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ci, co, h, w, k) = (2, 2, 4, 5, 3);
        let x = rand_tensor(&mut rng, ci, h, w);
        let wt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2];
        let go = rand_tensor(&mut rng, co, h, w);
        let f = |x: &Tensor3, wt: &[f64]| -> f64 {
            conv2d(x, wt, &b, co, k).data.iter().zip(&go.data).map(|(a, g)| a * g).sum()
        };
        let g = conv2d_backward(&x, &wt, co, k, &go, true);
        for i in 0..wt.len() {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            assert!(((f(&x, &p) - f(&x, &m)) / 2e-6 - g.weight[i]).abs() < 1e-8);
        }
        let gx = g.input.unwrap();
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            assert!(((f(&p, &wt) - f(&m, &wt)) / 2e-6 - gx.data[i]).abs() < 1e-8);
        }
        let gsum: Vec<f64> = (0..co).map(|c| go.channel(c).iter().sum()).collect();
        assert_eq!(g.bias, gsum);
    }

    #[test]
    fn pool_upsample_shapes_and_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 4, 6);
        let (p, arg) = maxpool2(&x);
        assert_eq!(p.shape(), (2, 2, 3));
        assert_eq!(upsample2(&p).shape(), x.shape());
        for (o, &i) in arg.iter().enumerate() {
            assert_eq!(p.data[o], x.data[i]);
        }
        let g = maxpool2_backward(&Tensor3::from_vec(2, 2, 3, vec![1.0; 12]).unwrap(), &arg, x.shape());
        assert_eq!(g.data.iter().sum::<f64>(), 12.0);
        let up = upsample2_backward(&Tensor3::from_vec(2, 4, 6, vec![1.0; 48]).unwrap());
        assert!(up.data.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn pad_unpad_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 3, 5, 7);
        let p = pad(&x, 8, 8, 1, 0);
        assert_eq!(unpad(&p, 5, 7, 1, 0), x);
        let y = rand_tensor(&mut rng, 2, 5, 7);
        let (a, b) = split_channels(&concat(&x, &y), 3);
        assert_eq!(a, x);
        assert_eq!(b, y);
    }
}
