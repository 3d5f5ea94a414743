//! Pixel metrics (MSE, MAE, MAPE), 5-class pixel cross-entropy, the
//! weighted CE + MAPE composite loss, leaderboard-style per-channel reports
//! and the heading bias table.

use std::fmt;

use crate::error::{Error, Result};
use crate::movie_store::{heading_value_to_class, Frame, Subtask, HEADING_CLASSES, HEADING_CODES};
use crate::tensor::{Plane, Tensor3};

/// Truth values below this are excluded from MAPE (byte 0 is "missing").
pub const MAPE_MIN_TRUTH: f64 = 1.0 / 255.0;

fn check_len(pred: usize, truth: usize) -> Result<()> {
    if pred != truth {
        return Err(Error::InvalidInput(format!(
            "prediction has {pred} values, truth has {truth}"
        )));
    }
    Ok(())
}

pub fn mse_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

pub fn mae_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// MAPE and the number of qualifying pixels.
pub fn mape_values(pred: &[f64], truth: &[f64], min_truth: f64) -> Result<(f64, usize)> {
    check_len(pred.len(), truth.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t >= min_truth {
            sum += (p - t).abs() / t;
            count += 1;
        }
    }
    Ok((if count == 0 { 0.0 } else { sum / count as f64 }, count))
}

pub fn mse(pred: &Plane, truth: &Plane) -> Result<f64> {
    pred.check_same_shape(truth)?;
    mse_values(&pred.data, &truth.data)
}

pub fn mae(pred: &Plane, truth: &Plane) -> Result<f64> {
    pred.check_same_shape(truth)?;
    mae_values(&pred.data, &truth.data)
}

pub fn mape(pred: &Plane, truth: &Plane, min_truth: f64) -> Result<f64> {
    pred.check_same_shape(truth)?;
    Ok(mape_values(&pred.data, &truth.data, min_truth)?.0)
}

/// Gradient of [`mse_values`] with respect to `pred`.
pub fn mse_grad(pred: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = mse_values(pred, truth)?;
    let n = pred.len().max(1) as f64;
    Ok((loss, pred.iter().zip(truth).map(|(p, t)| 2.0 * (p - t) / n).collect()))
}

/// Subgradient of [`mape_values`]; zero at `pred == truth`.
pub fn mape_grad(pred: &[f64], truth: &[f64], min_truth: f64) -> Result<(f64, Vec<f64>)> {
    let (loss, count) = mape_values(pred, truth, min_truth)?;
    let n = count.max(1) as f64;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            if *t >= min_truth {
                let d = p - t;
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                sign / (t * n)
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

fn check_logits(logits: &Tensor3, truth: &[u8]) -> Result<usize> {
    if logits.channels == 0 || logits.channels % HEADING_CLASSES != 0 {
        return Err(Error::InvalidInput(format!(
            "logit channels {} not a multiple of {HEADING_CLASSES}",
            logits.channels
        )));
    }
    let steps = logits.channels / HEADING_CLASSES;
    check_len(steps * logits.plane_len(), truth.len())?;
    if let Some(&c) = truth.iter().find(|&&c| c as usize >= HEADING_CLASSES) {
        return Err(Error::InvalidInput(format!("heading class {c} outside [0, 4]")));
    }
    Ok(steps)
}

/// Mean over pixels (and over horizon steps, when `logits` carries
/// `5 · steps` channels) of `-log softmax(logits)[truth]`.
///
/// Logit channel `5k + c` is class `c` of step `k`; `truth` is step-major.
pub fn cross_entropy_heading(logits: &Tensor3, truth_classes: &[u8]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, truth_classes)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor3, truth_classes: &[u8]) -> Result<(f64, Tensor3)> {
    let steps = check_logits(logits, truth_classes)?;
    let n = logits.plane_len();
    let total = (steps * n) as f64;
    let mut grad = Tensor3::zeros(logits.channels, logits.height, logits.width);
    let mut loss = 0.0;
    for k in 0..steps {
        for p in 0..n {
            let z = |c: usize| logits.data[(k * HEADING_CLASSES + c) * n + p];
            let max = (0..HEADING_CLASSES).map(z).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..HEADING_CLASSES).map(|c| (z(c) - max).exp()).sum();
            let truth = truth_classes[k * n + p] as usize;
            loss += sum.ln() - (z(truth) - max);
            for c in 0..HEADING_CLASSES {
                let prob = (z(c) - max).exp() / sum;
                let target = if c == truth { 1.0 } else { 0.0 };
                grad.data[(k * HEADING_CLASSES + c) * n + p] = (prob - target) / total;
            }
        }
    }
    Ok((loss / total, grad))
}

/// Per-pixel softmax over each group of 5 logit channels.
pub fn softmax_classes(logits: &Tensor3) -> Result<Tensor3> {
    if logits.channels % HEADING_CLASSES != 0 {
        return Err(Error::InvalidInput(format!(
            "logit channels {} not a multiple of {HEADING_CLASSES}",
            logits.channels
        )));
    }
    let n = logits.plane_len();
    let mut out = logits.clone();
    for k in 0..logits.channels / HEADING_CLASSES {
        for p in 0..n {
            let at = |c: usize| (k * HEADING_CLASSES + c) * n + p;
            let max = (0..HEADING_CLASSES).map(|c| logits.data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..HEADING_CLASSES).map(|c| (logits.data[at(c)] - max).exp()).sum();
            for c in 0..HEADING_CLASSES {
                out.data[at(c)] = (logits.data[at(c)] - max).exp() / sum;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub heading: f64,
    pub volume: f64,
    pub speed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            heading: 1.0,
            volume: 1.0,
            speed: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.heading, self.volume, self.speed];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }

    pub fn for_subtask(&self, subtask: Subtask) -> f64 {
        match subtask {
            Subtask::Volume => self.volume,
            Subtask::Speed => self.speed,
            Subtask::Heading => self.heading,
        }
    }
}

/// Composite loss with its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub ce_heading: f64,
    pub mape_volume: f64,
    pub mape_speed: f64,
    pub volume_pixels: usize,
    pub speed_pixels: usize,
}

impl CompositeLoss {
    pub fn weighted_terms(&self, w: &LossWeights) -> [f64; 3] {
        [w.heading * self.ce_heading, w.volume * self.mape_volume, w.speed * self.mape_speed]
    }
}

/// `w_heading · CE(heading) + w_volume · MAPE(volume) + w_speed · MAPE(speed)`.
pub fn composite_loss(
    heading_logits: &Tensor3,
    heading_truth: &[u8],
    vol_pred: &Plane,
    vol_truth: &Plane,
    spd_pred: &Plane,
    spd_truth: &Plane,
    w: &LossWeights,
) -> Result<CompositeLoss> {
    w.validate()?;
    vol_pred.check_same_shape(vol_truth)?;
    spd_pred.check_same_shape(spd_truth)?;
    let ce_heading = cross_entropy_heading(heading_logits, heading_truth)?;
    let (mape_volume, volume_pixels) = mape_values(&vol_pred.data, &vol_truth.data, MAPE_MIN_TRUTH)?;
    let (mape_speed, speed_pixels) = mape_values(&spd_pred.data, &spd_truth.data, MAPE_MIN_TRUTH)?;
    Ok(CompositeLoss {
        total: w.heading * ce_heading + w.volume * mape_volume + w.speed * mape_speed,
        ce_heading,
        mape_volume,
        mape_speed,
        volume_pixels,
        speed_pixels,
    })
}

/// Per-channel metrics over a sequence of frames, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Indexed by [`Subtask::channel`].
    pub mse: [f64; 3],
    pub mae: [f64; 3],
    pub mape_volume: f64,
    pub mape_speed: f64,
    pub ce_heading: Option<f64>,
    pub composite: Option<f64>,
    pub pixels: usize,
    pub mape_pixels: [usize; 2],
}

impl LossReport {
    /// Mean of the three channel MSEs, the competition ranking score.
    pub fn leaderboard_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / 3.0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in Subtask::ALL {
            out.push_str(&format!("mse\t{s}\t{:e}\n", self.mse[s.channel()]));
        }
        out.push_str(&format!("mse\tall\t{:e}\n", self.leaderboard_mse()));
        for s in Subtask::ALL {
            out.push_str(&format!("mae\t{s}\t{:e}\n", self.mae[s.channel()]));
        }
        out.push_str(&format!("mape\tvolume\t{:e}\n", self.mape_volume));
        out.push_str(&format!("mape\tspeed\t{:e}\n", self.mape_speed));
        if let Some(ce) = self.ce_heading {
            out.push_str(&format!("ce\theading\t{ce:e}\n"));
        }
        if let Some(c) = self.composite {
            out.push_str(&format!("composite\tall\t{c:e}\n"));
        }
        out.push_str(&format!("pixels\tall\t{}\n", self.pixels));
        out.push_str(&format!("pixels\tmape_volume\t{}\n", self.mape_pixels[0]));
        out.push_str(&format!("pixels\tmape_speed\t{}\n", self.mape_pixels[1]));
        out
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn channel_values(frames: &[Frame], subtask: Subtask) -> Vec<f64> {
    frames
        .iter()
        .flat_map(|f| f.channel_bytes(subtask))
        .map(|b| f64::from(b) / 255.0)
        .collect()
}

/// Leaderboard-style report: every channel, heading included, compared as
/// `byte / 255`.
pub fn per_channel_mse_report(pred: &[Frame], truth: &[Frame]) -> Result<LossReport> {
    check_len(pred.len(), truth.len())?;
    if pred.iter().zip(truth).any(|(p, t)| p.dims() != t.dims()) {
        return Err(Error::InvalidInput("prediction and truth frames differ in dims".into()));
    }
    let mut mse = [0.0; 3];
    let mut mae = [0.0; 3];
    for s in Subtask::ALL {
        let (p, t) = (channel_values(pred, s), channel_values(truth, s));
        mse[s.channel()] = mse_values(&p, &t)?;
        mae[s.channel()] = mae_values(&p, &t)?;
    }
    let (mape_volume, nv) = mape_values(
        &channel_values(pred, Subtask::Volume),
        &channel_values(truth, Subtask::Volume),
        MAPE_MIN_TRUTH,
    )?;
    let (mape_speed, ns) = mape_values(
        &channel_values(pred, Subtask::Speed),
        &channel_values(truth, Subtask::Speed),
        MAPE_MIN_TRUTH,
    )?;
    Ok(LossReport {
        mse,
        mae,
        mape_volume,
        mape_speed,
        ce_heading: None,
        composite: None,
        pixels: pred.iter().map(|f| f.dims().pixels()).sum(),
        mape_pixels: [nv, ns],
    })
}

/// Mean predicted byte for each true heading code.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// `(true code, mean prediction or None if the group is empty, count)`
    pub rows: [(u8, Option<f64>, usize); 5],
}

impl BiasReport {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.2).sum()
    }

    pub fn mean_for(&self, code: u8) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == code).and_then(|r| r.1)
    }
}

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "I_true\tI_predict_mean\tcount")?;
        for (code, mean, count) in &self.rows {
            match mean {
                Some(m) => writeln!(f, "{code}\t{m:.2}\t{count}")?,
                None => writeln!(f, "{code}\t-\t{count}")?,
            }
        }
        Ok(())
    }
}

/// Groups predicted bytes by the true heading code at the same pixel.
pub fn heading_bias_report(pred_values: &[Vec<u8>], truth_values: &[Vec<u8>]) -> Result<BiasReport> {
    check_len(pred_values.len(), truth_values.len())?;
    let mut sums = [0u64; 5];
    let mut counts = [0usize; 5];
    for (p, t) in pred_values.iter().zip(truth_values) {
        check_len(p.len(), t.len())?;
        for (&pv, &tv) in p.iter().zip(t) {
            let c = heading_value_to_class(tv).map_err(|_| Error::InvalidInput(format!("illegal truth heading byte {tv}")))?;
            sums[c as usize] += u64::from(pv);
            counts[c as usize] += 1;
        }
    }
    let mut rows = [(0u8, None, 0usize); 5];
    for c in 0..5 {
        let mean = (counts[c] > 0).then(|| sums[c] as f64 / counts[c] as f64);
        rows[c] = (HEADING_CODES[c], mean, counts[c]);
    }
    Ok(BiasReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, v: f64) -> Plane {
        Plane::filled(h, w, v)
    }

    #[test]
    fn basic_metrics() {
        let a = plane(3, 3, 0.4);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&plane(2, 2, 0.0), &plane(2, 2, 1.0)).unwrap(), 1.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&plane(2, 2, 0.25), &plane(2, 2, 0.75)).unwrap(), 0.5);
        assert!(mse(&plane(2, 2, 0.0), &plane(2, 3, 0.0)).is_err());
        assert!(mae(&plane(2, 2, 0.0), &plane(3, 2, 0.0)).is_err());
    }

    #[test]
    fn mape_examples() {
        let t = plane(2, 2, 0.3);
        assert_eq!(mape(&t, &t, MAPE_MIN_TRUTH).unwrap(), 0.0);
        let (v, n) = mape_values(&[0.2, 0.9], &[0.0, 0.0], MAPE_MIN_TRUTH).unwrap();
        assert_eq!((v, n), (0.0, 0));
        assert_eq!(mape(&plane(1, 1, 0.5), &plane(1, 1, 0.25), MAPE_MIN_TRUTH).unwrap(), 1.0);
        // adding truth-zero pixels changes nothing
        let base = mape_values(&[0.5, 0.1], &[0.25, 0.2], MAPE_MIN_TRUTH).unwrap().0;
        let padded = mape_values(&[0.5, 0.1, 0.7, 0.0], &[0.25, 0.2, 0.0, 0.0], MAPE_MIN_TRUTH).unwrap().0;
        assert_eq!(base, padded);
    }

    #[test]
    fn ce_examples() {
        let z = Tensor3::zeros(5, 2, 3);
        let ce = cross_entropy_heading(&z, &[0, 1, 2, 3, 4, 0]).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
        let mut sat = Tensor3::zeros(5, 1, 1);
        sat.data[3] = 1e9;
        assert!(cross_entropy_heading(&sat, &[3]).unwrap() < 1e-12);
        assert!(cross_entropy_heading(&z, &[0, 1, 2, 3, 4, 5]).is_err());
        assert!(cross_entropy_heading(&Tensor3::zeros(4, 1, 1), &[0]).is_err());
    }

    #[test]
    fn ce_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor3::from_vec(5, 2, 2, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let truth = [0, 4, 2, 1];
        let base = cross_entropy_heading(&logits, &truth).unwrap();
        let mut shifted = logits.clone();
        for p in 0..4 {
            let k = rng.gen_range(-50.0..50.0);
            for c in 0..5 {
                shifted.data[c * 4 + p] += k;
            }
        }
        assert!((cross_entropy_heading(&shifted, &truth).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor3::from_vec(10, 2, 2, (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let truth = [0, 1, 2, 3, 4, 3, 2, 1];
        let (_, g) = cross_entropy_grad(&logits, &truth).unwrap();
        for i in 0..40 {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            let fd = (cross_entropy_heading(&a, &truth).unwrap() - cross_entropy_heading(&b, &truth).unwrap()) / 2e-6;
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn composite_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor3::from_vec(5, 2, 2, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let truth = [1, 2, 0, 4];
        let vp = Plane::from_vec(2, 2, vec![0.1, 0.5, 0.3, 0.9]).unwrap();
        let vt = Plane::from_vec(2, 2, vec![0.2, 0.4, 0.0, 0.7]).unwrap();
        let only_heading = LossWeights { heading: 1.0, volume: 0.0, speed: 0.0 };
        let c = composite_loss(&logits, &truth, &vp, &vt, &vp, &vt, &only_heading).unwrap();
        assert_eq!(c.total, cross_entropy_heading(&logits, &truth).unwrap());
        let perfect = composite_loss(&logits, &truth, &vt, &vt, &vt, &vt, &LossWeights::default()).unwrap();
        assert_eq!(perfect.total, perfect.ce_heading);
        let zero = LossWeights { heading: 0.0, volume: 0.0, speed: 0.0 };
        assert!(matches!(
            composite_loss(&logits, &truth, &vp, &vt, &vp, &vt, &zero),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn report_examples() {
        let dims = crate::movie_store::GridDims::new(2, 2).unwrap();
        let a = Frame::new(dims, vec![10, 20, 85, 30, 40, 1, 0, 0, 0, 50, 60, 255]).unwrap();
        let r = per_channel_mse_report(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!(r.mse, [0.0; 3]);
        assert_eq!(r.leaderboard_mse(), 0.0);
        let b = Frame::new(dims, vec![10, 20, 170, 30, 40, 85, 0, 0, 1, 50, 60, 170]).unwrap();
        let r = per_channel_mse_report(&[b], &[a]).unwrap();
        assert_eq!(r.mse[0], 0.0);
        assert_eq!(r.mse[1], 0.0);
        assert!(r.mse[2] > 0.0);
        assert!(r.to_text().contains("mse\theading\t"));
    }

    #[test]
    fn bias_examples() {
        let r = heading_bias_report(&[vec![10, 50, 150, 200]], &[vec![0, 85, 85, 255]]).unwrap();
        assert_eq!(r.mean_for(0), Some(10.0));
        assert_eq!(r.mean_for(85), Some(100.0));
        assert_eq!(r.mean_for(255), Some(200.0));
        assert_eq!(r.mean_for(1), None);
        assert_eq!(r.total(), 4);

        let truth = vec![vec![0, 1, 85, 170, 255]];
        let same = heading_bias_report(&truth, &truth).unwrap();
        for (code, mean, _) in same.rows {
            assert_eq!(mean, Some(f64::from(code)));
        }
        let zeros = heading_bias_report(&[vec![0; 5]], &truth).unwrap();
        assert!(zeros.rows.iter().all(|r| r.1 == Some(0.0)));
        assert!(heading_bias_report(&[vec![0]], &[vec![86]]).is_err());
        assert_eq!(same.to_string().lines().count(), 6);
    }
}
