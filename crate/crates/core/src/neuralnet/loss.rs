use crate::error::{Error, Result};
use crate::losses_metrics::{cross_entropy_grad, mape_grad, mse_grad, LossWeights, MAPE_MIN_TRUTH};
use crate::movie_store::{heading_value_to_class, Subtask, HEADING_CLASSES};
use crate::tensor::Tensor3;

/// A scalar loss on a network output, with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputLoss {
    /// Mean squared error against targets in output layout.
    Mse(Vec<f64>),
    /// MAPE against targets in output layout.
    Mape(Vec<f64>),
    /// Cross-entropy against step-major class indices.
    CrossEntropy(Vec<u8>),
    Scaled(f64, Box<OutputLoss>),
}

impl OutputLoss {
    /// One model's term of the composite loss: weighted cross-entropy for
    /// heading, weighted MAPE for volume and speed. `target` holds the
    /// raw truth bytes, step-major.
    pub fn composite_share(subtask: Subtask, weights: &LossWeights, target: &[u8]) -> Result<Self> {
        weights.validate()?;
        let inner = match subtask {
            Subtask::Heading => OutputLoss::CrossEntropy(
                target
                    .iter()
                    .map(|&b| heading_value_to_class(b))
                    .collect::<Result<_>>()?,
            ),
            _ => OutputLoss::Mape(target.iter().map(|&b| f64::from(b) / 255.0).collect()),
        };
        Ok(OutputLoss::Scaled(weights.for_subtask(subtask), Box::new(inner)))
    }

    /// Competition-style MSE on `byte / 255`, heading codes included.
    pub fn leaderboard_mse(target: &[u8]) -> Self {
        OutputLoss::Mse(target.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn value(&self, out: &Tensor3) -> Result<f64> {
        Ok(self.loss_and_grad(out)?.0)
    }

    /// Per-element contributions whose plain sum is [`OutputLoss::value`]
    /// up to rounding. Differencing these element-wise loses far less
    /// precision than differencing two rounded totals.
    pub fn terms(&self, out: &Tensor3) -> Result<Vec<f64>> {
        let check = |n: usize| {
            if n == out.data.len() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("target has {n} values, output has {}", out.data.len())))
            }
        };
        match self {
            OutputLoss::Mse(t) => {
                check(t.len())?;
                let n = t.len().max(1) as f64;
                Ok(out.data.iter().zip(t).map(|(p, t)| (p - t) * (p - t) / n).collect())
            }
            OutputLoss::Mape(t) => {
                check(t.len())?;
                let n = t.iter().filter(|&&t| t >= MAPE_MIN_TRUTH).count().max(1) as f64;
                Ok(out
                    .data
                    .iter()
                    .zip(t)
                    .map(|(p, t)| if *t >= MAPE_MIN_TRUTH { (p - t).abs() / t / n } else { 0.0 })
                    .collect())
            }
            OutputLoss::CrossEntropy(classes) => {
                cross_entropy_grad(out, classes)?;
                let n = out.plane_len();
                let total = classes.len().max(1) as f64;
                Ok(classes
                    .iter()
                    .enumerate()
                    .map(|(i, &truth)| {
                        let (k, p) = (i / n, i % n);
                        let z = |c: usize| out.data[(k * HEADING_CLASSES + c) * n + p];
                        let max = (0..HEADING_CLASSES).map(z).fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = (0..HEADING_CLASSES).map(|c| (z(c) - max).exp()).sum();
                        (sum.ln() - (z(truth as usize) - max)) / total
                    })
                    .collect())
            }
            OutputLoss::Scaled(w, inner) => Ok(inner.terms(out)?.into_iter().map(|v| w * v).collect()),
        }
    }

    pub fn loss_and_grad(&self, out: &Tensor3) -> Result<(f64, Tensor3)> {
        let wrap = |grad: Vec<f64>| Tensor3::from_vec(out.channels, out.height, out.width, grad);
        match self {
            OutputLoss::Mse(t) => {
                let (l, g) = mse_grad(&out.data, t)?;
                Ok((l, wrap(g)?))
            }
            OutputLoss::Mape(t) => {
                let (l, g) = mape_grad(&out.data, t, MAPE_MIN_TRUTH)?;
                Ok((l, wrap(g)?))
            }
            OutputLoss::CrossEntropy(classes) => cross_entropy_grad(out, classes),
            OutputLoss::Scaled(w, inner) => {
                if !w.is_finite() {
                    return Err(Error::InvalidConfig(format!("loss scale {w}")));
                }
                let (l, mut g) = inner.loss_and_grad(out)?;
                for v in &mut g.data {
                    *v *= w;
                }
                Ok((w * l, g))
            }
        }
    }
}
