use crate::error::{Error, Result};

use super::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Sgd,
    Adam,
}

/// Learning rate plus, for Adam, per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rule: UpdateRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self::new(UpdateRule::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(UpdateRule::Adam, lr)
    }

    pub fn new(rule: UpdateRule, lr: f64) -> Self {
        OptimizerState {
            rule,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Applies one update in place. Non-finite gradients leave the model
/// untouched and return a numeric error.
pub fn apply_update<N: Network + ?Sized>(model: &mut N, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    let params = model.params_mut();
    if grads.tensors.len() != params.len()
        || grads.tensors.iter().zip(params.iter()).any(|(g, p)| g.len() != p.data.len())
    {
        return Err(Error::InvalidInput("gradient shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    opt.step += 1;
    match opt.rule {
        UpdateRule::Sgd => {
            for (p, g) in params.iter_mut().zip(&grads.tensors) {
                for (w, d) in p.data.iter_mut().zip(g) {
                    *w -= opt.lr * d;
                }
            }
        }
        UpdateRule::Adam => {
            if opt.m.len() != params.len() {
                opt.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
                opt.v = opt.m.clone();
            }
            let t = opt.step as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
                let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
                for j in 0..g.len() {
                    m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
                    v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    p.data[j] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                }
            }
        }
    }
    Ok(())
}
