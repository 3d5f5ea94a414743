use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

use super::{MaskPlane, Network, OutputLoss};

/// Minimum number of parameters compared (all of them when fewer exist).
pub const MIN_CHECKED_PARAMS: usize = 200;

/// Worst relative error `|a − n| / max(|a|, |n|, 1e-12)` between analytic
/// gradients and central differences with step `eps`, over a seeded
/// subsample of at least [`MIN_CHECKED_PARAMS`] parameters.
pub fn grad_check<N: Network + Clone>(
    model: &N,
    stack: &Tensor3,
    mask: &MaskPlane,
    loss: &OutputLoss,
    eps: f64,
) -> Result<f64> {
    grad_check_sampled(model, stack, mask, loss, eps, MIN_CHECKED_PARAMS, 0)
}

pub fn grad_check_sampled<N: Network + Clone>(
    model: &N,
    stack: &Tensor3,
    mask: &MaskPlane,
    loss: &OutputLoss,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = model.clone();
    let out = work.forward(stack, mask)?;
    let (_, g_out) = loss.loss_and_grad(&out)?;
    let analytic = work.backward(&g_out)?;

    let locations: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.data.len()).map(move |i| (t, i)))
        .collect();
    let chosen: Vec<usize> = if locations.len() <= samples.max(MIN_CHECKED_PARAMS) {
        (0..locations.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, locations.len(), samples.max(MIN_CHECKED_PARAMS)).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in chosen {
        let (t, i) = locations[k];
        let original = probe.params()[t].data[i];
        let (up, down) = (original + eps, original - eps);
        probe.params_mut()[t].data[i] = up;
        let plus = loss.terms(&probe.predict(stack, mask)?)?;
        probe.params_mut()[t].data[i] = down;
        let minus = loss.terms(&probe.predict(stack, mask)?)?;
        probe.params_mut()[t].data[i] = original;
        // difference element-wise, and divide by the step actually taken
        let delta: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
        let numeric = delta / (up - down);
        let a = analytic.tensors[t][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
