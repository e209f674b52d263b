use rand::seq::index::sample;

use super::ParamSet;
use crate::error::Result;
use crate::rng;

/// Coordinates checked per parameter tensor at most.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

/// Compares analytic gradients with central finite differences.
///
/// `loss` is called with zeroed gradients; it returns the loss and accumulates
/// the analytic gradient into the parameter buffers. Only trainable parameters
/// are checked. Returns the maximum over the sampled coordinates of
/// `|g_a − g_n| / max(1, |g_a|, |g_n|)`.
pub fn grad_check<F>(params: &mut ParamSet, mut loss: F, h: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    params.zero_grad();
    loss(params)?;
    let analytic = params.clone();

    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.group.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut worst: f64 = 0.0;
    for (ti, name) in names.iter().enumerate() {
        let n = params.value(name)?.len();
        let mut r = rng::stream(seed, &[rng::domain::GRADCHECK, ti as u64]);
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(&mut r, n, MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.value(name)?.data()[i];
            params.value_mut(name)?.data_mut()[i] = orig + h;
            params.zero_grad();
            let up = loss(params)?;
            params.value_mut(name)?.data_mut()[i] = orig - h;
            params.zero_grad();
            let down = loss(params)?;
            params.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.grad(name)?.data()[i];
            let denom = 1f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    params.zero_grad();
    Ok(worst)
}
