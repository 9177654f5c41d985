use rand::Rng as _;

use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

pub const DEFAULT_EPS: f64 = 1e-4;

/// `|analytic − numeric| / max(|numeric|, floor)`. The floor keeps near-zero
/// derivatives from inflating the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-3)
}

/// Picks `count` (parameter, element) coordinates, spread over all parameters.
pub fn sample_coords(params: &ParamStore, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let total = params.numel();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        for (i, t) in params.tensors().iter().enumerate() {
            if flat < t.len() {
                out.push((i, flat));
                break;
            }
            flat -= t.len();
        }
    }
    out
}

/// Compares `analytic` with central differences of `f` at `coords` and
/// returns the largest relative error.
pub fn grad_check<F>(
    mut f: F,
    params: &mut ParamStore,
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = params.get(i).data[j];
        params.get_mut(i).data[j] = orig + eps;
        let plus = f(params)?;
        params.get_mut(i).data[j] = orig - eps;
        let minus = f(params)?;
        params.get_mut(i).data[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    Ok(worst)
}
