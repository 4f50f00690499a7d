use rand::Rng;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param, index, analytic, numeric)` for every checked coordinate.
    pub checked: Vec<(ParamId, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Worst error restricted to parameters whose name passes `filter`.
    pub fn max_error_where(&self, params: &ParamStore, filter: impl Fn(&str) -> bool) -> f64 {
        self.checked
            .iter()
            .filter(|(id, ..)| filter(params.name(*id)))
            .map(|&(_, _, a, n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Draws `per_tensor` coordinates (with replacement) from every tensor that
/// passes `filter`.
pub fn sample_coords<R: Rng>(
    params: &ParamStore,
    per_tensor: usize,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (id, name, t) in params.iter() {
        if !filter(name) {
            continue;
        }
        for _ in 0..per_tensor {
            out.push((id, rng.random_range(0..t.len())));
        }
    }
    out
}

/// Compares `analytic` against central differences of `f` at the given
/// coordinates and returns the worst `|a − n| / max(1, |a|)`.
///
/// `f` is evaluated twice at the unperturbed point first; any difference
/// between the two evaluations invalidates the check.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    mut f: F,
    analytic: &Gradients,
    coords: &[(ParamId, usize)],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        bail!(Config, "finite-difference epsilon {} outside [1e-7, 1e-4]", epsilon);
    }
    let a = f(params)?;
    let b = f(params)?;
    if a.to_bits() != b.to_bits() {
        bail!(Contract, "function is not deterministic ({} vs {}); check invalid", a, b);
    }
    let mut checked = Vec::with_capacity(coords.len());
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        if i >= params.get(id).len() {
            bail!(Contract, "coordinate {} out of range for {}", i, params.name(id));
        }
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + epsilon;
        let plus = f(params);
        params.get_mut(id).data_mut()[i] = orig - epsilon;
        let minus = f(params);
        params.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let an = analytic.get(id).map_or(0.0, |g| g[i]);
        worst = worst.max(rel_error(an, numeric));
        checked.push((id, i, an, numeric));
    }
    Ok(GradCheckReport { max_rel_error: worst, checked })
}
