use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{objective, Targets, Weights};
use crate::error::Result;
use crate::model::{Model, Params, RayBatch, SourceSet};

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `count` scalar coordinates drawn uniformly over all parameters.
pub fn pick_coordinates(params: &Params, count: usize, seed: u64) -> Vec<(String, usize)> {
    let sizes: Vec<(String, usize)> = params.iter().map(|(k, t)| (k.clone(), t.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for (name, n) in &sizes {
                if k < *n {
                    return (name.clone(), k);
                }
                k -= n;
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares `analytic` against central differences of `loss` at each
/// coordinate with step `h`.
pub fn finite_difference_check(
    params: &Params,
    analytic: &Params,
    coords: &[(String, usize)],
    h: f64,
    tolerance: f64,
    mut loss: impl FnMut(&Params) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut entries = Vec::with_capacity(coords.len());
    let mut work = params.clone();
    for (name, idx) in coords {
        let orig = params
            .get(name)
            .expect("coordinate names come from params")
            .data()[*idx];
        work.get_mut(name).unwrap().data_mut()[*idx] = orig + h;
        let up = loss(&work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig - h;
        let down = loss(&work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |t| t.data()[*idx]);
        entries.push(GradEntry {
            name: name.clone(),
            index: *idx,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        entries,
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// Checks the full model objective on one batch at `n_params` random
/// coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model,
    sources: &SourceSet,
    batch: &RayBatch,
    targets: &Targets,
    weights: Weights,
    n_params: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = objective(model, sources, batch, targets, weights, true)?;
    let analytic = grads.expect("gradients requested");
    let coords = pick_coordinates(&model.params, n_params, seed);
    let mut probe = model.clone();
    finite_difference_check(&model.params, &analytic, &coords, h, tolerance, |p| {
        probe.params = p.clone();
        Ok(objective(&probe, sources, batch, targets, weights, false)?
            .0
            .total)
    })
}
