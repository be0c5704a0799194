//! Finite-difference verification of the hand-written backward pass in
//! 64-bit arithmetic.

use std::collections::BTreeMap;

use rand::Rng;

use super::embed::VisualSource;
use super::params::{Family, Params};
use super::train::{example_objective, TrainExample};
use crate::error::Result;
use crate::rng::stream_rng;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates where both gradients are smaller than this are not compared.
pub const SKIP_BELOW: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Worst relative error and number of compared coordinates per family.
    pub per_family: BTreeMap<Family, (f64, usize)>,
}

/// A probe set: examples and the visual source each one is evaluated with.
pub type Probe = [(TrainExample, VisualSource)];

/// Mean cell loss over the probe.
pub fn probe_loss(params: &Params<f64>, probe: &Probe) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for (ex, src) in probe {
        let lv = example_objective(params, ex, *src, None)?;
        sum += lv.sum;
        count += lv.count;
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

pub fn probe_gradient(params: &Params<f64>, probe: &Probe) -> Result<Vec<f64>> {
    let total: usize = probe.iter().map(|(e, _)| e.target_count()).sum();
    let mut grads = params.zeros_like();
    if total == 0 {
        return Ok(grads);
    }
    let scale = 1.0 / total as f64;
    for (ex, src) in probe {
        example_objective(params, ex, *src, Some((&mut grads, scale)))?;
    }
    Ok(grads)
}

/// Picks `n_coords` coordinates spread round-robin over every family.
/// Within a family, coordinates with a clearly nonzero analytic gradient are
/// preferred so the comparison is not dominated by round-off.
pub fn select_coordinates(params: &Params<f64>, analytic: &[f64], n_coords: usize, seed: u64) -> Vec<(Family, usize)> {
    let mut rng = stream_rng(seed, 23);
    let mut pools: Vec<(Family, Vec<usize>)> = Vec::new();
    for fam in Family::ALL {
        let all: Vec<usize> = params
            .layout
            .tensors
            .iter()
            .filter(|t| t.family == fam)
            .flat_map(|t| t.span.range())
            .collect();
        if all.is_empty() {
            continue;
        }
        let strong: Vec<usize> = all.iter().copied().filter(|&i| analytic[i].abs() > 1e-6).collect();
        let weak: Vec<usize> = all.iter().copied().filter(|&i| analytic[i].abs() > SKIP_BELOW).collect();
        let pool = if !strong.is_empty() {
            strong
        } else if !weak.is_empty() {
            weak
        } else {
            all
        };
        pools.push((fam, pool));
    }
    (0..n_coords)
        .map(|i| {
            let (fam, pool) = &pools[i % pools.len()];
            (*fam, pool[rng.random_range(0..pool.len())])
        })
        .collect()
}

/// Compares `analytic` against central differences of [`probe_loss`].
pub fn compare_gradients(
    params: &Params<f64>,
    probe: &Probe,
    analytic: &[f64],
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let coords = select_coordinates(params, analytic, n_coords, seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        per_family: BTreeMap::new(),
    };
    for (fam, i) in coords {
        let orig = work.data[i];
        work.data[i] = orig + FD_STEP;
        let up = probe_loss(&work, probe)?;
        work.data[i] = orig - FD_STEP;
        let down = probe_loss(&work, probe)?;
        work.data[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < SKIP_BELOW {
            report.skipped += 1;
            continue;
        }
        let rel = (a - numeric).abs() / scale;
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        let e = report.per_family.entry(fam).or_insert((0.0, 0));
        e.0 = e.0.max(rel);
        e.1 += 1;
    }
    Ok(report)
}

/// Converts `params` to 64-bit and checks `n_coords` coordinates.
pub fn grad_check(params: &Params<f32>, probe: &Probe, n_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let p64: Params<f64> = params.convert();
    let analytic = probe_gradient(&p64, probe)?;
    compare_gradients(&p64, probe, &analytic, n_coords, seed)
}
