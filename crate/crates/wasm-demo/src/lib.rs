//! Browser bindings: closed-form phase-transition curves, a small simulated
//! trajectory and the good-initialization probability.
//!
//! Each export returns a flat `Float64Array`; the layouts are documented on
//! the plain Rust functions, which are also what the native tests call.

use plflow::data::{self, DataKind};
use plflow::experiment::sweeps;
use plflow::flow::{self, FlowConfig};
use plflow::init::{self, InitMode};
use plflow::oracle::{ClosedFormVariant, TimeScale};
use wasm_bindgen::prelude::*;

/// Normalized loss of two groups (`|y| = 1` and `|y| = 2`) in rescaled time
/// for `n = 2^log2_n`, on `points` times in `[0, t_max]`. Layout: the
/// `points` times, then each group's `points` losses.
pub fn phase_curve_values(log2_n: u32, t_max: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(2..=40).contains(&log2_n) {
        return Err(format!("log2 n = {log2_n} outside [2, 40]"));
    }
    if points < 2 || !(t_max > 0.0) {
        return Err("need at least two points on a positive range".into());
    }
    let grid: Vec<f64> = (0..points).map(|k| t_max * k as f64 / (points - 1) as f64).collect();
    let curves = sweeps::closed_form_curves(
        1 << log2_n,
        &[1.0, 2.0],
        TimeScale::LogNP,
        ClosedFormVariant::Exact,
        &grid,
    )
    .map_err(|e| e.to_string())?;
    Ok(grid.into_iter().chain(curves.into_iter().flatten()).collect())
}

/// Euler flow on `n` orthonormal points in dimension `d` with the
/// recommended width, to the default horizon. Layout: `(t, loss, μ)`
/// triples, `μ` NaN where the curvature is not sampled.
pub fn trajectory_values(n: usize, d: usize, step: f64, seed: u64) -> Result<Vec<f64>, String> {
    if n == 0 || n > d || d > 512 {
        return Err(format!("need 1 <= n <= d <= 512, got n = {n}, d = {d}"));
    }
    let e = |e: plflow::Error| e.to_string();
    let p = init::recommended_p(n, 0.05).map_err(e)?;
    let data = data::generate(&DataKind::Orthonormal, d, n, seed).map_err(e)?;
    let net = init::init_standard(p, d, InitMode::Asymmetric, seed).map_err(e)?;
    let horizon = flow::default_horizon(n, p);
    let steps = (horizon / step).ceil() as usize;
    let cfg = FlowConfig::new(step, horizon)
        .record_every(steps.div_ceil(400).max(1))
        .with_pl();
    let rec = flow::integrate(&net, &data, &cfg).map_err(e)?;
    let mut out = Vec::with_capacity(3 * rec.len());
    for (k, (&t, &l)) in rec.times.iter().zip(&rec.losses).enumerate() {
        let mu = rec.pl.get(k).copied().flatten().map_or(f64::NAN, |s| s.mu_exact);
        out.extend([t, l, mu]);
    }
    Ok(out)
}

/// Monte-Carlo probability that every datum has a correctly activated
/// neuron at initialization. Layout: estimate, standard error, lower bound.
pub fn init_probability_values(n: usize, p: usize, trials: usize, seed: u64) -> Result<Vec<f64>, String> {
    if trials == 0 || trials > 200_000 {
        return Err(format!("trials = {trials} outside [1, 200000]"));
    }
    let est = init::estimate_good_init_prob(n, n, p, trials, seed).map_err(|e| e.to_string())?;
    Ok(vec![est.estimate, est.std_error, init::good_init_lower_bound(n, p)])
}

#[wasm_bindgen]
pub fn phase_curves(log2_n: u32, t_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    phase_curve_values(log2_n, t_max, points).map_err(|m| JsError::new(&m))
}

#[wasm_bindgen]
pub fn simulate(n: usize, d: usize, step: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    trajectory_values(n, d, step, seed).map_err(|m| JsError::new(&m))
}

#[wasm_bindgen]
pub fn init_probability(n: usize, p: usize, trials: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    init_probability_values(n, p, trials, seed).map_err(|m| JsError::new(&m))
}
