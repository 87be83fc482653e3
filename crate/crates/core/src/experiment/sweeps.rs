//! Experiment runners. Each returns a [`Report`]; trials run through
//! [`parallel::map_trials`] with seeds derived from `(master seed, point,
//! trial)`, so outputs do not depend on the worker count.

use std::path::Path;

use log::info;

use super::config::{Experiment, ExperimentConfig, StopRule};
use super::emit::{Cell, PlotSpec, Report, Table};
use super::fit::{self, SigmoidFit};
use crate::data::{self, DataKind, GroupMagnitudes, GroupSpec};
use crate::flow::{self, FlowConfig, StopReason, TrajectoryRecord};
use crate::init::{self, InitMode, ProbabilityEstimate};
use crate::model::{DataSet, NetworkState};
use crate::oracle::{self, ClosedFormVariant, GroupClosedForm, TimeScale};
use crate::{parallel, plmetrics, seed, Error, Result};

/// Largest tolerated loss increase over one step, relative to the initial
/// loss, before a trajectory is flagged.
pub const AUDIT_LOSS_INCREASE: f64 = 1e-9;

/// Largest step at which a loss increase is an audit failure. Coarser steps
/// overshoot by design; their increases are logged and counted instead.
pub const STRICT_AUDIT_STEP: f64 = 0.1;

/// Runs the experiment named in the config.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::Simulate => simulate(cfg),
        Experiment::ConvergenceSweep => run_convergence_sweep(cfg),
        Experiment::ThresholdScaling => run_threshold_scaling(cfg),
        Experiment::CurvatureSweep => run_curvature_sweep(cfg),
        Experiment::PhaseTransition => run_phase_transition(cfg),
        Experiment::CheckAssumptions => run_check_assumptions(cfg),
        Experiment::Counterexample => run_counterexample(cfg),
        Experiment::InitProbability => run_init_probability(cfg),
    }
}

fn trial_seed(master: u64, point: u64, trial: usize) -> u64 {
    seed::derive(seed::derive(master, point), trial as u64)
}

/// Whether some step raised the loss by more than [`AUDIT_LOSS_INCREASE`].
pub fn loss_rose(rec: &TrajectoryRecord) -> bool {
    rec.audit.max_loss_increase > AUDIT_LOSS_INCREASE
}

/// Audit findings for one trajectory integrated at `step`: a loss increase
/// beyond [`AUDIT_LOSS_INCREASE`] when `step <= STRICT_AUDIT_STEP`, or a
/// second-layer sign change in a run started with every `|a_j| > ‖w_j‖`.
pub fn audit_issue(rec: &TrajectoryRecord, label: &str, step: f64) -> Option<String> {
    let mut found = Vec::new();
    if loss_rose(rec) && step > STRICT_AUDIT_STEP {
        log::debug!(
            "{label}: loss rose by {:.3e} of its initial value at step {step}",
            rec.audit.max_loss_increase
        );
    } else if loss_rose(rec) {
        found.push(format!(
            "loss rose by {:.3e} of its initial value in one step",
            rec.audit.max_loss_increase
        ));
    }
    let balanced = rec.initial.balance().iter().all(|&b| b > 0.0);
    if balanced && rec.audit.sign_changes > 0 {
        found.push(format!("{} second-layer weights changed sign", rec.audit.sign_changes));
    }
    (!found.is_empty()).then(|| format!("{label}: {}", found.join("; ")))
}

fn stop_level(rule: StopRule, data: &DataSet) -> Option<f64> {
    match rule {
        StopRule::Linear => Some(flow::interpolation_threshold(data)),
        StopRule::Squared => Some(flow::interpolation_threshold_squared(data)),
        StopRule::None => None,
    }
}

fn width_for(cfg: &ExperimentConfig, n: usize) -> Result<usize> {
    match cfg.p {
        Some(p) => Ok(p),
        None => init::recommended_p(n, cfg.epsilon),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trajectory columns shared with [`flow::write_trajectory`].
pub fn trajectory_table(rec: &TrajectoryRecord) -> Table {
    let mut t = Table::new(&[
        "time",
        "loss",
        "mu_discrete",
        "mu_exact",
        "mu_lower",
        "mu_upper",
        "min_active_per_datum",
        "max_conservation_drift",
    ]);
    for k in 0..rec.len() {
        let pl = rec.pl.get(k).and_then(|s| s.as_ref());
        t.push(vec![
            rec.times[k].into(),
            rec.losses[k].into(),
            rec.mu_discrete[k].into(),
            pl.map(|s| s.mu_exact).into(),
            pl.map(|s| s.mu_lower).into(),
            pl.map(|s| s.mu_upper).into(),
            rec.min_active[k].into(),
            rec.max_drift[k].into(),
        ]);
    }
    t
}

fn flow_summary(report: &mut Report, rec: &TrajectoryRecord) {
    report.set("stop_reason", rec.stop_reason.label());
    report.set("steps", rec.steps);
    report.set("final_time", rec.final_time());
    report.set("initial_loss", rec.initial_loss());
    report.set("final_loss", rec.final_loss());
    report.set("conservation_drift", rec.conservation_drift);
    report.set("max_loss_increase", rec.audit.max_loss_increase);
    report.set("loss_increases", rec.audit.loss_increases);
    report.set("sign_changes", rec.audit.sign_changes);
    report.set("gate_flips", rec.audit.gate_flips);
}

/// Group layout for grouped data: from `alpha` if set, otherwise
/// `groups` equal groups, with constant magnitudes when one is given per
/// group and uniform ones otherwise.
pub fn group_spec(cfg: &ExperimentConfig, n: usize) -> Result<GroupSpec> {
    let spec = match cfg.alpha {
        Some(alpha) => GroupSpec::from_alpha(n, alpha)?,
        None => {
            if n % cfg.groups != 0 {
                return Err(Error::config(format!("{} groups do not divide n = {n}", cfg.groups)));
            }
            GroupSpec::alternating(cfg.groups, n / cfg.groups)?
        }
    };
    if cfg.magnitudes.len() == spec.p_n {
        spec.with_magnitudes(GroupMagnitudes::Constant(cfg.magnitudes.clone()))
    } else {
        Ok(spec)
    }
}

fn data_kind(cfg: &ExperimentConfig, n: usize, default: &str) -> Result<DataKind> {
    match cfg.kind.as_deref().unwrap_or(default) {
        "grouped" => Ok(DataKind::Grouped(group_spec(cfg, n)?)),
        other => DataKind::parse(other),
    }
}

/// One trajectory. Defaults: whitened-sphere data, `d = n = 64`, the
/// recommended width, asymmetric initialization (group initialization on
/// grouped data), Euler with step 0.1 up to the default horizon, no early
/// stop. Grouped data add an `oracle` table comparing the run with the
/// closed forms.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Report> {
    let (data, spec) = match &cfg.data {
        Some(path) => (data::load_dataset(path)?, None),
        None => {
            let n = cfg.n.unwrap_or(64);
            let d = cfg.d.unwrap_or(n);
            let kind = data_kind(cfg, n, "whitened-sphere")?;
            let spec = match &kind {
                DataKind::Grouped(s) => Some(s.clone()),
                _ => None,
            };
            (data::generate(&kind, d, n, cfg.seed)?, spec)
        }
    };
    let net = match (&cfg.state, &spec) {
        (Some(path), _) => init::load_state(path)?,
        (None, Some(spec)) => init::init_group(&data, spec, cfg.seed)?,
        (None, None) => {
            let p = width_for(cfg, data.n())?;
            init::init_standard(p, data.d(), cfg.init.unwrap_or(InitMode::Asymmetric), cfg.seed)?
        }
    };
    if net.d() != data.d() {
        return Err(Error::config(format!("state has d = {}, data has d = {}", net.d(), data.d())));
    }
    let step = cfg.step.unwrap_or(0.1);
    let horizon = cfg.horizon.unwrap_or_else(|| flow::default_horizon(data.n(), net.p()));
    let mut fc = FlowConfig::new(step, horizon).integrator(cfg.integrator).with_pl();
    if let Some(level) = stop_level(cfg.stop.unwrap_or(StopRule::None), &data) {
        fc = fc.stop_below(level);
    }
    let rec = flow::integrate(&net, &data, &fc)?;
    let mut report = Report::new(Experiment::Simulate.label(), trajectory_table(&rec));
    report.set("kind", data.kind.as_str());
    report.set("d", data.d());
    report.set("n", data.n());
    report.set("p", net.p());
    report.set("seed", cfg.seed);
    report.set("integrator", cfg.integrator.label());
    report.set("step", step);
    report.set("horizon", horizon);
    report.set("good_init", init::good_init_event(&net, &data)?);
    report.set("low_correlation", data::check_low_correlation(&data).holds);
    flow_summary(&mut report, &rec);
    report.audit_failures.extend(audit_issue(&rec, "trajectory", step));
    if let Some(spec) = &spec {
        let horizon = rec.final_time();
        let checkpoints: Vec<f64> = (1..=20).map(|k| horizon * k as f64 / 20.0).collect();
        let cmp = oracle_comparison(&data, spec, &net, step, cfg.integrator, &checkpoints)?;
        report.set("oracle_max_rel_error", cmp.max_rel_error);
        report.extras.push(("oracle".into(), cmp.table));
    }
    report.plot = Some(PlotSpec {
        table: None,
        x: "time".into(),
        ys: vec!["loss".into()],
        log_axes: false,
    });
    Ok(report)
}

/// Simulated group quantities against their closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    /// Columns: time, group, quantity, oracle, simulated, rel_error.
    pub table: Table,
    pub max_rel_error: f64,
}

/// Integrates from `net0` through the (increasing) `checkpoints`, landing
/// exactly on each, and compares alignment, active norm and group loss with
/// the exact closed forms.
pub fn oracle_comparison(
    data: &DataSet,
    spec: &GroupSpec,
    net0: &NetworkState,
    step: f64,
    integrator: flow::Integrator,
    checkpoints: &[f64],
) -> Result<OracleComparison> {
    let forms: Vec<GroupClosedForm> = (0..spec.p_n)
        .map(|j| GroupClosedForm::from_state(data, spec, net0, j))
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["time", "group", "quantity", "oracle", "simulated", "rel_error"]);
    let mut worst = 0.0f64;
    let mut net = net0.clone();
    let mut t = 0.0;
    for &tc in checkpoints {
        if tc < t {
            return Err(Error::config("checkpoints must be increasing"));
        }
        if tc > t {
            let fc = FlowConfig::new(step, tc - t).integrator(integrator).record_every(usize::MAX);
            let rec = flow::integrate(&net, data, &fc)?;
            if rec.stop_reason == StopReason::Diverged {
                return Err(Error::Diverged(format!("flow diverged before t = {tc}")));
            }
            net = rec.last;
            t = tc;
        }
        for (j, form) in forms.iter().enumerate() {
            let m = oracle::measure_group(data, spec, &net, j)?;
            let o = form.state_at(tc);
            for (name, ov, sv) in [
                ("alignment", o.alignment, m.state.alignment),
                ("norm", o.norm, m.state.norm),
                ("loss", o.loss, m.state.loss),
            ] {
                let rel = (sv - ov).abs() / ov.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                table.push(vec![tc.into(), j.into(), name.into(), ov.into(), sv.into(), rel.into()]);
            }
        }
    }
    Ok(OracleComparison {
        table,
        max_rel_error: worst,
    })
}

/// Aggregate of the trials at one size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePoint {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub converged: usize,
    pub diverged: usize,
    pub estimate: ProbabilityEstimate,
    /// Mean `L(t_end)/L(0)` over non-diverged trials.
    pub mean_normalized_loss: Option<f64>,
    /// Trials in which some step raised the loss.
    pub loss_increase_runs: usize,
    pub audit_issues: Vec<String>,
}

/// Flow settings shared by the convergence trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSettings {
    pub step: f64,
    pub integrator: flow::Integrator,
    pub stop: StopRule,
    pub horizon: Option<f64>,
}

/// `trials` independent (data, initialization, trajectory) runs at size
/// `n`; a run converges when its loss crosses the stopping level before
/// the horizon. Divergence counts as non-convergence.
pub fn convergence_point(
    kind: &DataKind,
    d: usize,
    n: usize,
    p: usize,
    trials: usize,
    settings: ConvergenceSettings,
    point_seed: u64,
) -> Result<ConvergencePoint> {
    let outcomes = parallel::map_trials(trials, |t| -> Result<(bool, bool, f64, bool, Option<String>)> {
        let s = seed::derive(point_seed, t as u64);
        let data = data::generate(kind, d, n, s)?;
        let net = init::init_standard(p, d, InitMode::Asymmetric, s)?;
        let horizon = settings.horizon.unwrap_or_else(|| flow::default_horizon(n, p));
        let mut fc = FlowConfig::new(settings.step, horizon)
            .integrator(settings.integrator)
            .record_every(usize::MAX);
        if let Some(level) = stop_level(settings.stop, &data) {
            fc = fc.stop_below(level);
        }
        let rec = flow::integrate(&net, &data, &fc)?;
        let converged = match settings.stop {
            StopRule::None => rec.final_loss() < flow::interpolation_threshold(&data),
            _ => rec.stop_reason == StopReason::Interpolated,
        };
        let diverged = rec.stop_reason == StopReason::Diverged;
        let issue = audit_issue(&rec, &format!("n={n} trial {t}"), settings.step);
        Ok((converged, diverged, rec.final_loss() / rec.initial_loss(), loss_rose(&rec), issue))
    });
    let (mut conv, mut div, mut rose, mut losses, mut issues) = (0, 0, 0, Vec::new(), Vec::new());
    for o in outcomes {
        let (c, dv, l, r, issue) = o?;
        conv += usize::from(c);
        div += usize::from(dv);
        rose += usize::from(r);
        if !dv {
            losses.push(l);
        }
        issues.extend(issue);
    }
    Ok(ConvergencePoint {
        n,
        d,
        p,
        converged: conv,
        diverged: div,
        estimate: ProbabilityEstimate::from_counts(conv, trials),
        mean_normalized_loss: mean(&losses),
        loss_increase_runs: rose,
        audit_issues: issues,
    })
}

/// One warning per sweep when the step overshoots; the per-trial detail is
/// logged at debug level.
fn warn_overshoot(runs: usize, step: f64) {
    if runs > 0 {
        log::warn!(
            "loss increased during {runs} runs at step {step}; the outcome reflects the discretization as well \
             as the flow, a smaller --step removes the overshoot"
        );
    }
}

fn convergence_settings(cfg: &ExperimentConfig) -> ConvergenceSettings {
    ConvergenceSettings {
        step: cfg.step.unwrap_or(1.0),
        integrator: cfg.integrator,
        stop: cfg.stop.unwrap_or(StopRule::Linear),
        horizon: cfg.horizon,
    }
}

/// Finds a size where the convergence probability crosses `level`, by
/// doubling then geometric bisection with `trials` runs per probe.
fn locate_crossing(
    cfg: &ExperimentConfig,
    d: usize,
    level: f64,
    start: usize,
    trials: usize,
    probe_base: u64,
) -> Result<usize> {
    let settings = convergence_settings(cfg);
    let mut probe = 0u64;
    let mut prob = |n: usize| -> Result<f64> {
        probe += 1;
        let p = width_for(cfg, n)?;
        let pt = convergence_point(
            &DataKind::WhitenedSphere,
            d,
            n,
            p,
            trials,
            settings,
            seed::derive(cfg.seed, probe_base + probe),
        )?;
        info!("locate: n={n} p={p} probability={:.3}", pt.estimate.estimate);
        Ok(pt.estimate.estimate)
    };
    let (mut lo, mut hi) = (None::<usize>, None::<usize>);
    let mut n = start.max(2);
    for _ in 0..24 {
        if prob(n)? > level {
            lo = Some(n);
            if hi.is_some() {
                break;
            }
            n *= 2;
        } else {
            hi = Some(n);
            if lo.is_some() || n <= 2 {
                break;
            }
            n /= 2;
        }
    }
    let (mut lo, mut hi) = match (lo, hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        (Some(lo), None) => return Ok(lo),
        (None, Some(hi)) => return Ok(hi),
        (None, None) => unreachable!("at least one probe ran"),
    };
    while hi > lo + 1 && (hi - lo) * 25 > lo {
        let mid = ((lo as f64) * (hi as f64)).sqrt().round() as usize;
        let mid = mid.clamp(lo + 1, hi - 1);
        if prob(mid)? > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(((lo as f64) * (hi as f64)).sqrt().round() as usize)
}

/// Sizes bracketing the transition: from 0.95 times the 0.9-crossing to
/// 1.05 times the 0.1-crossing, in ten steps.
pub fn auto_range(cfg: &ExperimentConfig, d: usize) -> Result<Vec<usize>> {
    let coarse = 8;
    let upper = locate_crossing(cfg, d, 0.1, d, coarse, 1 << 40)?;
    let lower = locate_crossing(cfg, d, 0.9, upper, coarse, 2 << 40)?.min(upper);
    let lo = ((lower as f64) * 0.95).floor().max(2.0);
    let hi = ((upper as f64) * 1.05).ceil().max(lo + 9.0);
    let mut ns: Vec<usize> = (0..10)
        .map(|k| (lo + (hi - lo) * k as f64 / 9.0).round() as usize)
        .collect();
    ns.dedup();
    Ok(ns)
}

/// Outcome of a convergence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSweep {
    pub points: Vec<ConvergencePoint>,
    pub fit: std::result::Result<SigmoidFit, String>,
    pub spearman: Option<f64>,
}

/// Probability of reaching the stopping level against `n`. Defaults:
/// whitened-sphere data, `d = 30`, 25 trials per point, recommended width
/// for each `n`, Euler step 1, stop at `C_y⁻/(2n)`. Without an explicit
/// `n` range the transition is located first (`n_auto`). Under
/// `full_scale` the defaults become `d = 100` and `n ∈ [2500, 3500]`.
pub fn convergence_sweep(cfg: &ExperimentConfig) -> Result<ConvergenceSweep> {
    if cfg.kind.as_deref().is_some_and(|k| k != "whitened-sphere" && k != "sphere") {
        return Err(Error::config("the convergence sweep uses whitened-sphere data"));
    }
    let d = cfg.d.unwrap_or(if cfg.full_scale { 100 } else { 30 });
    let trials = cfg.trials_or(25);
    let explicit = !cfg.n_list.is_empty() || cfg.n_min.is_some() || cfg.n.is_some();
    let ns = if cfg.n_auto || (!explicit && !cfg.full_scale) {
        auto_range(cfg, d)?
    } else if !explicit {
        (0..=10).map(|k| 2500 + 100 * k).collect()
    } else {
        cfg.n_values(&[])?
    };
    let settings = convergence_settings(cfg);
    let mut points = Vec::with_capacity(ns.len());
    for (k, &n) in ns.iter().enumerate() {
        let p = width_for(cfg, n)?;
        let pt = convergence_point(
            &DataKind::WhitenedSphere,
            d,
            n,
            p,
            trials,
            settings,
            seed::derive(cfg.seed, k as u64),
        )?;
        info!("n={n} p={p} probability={:.3}", pt.estimate.estimate);
        points.push(pt);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.estimate.estimate).collect();
    let fit = fit::fit_sigmoid(&xs, &ps).map_err(|e| e.to_string());
    let spearman = fit::spearman(&xs, &ps).ok();
    Ok(ConvergenceSweep { points, fit, spearman })
}

fn convergence_table(points: &[ConvergencePoint]) -> Table {
    let mut t = Table::new(&[
        "n",
        "d",
        "p",
        "trials",
        "converged",
        "convergence_probability",
        "ci_half_width",
        "mean_final_normalized_loss",
        "diverged",
        "loss_increase_runs",
        "audit_violations",
    ]);
    for pt in points {
        t.push(vec![
            pt.n.into(),
            pt.d.into(),
            pt.p.into(),
            pt.estimate.trials.into(),
            pt.converged.into(),
            pt.estimate.estimate.into(),
            pt.estimate.half_width.into(),
            pt.mean_normalized_loss.into(),
            pt.diverged.into(),
            pt.loss_increase_runs.into(),
            pt.audit_issues.len().into(),
        ]);
    }
    t
}

pub fn run_convergence_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let sweep = convergence_sweep(cfg)?;
    let mut report = Report::new(Experiment::ConvergenceSweep.label(), convergence_table(&sweep.points));
    report.set("seed", cfg.seed);
    report.set("stop_rule", cfg.stop.unwrap_or(StopRule::Linear).label());
    match &sweep.fit {
        Ok(f) => {
            report.set("threshold_n", f.midpoint);
            report.set("width", f.width);
            report.set("fit_sse", f.sse);
            report.set("extrapolated", f.extrapolated);
        }
        Err(msg) => report.set("fit_refused", msg.clone()),
    }
    report.set("spearman", sweep.spearman);
    report.set("diverged", sweep.points.iter().map(|p| p.diverged).sum::<usize>());
    let rose: usize = sweep.points.iter().map(|p| p.loss_increase_runs).sum();
    report.set("loss_increase_runs", rose);
    warn_overshoot(rose, convergence_settings(cfg).step);
    for pt in &sweep.points {
        report.audit_failures.extend(pt.audit_issues.iter().cloned());
    }
    report.plot = Some(PlotSpec {
        table: None,
        x: "n".into(),
        ys: vec!["convergence_probability".into()],
        log_axes: false,
    });
    Ok(report)
}

/// Fitted threshold per dimension (width fixed, default `p = 30`) or per
/// width (`p_list` given, dimension fixed), with a linear regression of the
/// threshold against the swept parameter. Defaults: `d ∈ {10, 20, 30}`.
pub fn run_threshold_scaling(cfg: &ExperimentConfig) -> Result<Report> {
    let by_width = !cfg.p_list.is_empty();
    let params: Vec<(usize, usize)> = if by_width {
        let d = cfg.d.unwrap_or(30);
        cfg.p_list.iter().map(|&p| (d, p)).collect()
    } else {
        let ds = if cfg.d_list.is_empty() {
            cfg.d.map_or_else(|| vec![10, 20, 30], |d| vec![d])
        } else {
            cfg.d_list.clone()
        };
        let p = cfg.p.unwrap_or(30);
        ds.into_iter().map(|d| (d, p)).collect()
    };
    let mut table = Table::new(&["d", "p", "threshold_n", "width", "extrapolated", "spearman", "fit_status"]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut audit = Vec::new();
    let mut rose = 0;
    for (k, &(d, p)) in params.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.d = Some(d);
        sub.p = Some(p);
        sub.seed = seed::derive(cfg.seed, 1000 + k as u64);
        let sweep = convergence_sweep(&sub)?;
        for pt in &sweep.points {
            audit.extend(pt.audit_issues.iter().cloned());
            rose += pt.loss_increase_runs;
        }
        match &sweep.fit {
            Ok(f) => {
                table.push(vec![
                    d.into(),
                    p.into(),
                    f.midpoint.into(),
                    f.width.into(),
                    f.extrapolated.into(),
                    sweep.spearman.into(),
                    "ok".into(),
                ]);
                xs.push(if by_width { p as f64 } else { d as f64 });
                ys.push(f.midpoint);
            }
            Err(msg) => table.push(vec![
                d.into(),
                p.into(),
                Cell::Empty,
                Cell::Empty,
                Cell::Empty,
                sweep.spearman.into(),
                format!("refused: {msg}").into(),
            ]),
        }
    }
    let mut report = Report::new(Experiment::ThresholdScaling.label(), table);
    report.set("swept", if by_width { "p" } else { "d" });
    report.set("seed", cfg.seed);
    match fit::linear_regression(&xs, &ys) {
        Ok(f) => {
            report.set("slope", f.slope);
            report.set("intercept", f.intercept);
            report.set("r2", f.r2);
        }
        Err(e) => report.set("regression_refused", e.to_string()),
    }
    report.set("loss_increase_runs", rose);
    warn_overshoot(rose, convergence_settings(cfg).step);
    report.audit_failures = audit;
    report.plot = Some(PlotSpec {
        table: None,
        x: if by_width { "p" } else { "d" }.into(),
        ys: vec!["threshold_n".into()],
        log_axes: false,
    });
    Ok(report)
}

/// The four end-of-run curvature measures of one converged run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureMeasures {
    /// Local curvature at the final state.
    pub mu_final: f64,
    /// `(1/t) log(L(0)/L(t))` at the final time.
    pub mean_pl: f64,
    pub mu_low: f64,
    pub mu_upp: f64,
}

/// Per-size means of a curvature sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePoint {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub trials: usize,
    pub converged: usize,
    pub diverged: usize,
    pub means: Option<CurvatureMeasures>,
    pub audit_issues: Vec<String>,
}

/// Runs one trial until the loss crosses the interpolation threshold and
/// measures the curvature at the stopping time. Returns `None` when the
/// threshold is not reached within `horizon`.
pub fn curvature_trial(
    data: &DataSet,
    net: &NetworkState,
    step: f64,
    integrator: flow::Integrator,
    horizon: f64,
) -> Result<(Option<CurvatureMeasures>, TrajectoryRecord)> {
    let fc = FlowConfig::new(step, horizon)
        .integrator(integrator)
        .record_every(usize::MAX)
        .stop_below(flow::interpolation_threshold(data));
    let rec = flow::integrate(net, data, &fc)?;
    if rec.stop_reason != StopReason::Interpolated {
        return Ok((None, rec));
    }
    let mu_final = plmetrics::local_pl_quadratic(&rec.last, data)?;
    let mean_pl = plmetrics::average_pl(rec.initial_loss(), rec.final_loss(), rec.final_time())?;
    let (mu_low, mu_upp) = plmetrics::reported_bounds(&rec.last, data)?;
    Ok((
        Some(CurvatureMeasures {
            mu_final,
            mean_pl,
            mu_low,
            mu_upp,
        }),
        rec,
    ))
}

/// Curvature measures against `n` on orthonormal data, with log-log slopes.
/// Defaults: `d = 256`, `n ∈ {64, 91, 128, 181, 256}`, 10 trials, the
/// recommended width, asymmetric initialization, Euler step 1 up to the
/// default horizon. Under `full_scale`: `d = 2000`, `n ∈ [1000, 2000]`.
pub fn curvature_sweep(cfg: &ExperimentConfig) -> Result<Vec<CurvaturePoint>> {
    let kind = data_kind(cfg, 0, "orthonormal")?;
    if !kind.is_orthogonal() || matches!(kind, DataKind::Grouped(_)) {
        return Err(Error::config("the curvature sweep uses orthonormal data"));
    }
    let d = cfg.d.unwrap_or(if cfg.full_scale { 2000 } else { 256 });
    let default_ns: Vec<usize> = if cfg.full_scale {
        (0..=4).map(|k| 1000 + 250 * k).collect()
    } else {
        vec![64, 91, 128, 181, 256]
    };
    let ns = cfg.n_values(&default_ns)?;
    let trials = cfg.trials_or(10);
    let step = cfg.step.unwrap_or(1.0);
    let mut points = Vec::new();
    for (k, &n) in ns.iter().enumerate() {
        let p = width_for(cfg, n)?;
        let horizon = cfg.horizon.unwrap_or_else(|| flow::default_horizon(n, p));
        let point_seed = seed::derive(cfg.seed, k as u64);
        let runs = parallel::map_trials(trials, |t| -> Result<(Option<CurvatureMeasures>, bool, Option<String>)> {
            let s = seed::derive(point_seed, t as u64);
            let data = data::generate(&kind, d, n, s)?;
            let net = init::init_standard(p, d, cfg.init.unwrap_or(InitMode::Asymmetric), s)?;
            let (m, rec) = curvature_trial(&data, &net, step, cfg.integrator, horizon)?;
            let issue = audit_issue(&rec, &format!("n={n} trial {t}"), step);
            Ok((m, rec.stop_reason == StopReason::Diverged, issue))
        });
        let mut ok = Vec::new();
        let (mut diverged, mut issues) = (0, Vec::new());
        for r in runs {
            let (m, dv, issue) = r?;
            ok.extend(m);
            diverged += usize::from(dv);
            issues.extend(issue);
        }
        let field = |f: fn(&CurvatureMeasures) -> f64| mean(&ok.iter().map(f).collect::<Vec<_>>());
        let means = (!ok.is_empty()).then(|| CurvatureMeasures {
            mu_final: field(|m| m.mu_final).unwrap_or(f64::NAN),
            mean_pl: field(|m| m.mean_pl).unwrap_or(f64::NAN),
            mu_low: field(|m| m.mu_low).unwrap_or(f64::NAN),
            mu_upp: field(|m| m.mu_upp).unwrap_or(f64::NAN),
        });
        info!("n={n} p={p} converged={}/{trials}", ok.len());
        points.push(CurvaturePoint {
            n,
            d,
            p,
            trials,
            converged: ok.len(),
            diverged,
            means,
            audit_issues: issues,
        });
    }
    Ok(points)
}

pub const CURVATURE_MEASURES: [&str; 4] = ["mean_mu_final", "mean_average_pl", "mean_mu_low", "mean_mu_upp"];

pub fn run_curvature_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let points = curvature_sweep(cfg)?;
    let mut cols = vec!["n", "d", "p", "trials", "converged", "excluded", "diverged"];
    cols.extend(CURVATURE_MEASURES);
    let mut table = Table::new(&cols);
    for pt in &points {
        let m = pt.means;
        table.push(vec![
            pt.n.into(),
            pt.d.into(),
            pt.p.into(),
            pt.trials.into(),
            pt.converged.into(),
            (pt.trials - pt.converged).into(),
            pt.diverged.into(),
            m.map(|m| m.mu_final).into(),
            m.map(|m| m.mean_pl).into(),
            m.map(|m| m.mu_low).into(),
            m.map(|m| m.mu_upp).into(),
        ]);
    }
    let mut report = Report::new(Experiment::CurvatureSweep.label(), table);
    report.set("seed", cfg.seed);
    report.set("excluded", points.iter().map(|p| p.trials - p.converged).sum::<usize>());
    for name in CURVATURE_MEASURES {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (pt, v) in points.iter().zip(report.table.column(name).unwrap_or_default()) {
            if let Some(v) = v.as_f64() {
                xs.push(pt.n as f64);
                ys.push(v);
            }
        }
        let key = name.trim_start_matches("mean_");
        match fit::loglog_regression(&xs, &ys) {
            Ok(f) => {
                report.set(&format!("slope_{key}"), f.slope);
                report.set(&format!("r2_{key}"), f.r2);
            }
            Err(e) => report.set(&format!("slope_{key}"), format!("refused: {e}")),
        }
    }
    for pt in &points {
        report.audit_failures.extend(pt.audit_issues.iter().cloned());
    }
    report.plot = Some(PlotSpec {
        table: None,
        x: "n".into(),
        ys: CURVATURE_MEASURES.iter().map(|s| s.to_string()).collect(),
        log_axes: true,
    });
    Ok(report)
}

/// Times at which a decreasing curve first reaches the given level,
/// interpolated linearly between grid points.
pub fn first_crossing(ts: &[f64], vs: &[f64], level: f64) -> Option<f64> {
    if vs.first().is_some_and(|&v| v <= level) {
        return ts.first().copied();
    }
    for k in 1..vs.len() {
        if vs[k] <= level && vs[k - 1] > level {
            let f = (vs[k - 1] - level) / (vs[k - 1] - vs[k]);
            return Some(ts[k - 1] + f * (ts[k] - ts[k - 1]));
        }
    }
    None
}

/// Detected transition of one normalized group-loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub midpoint: Option<f64>,
    /// Time from the `1 − ε` crossing to the `ε` crossing.
    pub width: Option<f64>,
}

pub fn detect_transition(ts: &[f64], normalized: &[f64], eps: f64) -> Transition {
    let mid = first_crossing(ts, normalized, 0.5);
    let width = match (first_crossing(ts, normalized, 1.0 - eps), first_crossing(ts, normalized, eps)) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    Transition { midpoint: mid, width }
}

/// Closed-form group losses `L^j(s·t_n)/L^j(0)` on the rescaled grid, for
/// groups of `n / p_n` orthonormal points with constant target magnitudes.
/// Initial alignment `√(2/π)` and active norm 1.
pub fn closed_form_curves(
    n: usize,
    magnitudes: &[f64],
    scale: TimeScale,
    variant: ClosedFormVariant,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let p_n = magnitudes.len();
    if p_n == 0 || n % p_n != 0 {
        return Err(Error::config(format!("{p_n} groups do not divide n = {n}")));
    }
    let tn = scale.value(n, p_n);
    let align0 = (2.0 / std::f64::consts::PI).sqrt();
    magnitudes
        .iter()
        .map(|&m| {
            let g = GroupClosedForm::new(m, align0, 1.0, p_n, n / p_n)?.with_variant(variant);
            let l0 = g.group_loss_at(0.0);
            Ok(grid.iter().map(|&s| g.group_loss_at(s * tn) / l0).collect())
        })
        .collect()
}

/// Rescaled loss curves of group-initialized networks and their detected
/// transitions. Defaults: two groups with `|y| = 1, 2`, `n ∈ {2¹⁰, 2¹⁴,
/// 2¹⁸}`, rescaled times on `[0, 2]`, widths between the 0.9 and 0.1
/// levels. With `simulate` the flow is also integrated for sizes up to
/// 2¹² (larger sizes are skipped) and compared with its own closed form.
pub fn run_phase_transition(cfg: &ExperimentConfig) -> Result<Report> {
    let ns = cfg.n_values(&[1 << 10, 1 << 14, 1 << 18])?;
    let mags = cfg.magnitudes.clone();
    if mags.is_empty() || mags.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::config("magnitudes must be positive"));
    }
    let p_n = mags.len();
    let eps = cfg.width_epsilon;
    let grid: Vec<f64> = (0..cfg.grid)
        .map(|k| cfg.t_max * k as f64 / (cfg.grid - 1) as f64)
        .collect();
    let mut table = Table::new(&[
        "source",
        "n",
        "group",
        "magnitude",
        "midpoint",
        "predicted_midpoint",
        "midpoint_rel_error",
        "width",
        "predicted_window",
        "resolved",
    ]);
    let mut curve_cols = vec!["source".to_string(), "n".into(), "t".into()];
    curve_cols.extend((0..p_n).map(|j| format!("group_{j}")));
    curve_cols.push("total".into());
    let mut curves = Table {
        columns: curve_cols,
        rows: Vec::new(),
    };
    let mut widths: Vec<(usize, Vec<Option<f64>>)> = Vec::new();
    let mut audit = Vec::new();

    let mut emit_rows = |source: &str,
                         n: usize,
                         ts: &[f64],
                         per_group: &[Vec<f64>],
                         totals: &[f64],
                         table: &mut Table|
     -> Result<Vec<Option<f64>>> {
        let mut ws = Vec::new();
        for (j, v) in per_group.iter().enumerate() {
            let tr = detect_transition(ts, v, eps);
            let pred = oracle::transition_time(mags[j])?;
            let window = oracle::transition_window(mags[j], eps, n, false)?;
            table.push(vec![
                source.into(),
                n.into(),
                j.into(),
                mags[j].into(),
                tr.midpoint.into(),
                pred.into(),
                tr.midpoint.map(|m| (m - pred).abs() / pred).into(),
                tr.width.into(),
                window.into(),
                (tr.midpoint.is_some() && tr.width.is_some()).into(),
            ]);
            ws.push(tr.width);
        }
        for (k, &t) in ts.iter().enumerate() {
            let mut row: Vec<Cell> = vec![source.into(), n.into(), t.into()];
            row.extend(per_group.iter().map(|v| Cell::Num(v[k])));
            row.push(totals[k].into());
            curves.rows.push(row);
        }
        Ok(ws)
    };

    for &n in &ns {
        let per_group = closed_form_curves(n, &mags, cfg.time_scale, cfg.closed_form, &grid)?;
        // Total loss is the mean of group losses; normalize by its value at 0.
        let tn = cfg.time_scale.value(n, p_n);
        let align0 = (2.0 / std::f64::consts::PI).sqrt();
        let forms: Vec<GroupClosedForm> = mags
            .iter()
            .map(|&m| Ok(GroupClosedForm::new(m, align0, 1.0, p_n, n / p_n)?.with_variant(cfg.closed_form)))
            .collect::<Result<_>>()?;
        let total_at = |s: f64| forms.iter().map(|g| g.group_loss_at(s * tn)).sum::<f64>();
        let t0 = total_at(0.0);
        let totals: Vec<f64> = grid.iter().map(|&s| total_at(s) / t0).collect();
        let ws = emit_rows("closed-form", n, &grid, &per_group, &totals, &mut table)?;
        widths.push((n, ws));
    }

    if cfg.simulate {
        for (k, &n) in ns.iter().enumerate() {
            if n > 1 << 12 {
                info!("phase transition: skipping simulation at n = {n}");
                continue;
            }
            let spec = GroupSpec::alternating(p_n, n / p_n)?.with_magnitudes(GroupMagnitudes::Constant(mags.clone()))?;
            let s = seed::derive(cfg.seed, k as u64);
            let data = data::generate(&DataKind::Grouped(spec.clone()), n, n, s)?;
            let net = init::init_group(&data, &spec, s)?;
            let tn = cfg.time_scale.value(n, p_n);
            let step = cfg.step.unwrap_or(0.1);
            let samples = cfg.grid.min(2001);
            let horizon = cfg.t_max * tn;
            let total_steps = (horizon / step).ceil() as usize;
            let fc = FlowConfig::new(step, horizon)
                .integrator(cfg.integrator)
                .record_every(total_steps.div_ceil(samples - 1).max(1))
                .with_detail();
            let rec = flow::integrate(&net, &data, &fc)?;
            audit.extend(audit_issue(&rec, &format!("simulated n={n}"), step));
            let res = &rec.detail.as_ref().expect("detail requested").residuals;
            let ts: Vec<f64> = rec.times.iter().map(|t| t / tn).collect();
            let k_n = spec.k_n as f64;
            let mut per_group = Vec::new();
            for j in 0..p_n {
                let g: Vec<f64> = (0..ts.len())
                    .map(|r| spec.members(j).map(|i| res[[r, i]].powi(2)).sum::<f64>() / (2.0 * k_n))
                    .collect();
                let g0 = g[0];
                per_group.push(g.into_iter().map(|v| v / g0).collect::<Vec<_>>());
            }
            let totals: Vec<f64> = rec.losses.iter().map(|l| l / rec.losses[0]).collect();
            emit_rows("simulated", n, &ts, &per_group, &totals, &mut table)?;
        }
    }

    let mut report = Report::new(Experiment::PhaseTransition.label(), table);
    report.set("groups", p_n);
    report.set("width_epsilon", eps);
    report.set(
        "time_scale",
        match cfg.time_scale {
            TimeScale::LogNP => "log-np",
            TimeScale::LogN => "log-n",
        },
    );
    report.set(
        "closed_form",
        match cfg.closed_form {
            ClosedFormVariant::Exact => "exact",
            ClosedFormVariant::Printed => "printed",
        },
    );
    if let (Some(first), Some(last)) = (widths.first(), widths.last()) {
        if widths.len() > 1 {
            for j in 0..p_n {
                let ratio = match (first.1[j], last.1[j]) {
                    (Some(a), Some(b)) if a > 0.0 => Some(b / a),
                    _ => None,
                };
                report.set(&format!("width_ratio_group_{j}"), ratio);
            }
        }
    }
    report.extras.push(("curves".into(), curves));
    report.audit_failures = audit;
    report.plot = Some(PlotSpec {
        table: Some("curves".into()),
        x: "t".into(),
        ys: vec!["total".into()],
        log_axes: false,
    });
    Ok(report)
}

/// Monte-Carlo frequency of the low-correlation condition. Defaults:
/// whitened-sphere data, `n = 8`, `d ∈ {n, 4n², 16n², 64n²}`, 100 trials.
pub fn run_check_assumptions(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.n.unwrap_or(8);
    let kind = data_kind(cfg, n, "whitened-sphere")?;
    let ds = if !cfg.d_list.is_empty() {
        cfg.d_list.clone()
    } else if let Some(d) = cfg.d {
        vec![d]
    } else {
        vec![n, 4 * n * n, 16 * n * n, 64 * n * n]
    };
    let trials = cfg.trials_or(100);
    let mut table = Table::new(&[
        "d",
        "n",
        "trials",
        "holds",
        "frequency",
        "ci_half_width",
        "mean_offdiag_norm",
        "mean_threshold",
    ]);
    for (k, &d) in ds.iter().enumerate() {
        let reports = parallel::map_trials(trials, |t| -> Result<data::LowCorrelationReport> {
            let data = data::generate(&kind, d, n, trial_seed(cfg.seed, k as u64, t))?;
            Ok(data::check_low_correlation(&data))
        });
        let reports: Vec<_> = reports.into_iter().collect::<Result<_>>()?;
        let holds = reports.iter().filter(|r| r.holds).count();
        let est = ProbabilityEstimate::from_counts(holds, trials);
        table.push(vec![
            d.into(),
            n.into(),
            trials.into(),
            holds.into(),
            est.estimate.into(),
            est.half_width.into(),
            mean(&reports.iter().map(|r| r.norm).collect::<Vec<_>>()).into(),
            mean(&reports.iter().map(|r| r.threshold).collect::<Vec<_>>()).into(),
        ]);
    }
    let mut report = Report::new(Experiment::CheckAssumptions.label(), table);
    report.set("kind", kind.label());
    report.set("seed", cfg.seed);
    report.plot = Some(PlotSpec {
        table: None,
        x: "d".into(),
        ys: vec!["frequency".into()],
        log_axes: false,
    });
    Ok(report)
}

/// The two-neuron stalling instance integrated to `100 n`. Defaults:
/// `δ = 10⁻³`, `y₁ = 100`, `λ = 0.2`, Euler step `10⁻³`.
pub fn run_counterexample(cfg: &ExperimentConfig) -> Result<Report> {
    let ce = oracle::counterexample_instance(cfg.delta, cfg.y1, cfg.lambda, cfg.seed)?;
    let step = cfg.step.unwrap_or(1e-3);
    let horizon = cfg.horizon.unwrap_or(100.0 * ce.data.n() as f64);
    let fc = FlowConfig::new(step, horizon).integrator(cfg.integrator);
    let rec = flow::integrate(&ce.net, &ce.data, &fc)?;
    let mut report = Report::new(Experiment::Counterexample.label(), trajectory_table(&rec));
    report.set("delta", cfg.delta);
    report.set("y1", cfg.y1);
    report.set("lambda", cfg.lambda);
    report.set("window_low", ce.window.0);
    report.set("window_high", ce.window.1);
    report.set("good_init", init::good_init_event(&ce.net, &ce.data)?);
    report.set("loss_floor", ce.loss_floor);
    report.set("stalled", rec.final_loss() >= ce.loss_floor);
    flow_summary(&mut report, &rec);
    report.audit_failures.extend(audit_issue(&rec, "counterexample", step));
    report.plot = Some(PlotSpec {
        table: None,
        x: "time".into(),
        ys: vec!["loss".into()],
        log_axes: false,
    });
    Ok(report)
}

/// Monte-Carlo probability of the good-initialization event against its
/// lower bound. Defaults: `n = d = 10`, `p` the recommended width, 10⁴
/// trials.
pub fn run_init_probability(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.n.unwrap_or(10);
    let d = cfg.d.unwrap_or(n);
    let ps = if !cfg.p_list.is_empty() {
        cfg.p_list.clone()
    } else {
        vec![width_for(cfg, n)?]
    };
    let trials = cfg.trials_or(10_000);
    let mut table = Table::new(&["n", "d", "p", "trials", "estimate", "std_error", "ci_half_width", "lower_bound"]);
    for (k, &p) in ps.iter().enumerate() {
        let est = init::estimate_good_init_prob(d, n, p, trials, seed::derive(cfg.seed, k as u64))?;
        table.push(vec![
            n.into(),
            d.into(),
            p.into(),
            trials.into(),
            est.estimate.into(),
            est.std_error.into(),
            est.half_width.into(),
            init::good_init_lower_bound(n, p).into(),
        ]);
    }
    let mut report = Report::new(Experiment::InitProbability.label(), table);
    report.set("seed", cfg.seed);
    report.set("epsilon", cfg.epsilon);
    report.plot = Some(PlotSpec {
        table: None,
        x: "p".into(),
        ys: vec!["estimate".into(), "lower_bound".into()],
        log_axes: false,
    });
    Ok(report)
}

/// Runs the experiment and writes its outputs under `path`.
pub fn run_and_emit(cfg: &ExperimentConfig, path: &Path) -> Result<Report> {
    let report = run(cfg)?;
    super::emit::emit(&report, path, cfg.format)?;
    Ok(report)
}
