//! Time integration of the gradient flow with recording and audits.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{self, DataSet, FieldEval, NetworkState, Velocity};
use crate::plmetrics::{self, PlProbe, PlSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    Euler,
    /// Classical RK4 with the activation pattern frozen over each step.
    Rk4,
    /// Classical RK4 re-evaluating the gates at every stage.
    Rk4Staged,
}

impl Integrator {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            "rk4-staged" => Ok(Integrator::Rk4Staged),
            _ => Err(Error::config(format!("unknown integrator '{s}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
            Integrator::Rk4Staged => "rk4-staged",
        }
    }
}

/// Upper bound on recorded samples when `record_every` is chosen automatically.
pub const MAX_AUTO_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step: f64,
    pub horizon: f64,
    /// Stop as soon as the loss drops strictly below this value.
    pub stop_threshold: Option<f64>,
    pub integrator: Integrator,
    /// Steps between recorded samples; the first and last are always kept.
    pub record_every: usize,
    /// Compute curvature samples at every recorded time.
    pub record_pl: bool,
    /// Skip curvature samples once the loss is at or below this floor.
    pub pl_floor: Option<f64>,
    /// Keep per-sample residuals, activation counts and neuron sizes.
    pub record_detail: bool,
}

impl FlowConfig {
    /// Euler at the given step, `record_every` chosen for at most
    /// [`MAX_AUTO_SAMPLES`] samples.
    pub fn new(step: f64, horizon: f64) -> Self {
        let steps = (horizon / step).ceil().max(1.0) as usize;
        FlowConfig {
            step,
            horizon,
            stop_threshold: None,
            integrator: Integrator::Euler,
            record_every: steps.div_ceil(MAX_AUTO_SAMPLES).max(1),
            record_pl: false,
            pl_floor: None,
            record_detail: false,
        }
    }

    pub fn integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn stop_below(mut self, threshold: f64) -> Self {
        self.stop_threshold = Some(threshold);
        self
    }

    pub fn record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub fn with_pl(mut self) -> Self {
        self.record_pl = true;
        self
    }

    pub fn with_detail(mut self) -> Self {
        self.record_detail = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("step must be positive"));
        }
        if !(self.horizon >= self.step && self.horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon {} must be at least the step {}",
                self.horizon, self.step
            )));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be >= 1"));
        }
        Ok(())
    }

    fn total_steps(&self) -> usize {
        // Tolerate horizons that are a multiple of the step up to round-off.
        ((self.horizon / self.step) - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Horizon,
    Interpolated,
    Diverged,
}

impl StopReason {
    pub fn label(self) -> &'static str {
        match self {
            StopReason::Horizon => "horizon",
            StopReason::Interpolated => "interpolated",
            StopReason::Diverged => "diverged",
        }
    }
}

/// Per-sample matrices, kept only with [`FlowConfig::record_detail`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDetail {
    /// samples × n
    pub residuals: Array2<f64>,
    /// samples × n
    pub active_counts: Array2<usize>,
    /// samples × p
    pub a: Array2<f64>,
    /// samples × p
    pub w_norms: Array2<f64>,
    /// samples × p, `(a_j² − ‖w_j‖²)(t) − (a_j² − ‖w_j‖²)(0)`
    pub balance_residuals: Array2<f64>,
}

/// Running audits of the invariants the continuous flow guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowAudit {
    /// Largest single-step loss increase, relative to `L(0)`.
    pub max_loss_increase: f64,
    /// Steps whose loss rose by more than `1e-9 L(0)`.
    pub loss_increases: usize,
    /// Neurons whose `a_j` changed sign at some step.
    pub sign_changes: usize,
    /// Total number of gate flips over all steps.
    pub gate_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    /// Decay rate over the step that ended at each sample.
    pub mu_discrete: Vec<Option<f64>>,
    pub min_active: Vec<usize>,
    /// `max_j |balance_j(t) − balance_j(0)|` at each sample.
    pub max_drift: Vec<f64>,
    /// Gate flips accumulated since the previous sample.
    pub gate_flips: Vec<usize>,
    /// Curvature samples, empty unless requested; `None` at zero loss or
    /// below the configured floor.
    pub pl: Vec<Option<PlSample>>,
    pub detail: Option<TrajectoryDetail>,
    pub stop_reason: StopReason,
    pub steps: usize,
    /// Largest balance drift over every step, not only recorded ones.
    pub conservation_drift: f64,
    pub audit: FlowAudit,
    pub initial: NetworkState,
    pub last: NetworkState,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has a sample")
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trajectory has a sample")
    }
}

/// Moves `net` by `h · v`.
fn advanced(net: &NetworkState, v: &Velocity, h: f64) -> NetworkState {
    let mut next = net.clone();
    next.a.scaled_add(h, &v.da);
    next.w.scaled_add(h, &v.dw);
    next
}

/// One step from `net` with first stage `k1` evaluated on preactivations `z`.
/// `Rk4` holds the activation pattern of the step start through all stages,
/// so gate switches happen at step boundaries and the balance of every
/// neuron is conserved to the method's order. `Rk4Staged` recomputes the
/// gates per stage and loses that order whenever a gate switches mid-step.
fn advance(
    net: &NetworkState,
    data: &DataSet,
    z: &Array2<f64>,
    k1: &Velocity,
    h: f64,
    integ: Integrator,
) -> Result<NetworkState> {
    let next = match integ {
        Integrator::Euler => advanced(net, k1, h),
        Integrator::Rk4 | Integrator::Rk4Staged => {
            let gates = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let field = |s: &NetworkState| match integ {
                Integrator::Rk4Staged => model::velocity_field(s, data),
                _ => model::velocity_with_gates(s, data, &gates),
            };
            let k2 = field(&advanced(net, k1, h / 2.0))?;
            let k3 = field(&advanced(net, &k2, h / 2.0))?;
            let k4 = field(&advanced(net, &k3, h))?;
            let mut next = net.clone();
            for (k, c) in [(k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)] {
                next.a.scaled_add(h * c / 6.0, &k.da);
                next.w.scaled_add(h * c / 6.0, &k.dw);
            }
            next
        }
    };
    if !next.is_finite() {
        return Err(Error::Diverged("non-finite weights after step".into()));
    }
    Ok(next)
}

/// One integration step of size `eta`.
pub fn step(net: &NetworkState, data: &DataSet, eta: f64, integrator: Integrator) -> Result<NetworkState> {
    if !(eta > 0.0) {
        return Err(Error::config("step must be positive"));
    }
    let e = model::evaluate(net, data)?;
    advance(net, data, &e.preactivations, &e.velocity, eta, integrator)
}

struct Recorder {
    rec_res: Vec<Array1<f64>>,
    rec_active: Vec<Vec<usize>>,
    rec_a: Vec<Array1<f64>>,
    rec_wn: Vec<Array1<f64>>,
    rec_bal: Vec<Array1<f64>>,
}

fn stack<T: Clone + Default>(rows: &[Array1<T>], width: usize) -> Array2<T> {
    let mut m = Array2::from_elem((rows.len(), width), T::default());
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    m
}

/// Integrates from `net0` until the horizon, the stop threshold, or
/// divergence. Divergence is recorded in the result, never returned as an
/// error; errors are reserved for invalid configuration.
pub fn integrate(net0: &NetworkState, data: &DataSet, cfg: &FlowConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let total = cfg.total_steps();
    let probe = cfg.record_pl.then(|| PlProbe::new(data));
    let balance0 = net0.balance();
    let signs0 = net0.a.mapv(f64::signum);
    let mut flipped_sign = vec![false; net0.p()];

    let mut rec = TrajectoryRecord {
        times: Vec::new(),
        losses: Vec::new(),
        mu_discrete: Vec::new(),
        min_active: Vec::new(),
        max_drift: Vec::new(),
        gate_flips: Vec::new(),
        pl: Vec::new(),
        detail: None,
        stop_reason: StopReason::Horizon,
        steps: 0,
        conservation_drift: 0.0,
        audit: FlowAudit {
            max_loss_increase: 0.0,
            loss_increases: 0,
            sign_changes: 0,
            gate_flips: 0,
        },
        initial: net0.clone(),
        last: net0.clone(),
    };
    let mut detail = Recorder {
        rec_res: Vec::new(),
        rec_active: Vec::new(),
        rec_a: Vec::new(),
        rec_wn: Vec::new(),
        rec_bal: Vec::new(),
    };

    let mut net = net0.clone();
    let mut eval: FieldEval = model::evaluate(&net, data)?;
    let mut t = 0.0;
    let mut k = 0usize;
    let mut prev: Option<(f64, f64)> = None; // (loss, step length) of the previous step
    let mut flips_since = 0usize;
    let mut l0 = f64::NAN;
    loop {
        let l = model::loss_of_residuals(&eval.residuals);
        if k == 0 {
            l0 = l;
        }
        let diverged = !l.is_finite() || l > 1e6 * l0.max(f64::MIN_POSITIVE);
        let drift = Zip::from(&net.balance())
            .and(&balance0)
            .fold(0.0f64, |m, b, b0| m.max((b - b0).abs()));
        rec.conservation_drift = rec.conservation_drift.max(drift);
        let mu_disc = prev.and_then(|(lp, dt)| plmetrics::discrete_pl(lp, l, dt).ok());
        if let Some((lp, _)) = prev {
            let inc = (l - lp) / l0;
            if inc > 1e-9 {
                rec.audit.loss_increases += 1;
            }
            rec.audit.max_loss_increase = rec.audit.max_loss_increase.max(inc);
        }
        let hit_threshold = cfg.stop_threshold.is_some_and(|th| l < th);
        let at_end = k == total || diverged || hit_threshold;
        if k % cfg.record_every == 0 || at_end {
            let pattern_counts: Vec<usize> = (0..data.n())
                .map(|i| eval.preactivations.column(i).iter().filter(|&&z| z > 0.0).count())
                .collect();
            rec.times.push(t);
            rec.losses.push(l);
            rec.mu_discrete.push(mu_disc);
            rec.min_active.push(pattern_counts.iter().copied().min().unwrap_or(0));
            rec.max_drift.push(drift);
            rec.gate_flips.push(flips_since);
            flips_since = 0;
            if let Some(probe) = &probe {
                let below_floor = cfg.pl_floor.is_some_and(|f| l <= f);
                let s = if below_floor || diverged {
                    None
                } else {
                    probe.sample(&net, data, t, mu_disc)?
                };
                rec.pl.push(s);
            }
            if cfg.record_detail {
                detail.rec_res.push(eval.residuals.clone());
                detail.rec_active.push(pattern_counts);
                detail.rec_a.push(net.a.clone());
                detail.rec_wn.push(net.w_norms());
                detail.rec_bal.push(&net.balance() - &balance0);
            }
        }
        if diverged {
            rec.stop_reason = StopReason::Diverged;
            break;
        }
        if hit_threshold {
            rec.stop_reason = StopReason::Interpolated;
            break;
        }
        if k == total {
            rec.stop_reason = StopReason::Horizon;
            break;
        }
        let h = if k + 1 == total {
            cfg.horizon - k as f64 * cfg.step
        } else {
            cfg.step
        };
        let next = match advance(&net, data, &eval.preactivations, &eval.velocity, h, cfg.integrator) {
            Ok(next) => next,
            Err(Error::Diverged(_)) => {
                rec.stop_reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let next_eval = model::evaluate(&next, data)?;
        let flips = Zip::from(&eval.preactivations)
            .and(&next_eval.preactivations)
            .fold(0usize, |acc, a, b| acc + usize::from((*a > 0.0) != (*b > 0.0)));
        flips_since += flips;
        rec.audit.gate_flips += flips;
        for (j, f) in flipped_sign.iter_mut().enumerate() {
            if next.a[j].signum() != signs0[j] {
                *f = true;
            }
        }
        prev = Some((l, h));
        net = next;
        eval = next_eval;
        k += 1;
        t = if k == total {
            cfg.horizon
        } else {
            k as f64 * cfg.step
        };
    }
    rec.steps = k;
    rec.audit.sign_changes = flipped_sign.iter().filter(|&&f| f).count();
    if cfg.record_detail {
        let n = data.n();
        let p = net.p();
        let active: Vec<Array1<usize>> = detail.rec_active.into_iter().map(Array1::from).collect();
        rec.detail = Some(TrajectoryDetail {
            residuals: stack(&detail.rec_res, n),
            active_counts: stack(&active, n),
            a: stack(&detail.rec_a, p),
            w_norms: stack(&detail.rec_wn, p),
            balance_residuals: stack(&detail.rec_bal, p),
        });
    }
    rec.last = net;
    Ok(rec)
}

/// Default training time `1.5 · √(np)/4 · ln(np)`.
pub fn default_horizon(n: usize, p: usize) -> f64 {
    let np = (n * p) as f64;
    1.5 * np.sqrt() / 4.0 * np.ln()
}

/// Early-stopping level `C_y⁻/(2n)` of the convergence experiments.
pub fn interpolation_threshold(data: &DataSet) -> f64 {
    data.cy_min() / (2.0 * data.n() as f64)
}

/// Per-datum floor `(C_y⁻)²/(2n)`, offered as an alternative stopping level.
pub fn interpolation_threshold_squared(data: &DataSet) -> f64 {
    data.cy_min().powi(2) / (2.0 * data.n() as f64)
}

/// `max_{j,t} |(a_j² − ‖w_j‖²)(t) − (a_j² − ‖w_j‖²)(0)|` over every step.
pub fn conservation_drift(traj: &TrajectoryRecord) -> f64 {
    traj.conservation_drift
}

/// Writes the trajectory CSV: time, loss, mu_discrete, mu_exact, mu_lower,
/// mu_upper, min_active_per_datum, max_conservation_drift. Missing values
/// are left empty.
pub fn write_trajectory<W: Write>(traj: &TrajectoryRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record([
        "time",
        "loss",
        "mu_discrete",
        "mu_exact",
        "mu_lower",
        "mu_upper",
        "min_active_per_datum",
        "max_conservation_drift",
    ])
    .map_err(map)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for i in 0..traj.len() {
        let pl = traj.pl.get(i).copied().flatten();
        w.write_record([
            fmt(Some(traj.times[i])),
            fmt(Some(traj.losses[i])),
            fmt(traj.mu_discrete[i]),
            fmt(pl.map(|s| s.mu_exact)),
            fmt(pl.map(|s| s.mu_lower)),
            fmt(pl.map(|s| s.mu_upper)),
            traj.min_active[i].to_string(),
            fmt(Some(traj.max_drift[i])),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn save_trajectory(traj: &TrajectoryRecord, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trajectory(traj, std::io::BufWriter::new(f)).map_err(|e| match e {
        Error::Parse(m) => Error::io(path, std::io::Error::other(m)),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(y: f64, a: f64, w: f64) -> (NetworkState, DataSet) {
        (
            NetworkState::new(array![a], array![[w]]).unwrap(),
            DataSet::new(array![[1.0]], array![y]).unwrap(),
        )
    }

    #[test]
    fn horizon_examples() {
        assert!((default_horizon(100, 10) - 81.92).abs() < 5e-3);
        assert_eq!(default_horizon(1, 1), 0.0);
        let r = default_horizon(400, 10) / default_horizon(100, 10);
        let expect = 2.0 * (4000f64).ln() / (1000f64).ln();
        assert!((r - expect).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let d = DataSet::new(Array2::eye(100), Array1::ones(100)).unwrap();
        assert_eq!(interpolation_threshold(&d), 0.005);
        let (_, one) = scalar(1.0, 1.0, 1.0);
        assert_eq!(interpolation_threshold(&one), 0.5);
        let big = DataSet::new(Array2::eye(3), array![1.5, 2.0, -1.7]).unwrap();
        assert!(interpolation_threshold(&big) < interpolation_threshold_squared(&big));
    }

    #[test]
    fn fixed_points_do_not_move() {
        let (net, data) = scalar(1.0, 1.0, 1.0);
        for integ in [Integrator::Euler, Integrator::Rk4] {
            assert_eq!(step(&net, &data, 0.1, integ).unwrap(), net);
        }
        let (dead, data) = scalar(1.0, 1.0, -1.0);
        assert_eq!(step(&dead, &data, 0.1, Integrator::Euler).unwrap(), dead);
    }

    #[test]
    fn threshold_above_initial_loss_is_not_binding() {
        let (net, data) = scalar(2.0, 0.5, 0.5);
        let l0 = model::loss(&net, &data).unwrap();
        let cfg = FlowConfig::new(0.1, 1.0).stop_below(0.0);
        let tr = integrate(&net, &data, &cfg).unwrap();
        assert_eq!(tr.stop_reason, StopReason::Horizon);
        assert!((tr.final_time() - 1.0).abs() < 1e-12);
        let cfg = FlowConfig::new(0.1, 1.0).stop_below(2.0 * l0);
        let tr = integrate(&net, &data, &cfg).unwrap();
        assert_eq!(tr.stop_reason, StopReason::Interpolated);
        assert_eq!(tr.steps, 0);
    }

    #[test]
    fn records_first_and_last_sample() {
        let (net, data) = scalar(2.0, 0.5, 0.5);
        let cfg = FlowConfig::new(0.1, 1.05).record_every(4).with_pl().with_detail();
        let tr = integrate(&net, &data, &cfg).unwrap();
        assert_eq!(tr.times.first(), Some(&0.0));
        assert_eq!(tr.final_time(), 1.05);
        assert_eq!(tr.steps, 11);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(tr.pl.len(), tr.len());
        assert_eq!(tr.detail.as_ref().unwrap().residuals.nrows(), tr.len());
    }

    #[test]
    fn single_neuron_euler_is_first_order() {
        // Local error of one Euler step of size h behaves like C h².
        let (net, data) = scalar(3.0, 0.6, 0.6);
        let exact = |h: f64| {
            let mut s = net.clone();
            let m = 2000;
            for _ in 0..m {
                s = step(&s, &data, h / m as f64, Integrator::Rk4).unwrap();
            }
            s
        };
        let err = |h: f64| {
            let e = step(&net, &data, h, Integrator::Euler).unwrap();
            let x = exact(h);
            ((e.a[0] - x.a[0]).powi(2) + (e.w[(0, 0)] - x.w[(0, 0)]).powi(2)).sqrt()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn trajectory_csv_has_documented_columns() {
        let (net, data) = scalar(2.0, 0.5, 0.5);
        let tr = integrate(&net, &data, &FlowConfig::new(0.5, 1.0).with_pl()).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&tr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time,loss,mu_discrete,mu_exact,mu_lower,mu_upper,min_active_per_datum,max_conservation_drift"
        );
        assert_eq!(lines.count(), 3);
    }
}
