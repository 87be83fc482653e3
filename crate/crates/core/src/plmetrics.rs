//! Polyak–Łojasiewicz curvature of the flow and the bounds around it.
//!
//! The local curvature is the instantaneous exponential decay rate of the
//! loss, `μ = −L̇/L = (Σ_j ‖ẇ_j‖² + ȧ_j²)/(p L)`. Because `dR/dt = −(1/n) M R`
//! it also equals `(2/n) R̄ᵀ M R̄` with `R̄ = R/‖R‖`; both routes are exposed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::init::InitMode;
use crate::model::{self, offdiag_gram_norm, DataSet, NetworkState};
use crate::{seed, Error, Result};

/// Curvature measurements at one recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlSample {
    pub t: f64,
    /// `(Σ‖ẇ‖² + ȧ²)/(pL)`.
    pub mu_exact: f64,
    /// `(2/n) R̄ᵀ M R̄`.
    pub mu_quadratic: f64,
    /// `log(L(t−η)/L(t))/η` when the previous step is known.
    pub mu_discrete: Option<f64>,
    /// Activation-count sandwich around `mu_quadratic`.
    pub mu_lower: f64,
    pub mu_upper: f64,
    /// Residual-driven lower bound `(C/n) min_i |1 − r_i/y_i|`.
    pub residual_bound: f64,
    /// Orthogonal-data upper bound, only for orthogonal inputs.
    pub orthogonal_upper: Option<f64>,
}

/// `(Σ_j ‖ẇ_j‖² + ȧ_j²)/(p L)` from the velocity field.
pub fn local_pl_exact(net: &NetworkState, data: &DataSet) -> Result<f64> {
    let eval = model::evaluate(net, data)?;
    let l = model::loss_of_residuals(&eval.residuals);
    if l <= 0.0 {
        return Err(Error::undefined("local curvature at zero loss"));
    }
    Ok(eval.velocity.sq_norm() / (net.p() as f64 * l))
}

/// `(2/n) R̄ᵀ M R̄` from the residual operator.
pub fn local_pl_quadratic(net: &NetworkState, data: &DataSet) -> Result<f64> {
    quadratic_with_gram(net, data, &data.gram())
}

fn quadratic_with_gram(net: &NetworkState, data: &DataSet, gram: &Array2<f64>) -> Result<f64> {
    let r = model::residuals(net, data)?;
    let rr = r.dot(&r);
    if rr <= 0.0 {
        return Err(Error::undefined("local curvature at zero loss"));
    }
    let m = model::residual_operator_with_gram(net, data, gram)?;
    Ok(2.0 / data.n() as f64 * r.dot(&m.dot(&r)) / rr)
}

/// Decay rate between two losses `dt` apart: `log(l_prev/l)/dt`.
pub fn discrete_pl(l_prev: f64, l: f64, dt: f64) -> Result<f64> {
    if !(l_prev > 0.0 && l > 0.0) {
        return Err(Error::undefined("discrete curvature needs positive losses"));
    }
    if !(dt > 0.0) {
        return Err(Error::precondition("discrete curvature needs dt > 0"));
    }
    Ok((l_prev / l).ln() / dt)
}

/// Time-averaged curvature `(1/t) log(L(0)/L(t))`, so `L(t) = L(0) e^{−⟨μ⟩ t}`.
pub fn average_pl(l0: f64, lt: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::precondition("average curvature needs t > 0"));
    }
    if !(l0 > 0.0 && lt > 0.0) {
        return Err(Error::undefined("average curvature needs positive losses"));
    }
    Ok((l0 / lt).ln() / t)
}

/// Per-datum sums `(1/p) Σ_j c_j 1_{j,i}` for a per-neuron weight `c`.
fn gated_means(z: &Array2<f64>, c: &Array1<f64>) -> Array1<f64> {
    let p = c.len() as f64;
    let gates = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    gates.t().dot(c) / p
}

fn min_of(v: &Array1<f64>) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(v: &Array1<f64>) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Activation-count bounds on `(2/n) R̄ᵀ M R̄`:
///
/// - lower `(2/n)((C_x⁻)² − ‖XᵀX − D_X‖) min_i (1/p) Σ_j a_j² 1_{j,i}`, clamped at 0;
/// - upper `(2/n)(C_x⁺)² max_i (1/p) Σ_j (a_j² + ‖w_j‖²) 1_{j,i}`.
///
/// `offdiag_norm` is `‖XᵀX − D_X‖`, passed in so trajectories compute it once.
/// The upper bound assumes orthogonal inputs: on correlated inputs
/// `‖X P_j R̄‖²` can exceed `(C_x⁺)²‖P_j R̄‖²` by up to `‖XᵀX − D_X‖‖P_j R̄‖²`.
pub fn activation_bounds_with(
    net: &NetworkState,
    data: &DataSet,
    offdiag_norm: f64,
) -> Result<(f64, f64)> {
    let z = net.preactivations(data)?;
    let a2 = net.a.mapv(|a| a * a);
    let both = &a2 + &net.w_norms().mapv(|w| w * w);
    let n = data.n() as f64;
    let lower = 2.0 / n * (data.cx_min().powi(2) - offdiag_norm) * min_of(&gated_means(&z, &a2));
    let upper = 2.0 / n * data.cx_max().powi(2) * max_of(&gated_means(&z, &both));
    Ok((lower.max(0.0), upper))
}

pub fn activation_bounds(net: &NetworkState, data: &DataSet) -> Result<(f64, f64)> {
    activation_bounds_with(net, data, offdiag_gram_norm(data))
}

/// Lower-bound constant `(6/5)(C_x⁻)²/C_x⁺ · C_y⁻` of the residual bound.
pub fn residual_bound_constant(data: &DataSet) -> f64 {
    1.2 * data.cx_min().powi(2) / data.cx_max() * data.cy_min()
}

/// `(C/n) min_i |1 − r_i/y_i|` with [`residual_bound_constant`].
pub fn residual_lower_bound(net: &NetworkState, data: &DataSet) -> Result<f64> {
    let r = model::residuals(net, data)?;
    let ratio = (&r / data.outputs()).mapv(|q| (1.0 - q).abs());
    Ok(residual_bound_constant(data) / data.n() as f64 * min_of(&ratio))
}

/// Constructive constant `2π√(2/3) (C_x⁺)²/C_x⁻ · C_y⁺` of the orthogonal upper bound.
pub fn orthogonal_bound_constant(data: &DataSet) -> f64 {
    2.0 * std::f64::consts::PI * (2.0f64 / 3.0).sqrt() * data.cx_max().powi(2) / data.cx_min()
        * data.cy_max()
}

/// `C √(p/n) max_i |1 − r_i/y_i| + C/n`, valid for orthogonal inputs once
/// wrongly initialized gates have shut. `constant` defaults to
/// [`orthogonal_bound_constant`].
pub fn orthogonal_upper_bound(
    net: &NetworkState,
    data: &DataSet,
    constant: Option<f64>,
) -> Result<f64> {
    let c = constant.unwrap_or_else(|| orthogonal_bound_constant(data));
    let r = model::residuals(net, data)?;
    let ratio = (&r / data.outputs()).mapv(|q| (1.0 - q).abs());
    let n = data.n() as f64;
    Ok(c * (net.p() as f64 / n).sqrt() * max_of(&ratio) + c / n)
}

/// Terminal-curvature lower bound `C (1 − δ)/n` with `δ = max_i |r_i/y_i|`.
pub fn terminal_average_bound(net: &NetworkState, data: &DataSet) -> Result<f64> {
    let r = model::residuals(net, data)?;
    let delta = max_of(&(&r / data.outputs()).mapv(f64::abs));
    Ok(residual_bound_constant(data) * (1.0 - delta) / data.n() as f64)
}

/// The cruder reporting bounds used in the desk experiments:
/// `(2/n) min_i (1/p) Σ a_j² 1_{j,i}` and `(16/n) max_i (1/p) Σ a_j² 1_{j,i}`.
pub fn reported_bounds(net: &NetworkState, data: &DataSet) -> Result<(f64, f64)> {
    let z = net.preactivations(data)?;
    let m = gated_means(&z, &net.a.mapv(|a| a * a));
    let n = data.n() as f64;
    Ok((2.0 / n * min_of(&m), 16.0 / n * max_of(&m)))
}

/// Per-dataset quantities reused at every sample of a trajectory.
#[derive(Debug, Clone)]
pub struct PlProbe {
    gram: Array2<f64>,
    offdiag_norm: f64,
    orthogonal: bool,
}

impl PlProbe {
    pub fn new(data: &DataSet) -> Self {
        let offdiag_norm = offdiag_gram_norm(data);
        PlProbe {
            gram: data.gram(),
            offdiag_norm,
            orthogonal: offdiag_norm <= 1e-10 * data.cx_max().powi(2),
        }
    }

    pub fn offdiag_norm(&self) -> f64 {
        self.offdiag_norm
    }

    /// All curvature measurements at `net`, or `None` at zero loss.
    pub fn sample(
        &self,
        net: &NetworkState,
        data: &DataSet,
        t: f64,
        mu_discrete: Option<f64>,
    ) -> Result<Option<PlSample>> {
        let mu_exact = match local_pl_exact(net, data) {
            Ok(v) => v,
            Err(Error::Undefined(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mu_quadratic = quadratic_with_gram(net, data, &self.gram)?;
        let (mu_lower, mu_upper) = activation_bounds_with(net, data, self.offdiag_norm)?;
        let residual_bound = residual_lower_bound(net, data)?;
        let orthogonal_upper = if self.orthogonal {
            Some(orthogonal_upper_bound(net, data, None)?)
        } else {
            None
        };
        Ok(Some(PlSample {
            t,
            mu_exact,
            mu_quadratic,
            mu_discrete,
            mu_lower,
            mu_upper,
            residual_bound,
            orthogonal_upper,
        }))
    }
}

/// Distribution of a single hidden neuron `(a, w)`.
#[derive(Debug, Clone, PartialEq)]
pub enum NeuronLaw {
    /// The standard initialization law in dimension `d`.
    Standard(InitMode),
    /// A deterministic neuron.
    Fixed { a: f64, w: Array1<f64> },
}

impl NeuronLaw {
    fn draw<R: Rng>(&self, d: usize, rng: &mut R) -> (f64, Array1<f64>) {
        match self {
            NeuronLaw::Standard(mode) => {
                let s = 1.0 / (d as f64).sqrt();
                let w = Array1::from_shape_fn(d, |_| s * Distribution::<f64>::sample(&StandardNormal, rng));
                let nrm = w.dot(&w).sqrt();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mag = match mode {
                    InitMode::Asymmetric => nrm + Distribution::<f64>::sample(&Exp1, rng),
                    InitMode::Symmetric => nrm,
                };
                (sign * mag, w)
            }
            NeuronLaw::Fixed { a, w } => (*a, w.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    /// Estimated curvature at initialization in the many-neuron limit.
    pub mu0: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of the initial curvature `β₀/n` in the many-neuron
/// limit, `β₀ = 2 E[(wᵀ X P Ỹ)² + a² ‖X P Ỹ‖²]` with `Ỹ` the normalized
/// limiting initial residual `Y − E[a P Xᵀ w]`. For sign-symmetric laws
/// `Ỹ = Y`.
pub fn init_curvature_estimate(
    data: &DataSet,
    law: &NeuronLaw,
    samples: usize,
    seed: u64,
) -> Result<CurvatureEstimate> {
    if samples == 0 {
        return Err(Error::config("samples must be >= 1"));
    }
    let x = data.inputs();
    let mut resid = data.outputs().clone();
    if let NeuronLaw::Fixed { a, w } = law {
        if w.len() != data.d() {
            return Err(Error::config("neuron dimension does not match data"));
        }
        resid -= &(x.t().dot(w).mapv(|v| v.max(0.0)) * *a);
    }
    let nrm = resid.dot(&resid).sqrt();
    if nrm == 0.0 {
        return Err(Error::undefined("limiting residual is zero"));
    }
    resid /= nrm;
    let mut rng = seed::rng_for(seed, 4);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let (a, w) = law.draw(data.d(), &mut rng);
        let z = x.t().dot(&w);
        // P Ỹ: residual restricted to the active data.
        let pr = Array1::from_shape_fn(data.n(), |i| if z[i] > 0.0 { resid[i] } else { 0.0 });
        let xpr = x.dot(&pr);
        let q = 2.0 * (w.dot(&xpr).powi(2) + a * a * xpr.dot(&xpr));
        sum += q;
        sum_sq += q * q;
    }
    let s = samples as f64;
    let mean = sum / s;
    let var = if samples > 1 {
        ((sum_sq - s * mean * mean) / (s - 1.0)).max(0.0)
    } else {
        0.0
    };
    let n = data.n() as f64;
    Ok(CurvatureEstimate {
        mu0: mean / n,
        std_error: (var / s).sqrt() / n,
        samples,
    })
}
