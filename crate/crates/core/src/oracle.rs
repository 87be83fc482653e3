//! Closed-form ground truth for group-initialized orthonormal data, the
//! predicted transition times, the extinction time of wrong gates, and the
//! two-neuron instance that stalls without the balance condition.
//!
//! With group initialization each neuron `j` only sees its own group and
//! the dynamics reduce to two scalars: the alignment `A = ⟨D̄_j | s_j w̄_j⁺⟩`
//! and the active norm `N = ‖w_j‖₊²`, where `D_j = (1/√k) Σ_{i∈j} y_i x_i`.
//! They solve
//!
//! ```text
//! dA/dt = (c/2)(1 − A²),     dN/dt = c A N − 2N²/(n p),     c = 2√k ‖D_j‖/n,
//! ```
//!
//! whence `A(t) = tanh(ct/2 + atanh A₀)` and a Bernoulli equation for `N`.
//! [`ClosedFormVariant::Printed`] keeps the commonly quoted variant in which
//! the hyperbolic arguments are `ct` instead of `ct/2`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroupSpec;
use crate::model::{self, offdiag_gram_norm, DataSet, NetworkState};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClosedFormVariant {
    /// Solution of the reduced ODEs.
    Exact,
    /// Hyperbolic arguments `ct` in place of `ct/2`.
    Printed,
}

/// Rescaling time used to compare networks of different sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeScale {
    /// `√(np)/4 · log(np)`.
    LogNP,
    /// `√(np)/4 · log(n)`.
    LogN,
}

impl TimeScale {
    pub fn value(self, n: usize, p: usize) -> f64 {
        let np = (n * p) as f64;
        let log = match self {
            TimeScale::LogNP => np.ln(),
            TimeScale::LogN => (n as f64).ln(),
        };
        np.sqrt() / 4.0 * log
    }
}

/// Reduced dynamics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupClosedForm {
    pub c: f64,
    pub align0: f64,
    pub norm0: f64,
    pub p_n: usize,
    pub k_n: usize,
    pub dnorm: f64,
    pub variant: ClosedFormVariant,
}

/// Alignment, active norm and group loss at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub alignment: f64,
    pub norm: f64,
    pub loss: f64,
}

impl GroupClosedForm {
    /// Builds the reduced dynamics from scalars; `n = p_n k_n`.
    pub fn new(dnorm: f64, align0: f64, norm0: f64, p_n: usize, k_n: usize) -> Result<Self> {
        if !(dnorm > 0.0) || !(norm0 > 0.0) || p_n == 0 || k_n == 0 {
            return Err(Error::precondition(
                "closed form needs |D| > 0, initial norm > 0, p_n >= 1, k_n >= 1",
            ));
        }
        if !(-1.0..=1.0).contains(&align0) {
            return Err(Error::precondition(format!("alignment {align0} outside [-1, 1]")));
        }
        let n = (p_n * k_n) as f64;
        Ok(GroupClosedForm {
            c: 2.0 * (k_n as f64).sqrt() * dnorm / n,
            align0,
            norm0,
            p_n,
            k_n,
            dnorm,
            variant: ClosedFormVariant::Exact,
        })
    }

    pub fn with_variant(mut self, variant: ClosedFormVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Reads the reduced quantities of group `j` off a group-initialized state.
    pub fn from_state(data: &DataSet, spec: &GroupSpec, net: &NetworkState, j: usize) -> Result<Self> {
        let m = measure_group(data, spec, net, j)?;
        Self::new(m.dnorm, m.state.alignment, m.state.norm, spec.p_n, spec.k_n)
    }

    /// `p_n √k ‖D‖`, the limit of the active norm.
    pub fn limit_norm(&self) -> f64 {
        self.p_n as f64 * (self.k_n as f64).sqrt() * self.dnorm
    }

    fn half_angle(&self, t: f64) -> f64 {
        match self.variant {
            ClosedFormVariant::Exact => self.c * t / 2.0,
            ClosedFormVariant::Printed => self.c * t,
        }
    }

    /// `⟨D̄_j | s_j w̄_j⁺(t)⟩`.
    pub fn alignment_at(&self, t: f64) -> f64 {
        let (one_minus, one_plus) = self.alignment_gaps(t);
        (one_plus - one_minus) / 2.0
    }

    /// `(1 − A, 1 + A)` without cancellation.
    fn alignment_gaps(&self, t: f64) -> (f64, f64) {
        let a0 = self.align0;
        // A = (sinh u + A₀ cosh u)/(cosh u + A₀ sinh u), scaled by e^{−u}.
        let e = (-2.0 * self.half_angle(t)).exp();
        let den = (1.0 + a0) + (1.0 - a0) * e;
        (2.0 * (1.0 - a0) * e / den, 2.0 * (1.0 + a0) / den)
    }

    /// `‖w_j(t)‖₊²`.
    pub fn norm_at(&self, t: f64) -> f64 {
        let (n0, big) = (self.norm0, self.limit_norm());
        let (num, den) = self.norm_parts(t);
        big * n0 * num / (big * (-self.c * t).exp() + n0 * den)
    }

    /// Numerator and denominator of the norm, both scaled by `e^{−ct}`.
    fn norm_parts(&self, t: f64) -> (f64, f64) {
        let a0 = self.align0;
        match self.variant {
            ClosedFormVariant::Exact => {
                // N = P N₀ E / (P + N₀ J) with E = (cosh u + A₀ sinh u)² and
                // J = c ∫₀ᵗ E; both scaled by e^{−2u}.
                let u = self.c * t / 2.0;
                let e = (-2.0 * u).exp();
                let es = 0.25 * ((1.0 + a0) + (1.0 - a0) * e).powi(2);
                let js = 0.25 * (1.0 + a0 * a0) * (1.0 - e * e) + 0.5 * a0 * (1.0 + e * e) - a0 * e
                    + (1.0 - a0 * a0) * u * e;
                (es, js)
            }
            ClosedFormVariant::Printed => {
                let e = (-self.c * t).exp();
                let num = 0.5 * ((1.0 + a0) + (1.0 - a0) * e * e);
                let den = 0.5 * (1.0 - e * e) + a0 * (0.5 * (1.0 + e * e) - e);
                (num, den)
            }
        }
    }

    /// `(J − E)/e` in closed form, free of the cancellation as `e → 0`.
    fn norm_gap(&self, t: f64) -> f64 {
        let a0 = self.align0;
        match self.variant {
            ClosedFormVariant::Exact => {
                let u = self.c * t / 2.0;
                let e = (-2.0 * u).exp();
                (1.0 - a0 * a0) * (u - 0.5) - a0 - 0.5 * (1.0 - a0).powi(2) * e
            }
            ClosedFormVariant::Printed => {
                let e = (-self.c * t).exp();
                -(a0 + (1.0 - a0) * e)
            }
        }
    }

    /// Mean loss of the group, `½[‖D‖² − (2/(√k p))‖D‖ A N + N²/(k p²)]`,
    /// evaluated as `½[(‖D‖(1 − A) + A g)² + (1 − A²) q²]` with
    /// `q = N/(√k p)` and `g = ‖D‖ − q` so late times keep relative accuracy.
    pub fn group_loss_at(&self, t: f64) -> f64 {
        let (one_minus, one_plus) = self.alignment_gaps(t);
        let a = (one_plus - one_minus) / 2.0;
        let (n0, big) = (self.norm0, self.limit_norm());
        let (num, den) = self.norm_parts(t);
        let e = (-self.c * t).exp();
        let scale = big * e + n0 * den;
        let q = self.dnorm * n0 * num / scale;
        let gap = self.dnorm * e * (big + n0 * self.norm_gap(t)) / scale;
        let lead = self.dnorm * one_minus + a * gap;
        0.5 * (lead * lead + one_minus * one_plus * q * q)
    }

    pub fn state_at(&self, t: f64) -> GroupState {
        GroupState {
            alignment: self.alignment_at(t),
            norm: self.norm_at(t),
            loss: self.group_loss_at(t),
        }
    }

    /// Time `(1/c) log(p_n √k ‖D‖)` after which the active norm is within a
    /// constant factor of its limit.
    pub fn settle_time(&self) -> f64 {
        self.limit_norm().max(1.0).ln() / self.c
    }
}

/// Group quantities measured on a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMeasurement {
    pub dnorm: f64,
    pub state: GroupState,
}

/// Measures alignment, active norm and mean loss of group `j` on `net`.
pub fn measure_group(data: &DataSet, spec: &GroupSpec, net: &NetworkState, j: usize) -> Result<GroupMeasurement> {
    if spec.n() != data.n() || net.p() != spec.p_n || j >= spec.p_n {
        return Err(Error::config("group spec, data and network disagree"));
    }
    let k = spec.k_n as f64;
    let mut dvec = Array1::zeros(data.d());
    for i in spec.members(j) {
        dvec.scaled_add(data.outputs()[i] / k.sqrt(), &data.x(i));
    }
    let dnorm = dvec.dot(&dvec).sqrt();
    let z = net.preactivations(data)?;
    let norm = z.row(j).iter().map(|v| v.max(0.0).powi(2)).sum::<f64>();
    if norm <= 0.0 || dnorm <= 0.0 {
        return Err(Error::undefined("group has no active input or zero targets"));
    }
    let alignment = spec.signs[j] * net.w.row(j).dot(&dvec) / (dnorm * norm.sqrt());
    let r = model::residuals(net, data)?;
    let loss = spec.members(j).map(|i| r[i] * r[i]).sum::<f64>() / (2.0 * k);
    Ok(GroupMeasurement {
        dnorm,
        state: GroupState { alignment, norm, loss },
    })
}

/// Several independent groups; the network loss is the mean group loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormNetwork {
    pub groups: Vec<GroupClosedForm>,
}

impl ClosedFormNetwork {
    pub fn from_state(data: &DataSet, spec: &GroupSpec, net: &NetworkState) -> Result<Self> {
        let groups = (0..spec.p_n)
            .map(|j| GroupClosedForm::from_state(data, spec, net, j))
            .collect::<Result<_>>()?;
        Ok(ClosedFormNetwork { groups })
    }

    pub fn loss_at(&self, t: f64) -> f64 {
        self.groups.iter().map(|g| g.group_loss_at(t)).sum::<f64>() / self.groups.len() as f64
    }
}

/// Rescaled transition time `1/‖D^∞‖`.
pub fn transition_time(dnorm_inf: f64) -> Result<f64> {
    if !(dnorm_inf > 0.0) {
        return Err(Error::precondition("transition time needs |D| > 0"));
    }
    Ok(1.0 / dnorm_inf)
}

/// Constant `C(ε)` governing the transition width, or its small-ε
/// equivalent `2/(ε(1 + ‖D‖))`.
pub fn window_constant(dnorm_inf: f64, epsilon: f64, small_eps: bool) -> f64 {
    let d = dnorm_inf;
    if small_eps {
        return 2.0 / (epsilon * (1.0 + d));
    }
    let lo = 1.0 - epsilon.sqrt();
    let hi = 1.0 - (1.0 - epsilon).sqrt();
    lo / (1.0 + d * lo) * (1.0 + d * hi) / hi
}

/// Asymptotic relative width of the ε to 1 − ε loss window at size `n`:
/// `(1/(2‖D‖)) log C(ε) / log n`.
pub fn transition_window(dnorm_inf: f64, epsilon: f64, n: usize, small_eps: bool) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::precondition("epsilon must lie in (0, 1)"));
    }
    if !(dnorm_inf > 0.0) || n < 2 {
        return Err(Error::precondition("window needs |D| > 0 and n >= 2"));
    }
    Ok(window_constant(dnorm_inf, epsilon, small_eps).ln() / (2.0 * dnorm_inf * (n as f64).ln()))
}

/// Time `2n/(C_y⁻ C_x⁻ Δ) · max_{j,i} ⟨w_j(0)|x_i⟩₊` by which every gate of
/// a wrongly signed neuron has shut on orthogonal data, with
/// `Δ = min_j (a_j² − ‖w_j‖²)` measured on `net0`.
pub fn extinction_time(net0: &NetworkState, data: &DataSet) -> Result<f64> {
    if offdiag_gram_norm(data) > 1e-10 * data.cx_max().powi(2) {
        return Err(Error::precondition("extinction time needs orthogonal inputs"));
    }
    let delta = net0.balance().iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = net0
        .preactivations(data)?
        .iter()
        .fold(0.0f64, |m, &z| m.max(z));
    extinction_time_from(data.n(), data.cy_min(), data.cx_min(), delta, zmax)
}

pub fn extinction_time_from(n: usize, cy_min: f64, cx_min: f64, delta: f64, max_pre: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::precondition(format!(
            "extinction time needs a positive balance gap, got {delta}"
        )));
    }
    Ok(2.0 * n as f64 / (cy_min * cx_min * delta) * max_pre)
}

/// Time after which the curvature sits in `[K₁, K₂]/n^α` for the group
/// setting: `C n^{3α−1} log(C n)` with `C = max(α C_y⁻, (1/(2C_y⁻))^{1/α})`.
pub fn group_curvature_time(alpha: f64, cy_min: f64, n: usize) -> f64 {
    let c = (alpha * cy_min).max((1.0 / (2.0 * cy_min)).powf(1.0 / alpha));
    let n = n as f64;
    c * n.powf(3.0 * alpha - 1.0) * (c * n).ln()
}

/// `(K₁, K₂)` with `K₁ = 2C_y⁻ min_j N_j(0)/(2 + N_j(0))` and `K₂ = 4C_y⁺`.
pub fn group_curvature_constants(cy_min: f64, cy_max: f64, norms0: &[f64]) -> (f64, f64) {
    let m = norms0
        .iter()
        .map(|&n0| n0 / (2.0 + n0))
        .fold(f64::INFINITY, f64::min);
    (2.0 * cy_min * m, 4.0 * cy_max)
}

/// Admissible ratio window `[√(8 max/y₁), min/max]` for the stalling
/// instance, from the extreme initial preactivations.
pub fn counterexample_ratio_window(max_pre: f64, min_pre: f64, y1: f64) -> (f64, f64) {
    ((8.0 * max_pre / y1).sqrt(), min_pre / max_pre)
}

/// A two-neuron, two-point instance whose second-layer weight can change
/// sign, trapping the flow at a positive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub net: NetworkState,
    pub data: DataSet,
    /// Admissible `λ` range for the drawn weights.
    pub window: (f64, f64),
    /// Guaranteed loss floor `y₂²/4`.
    pub loss_floor: f64,
}

/// Canonical-basis inputs, `y = (y₁, −λ y₁)`, hidden weights uniform on
/// `[0.05, 0.1]` (all gates open) and `a = (δ, −δ)` with `δ` small, so the
/// balance `|a_j| ≥ ‖w_j‖` fails.
pub fn counterexample_instance(delta: f64, y1: f64, lambda: f64, seed: u64) -> Result<Counterexample> {
    if !(delta > 0.0 && y1 > 0.0 && lambda > 0.0) {
        return Err(Error::precondition("delta, y1 and lambda must be positive"));
    }
    let mut rng = seed::rng_for(seed, 5);
    let w = Array2::from_shape_fn((2, 2), |_| rng.random_range(0.05..=0.1));
    let max_pre = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_pre = w.iter().copied().fold(f64::INFINITY, f64::min);
    let window = counterexample_ratio_window(max_pre, min_pre, y1);
    if lambda < window.0 || lambda > window.1 {
        return Err(Error::precondition(format!(
            "lambda {lambda} outside admissible window [{:.4}, {:.4}]",
            window.0, window.1
        )));
    }
    if delta >= min_pre {
        return Err(Error::precondition("delta must be below the smallest hidden weight"));
    }
    let y2 = -lambda * y1;
    let data = DataSet::new(Array2::eye(2), ndarray::array![y1, y2])?.with_meta("counterexample", seed);
    let net = NetworkState::new(ndarray::array![delta, -delta], w)?;
    Ok(Counterexample {
        net,
        data,
        window,
        loss_floor: y2 * y2 / 4.0,
    })
}
