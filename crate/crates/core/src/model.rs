//! Datasets, network parameters and the p-accelerated gradient flow.
//!
//! Inputs are stored column-wise (`d × n`), hidden weights row-wise
//! (`p × d`), so the preactivation matrix is `Z = W X` with shape `p × n`.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Result};

/// Training set with cached norm bounds on inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    inputs: Array2<f64>,
    outputs: Array1<f64>,
    col_sq_norms: Array1<f64>,
    cx_min: f64,
    cx_max: f64,
    cy_min: f64,
    cy_max: f64,
    /// Generator label written to CSV headers (`custom` for hand-built data).
    pub kind: String,
    pub seed: u64,
}

impl DataSet {
    /// Builds a dataset from a `d × n` input matrix and `n` outputs.
    ///
    /// Every input column and every output must be nonzero and finite.
    pub fn new(inputs: Array2<f64>, outputs: Array1<f64>) -> Result<Self> {
        let (d, n) = inputs.dim();
        if d == 0 || n == 0 {
            return Err(Error::config("dataset needs d >= 1 and n >= 1"));
        }
        if outputs.len() != n {
            return Err(Error::config(format!(
                "{} outputs for {} input columns",
                outputs.len(),
                n
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite values"));
        }
        let col_sq_norms = inputs.map_axis(Axis(0), |c| c.dot(&c));
        let (cx_min, cx_max) = min_max(col_sq_norms.iter().map(|s| s.sqrt()));
        let (cy_min, cy_max) = min_max(outputs.iter().map(|y| y.abs()));
        if cx_min <= 0.0 {
            return Err(Error::config("every input must have positive norm"));
        }
        if cy_min <= 0.0 {
            return Err(Error::config("every output must be nonzero"));
        }
        Ok(DataSet {
            inputs,
            outputs,
            col_sq_norms,
            cx_min,
            cx_max,
            cy_min,
            cy_max,
            kind: "custom".into(),
            seed: 0,
        })
    }

    pub fn with_meta(mut self, kind: impl Into<String>, seed: u64) -> Self {
        self.kind = kind.into();
        self.seed = seed;
        self
    }

    pub fn d(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n(&self) -> usize {
        self.inputs.ncols()
    }

    /// The `d × n` input matrix.
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &Array1<f64> {
        &self.outputs
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.column(i)
    }

    /// Diagonal of the Gram matrix, `‖x_i‖²`.
    pub fn sq_norms(&self) -> &Array1<f64> {
        &self.col_sq_norms
    }

    pub fn cx_min(&self) -> f64 {
        self.cx_min
    }

    pub fn cx_max(&self) -> f64 {
        self.cx_max
    }

    pub fn cy_min(&self) -> f64 {
        self.cy_min
    }

    pub fn cy_max(&self) -> f64 {
        self.cy_max
    }

    /// Full `n × n` Gram matrix `XᵀX`.
    pub fn gram(&self) -> Array2<f64> {
        self.inputs.t().dot(&self.inputs)
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Second-layer weights `a` (length p) and hidden weights `w` (p × d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub a: Array1<f64>,
    pub w: Array2<f64>,
}

impl NetworkState {
    pub fn new(a: Array1<f64>, w: Array2<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::config("network needs p >= 1"));
        }
        if a.len() != w.nrows() {
            return Err(Error::config(format!(
                "{} output weights for {} hidden rows",
                a.len(),
                w.nrows()
            )));
        }
        if a.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("network contains non-finite weights"));
        }
        Ok(NetworkState { a, w })
    }

    /// Like [`NetworkState::new`] but also enforces `|a_j| ≥ ‖w_j‖`.
    pub fn new_asymmetric(a: Array1<f64>, w: Array2<f64>) -> Result<Self> {
        let net = Self::new(a, w)?;
        if let Some(j) = (0..net.p()).find(|&j| net.a[j].abs() < net.w_norm(j)) {
            return Err(Error::config(format!(
                "neuron {j} has |a| < |w|, violating the asymmetric initialization"
            )));
        }
        Ok(net)
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn w_norm(&self, j: usize) -> f64 {
        let r = self.w.row(j);
        r.dot(&r).sqrt()
    }

    pub fn w_norms(&self) -> Array1<f64> {
        self.w.map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    /// Per-neuron conserved quantity `a_j² − ‖w_j‖²`.
    pub fn balance(&self) -> Array1<f64> {
        Zip::from(&self.a)
            .and(self.w.rows())
            .map_collect(|a, r| a * a - r.dot(&r))
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.w.iter()).all(|v| v.is_finite())
    }

    fn check(&self, data: &DataSet) -> Result<()> {
        if self.d() != data.d() {
            return Err(Error::config(format!(
                "network input dimension {} does not match data dimension {}",
                self.d(),
                data.d()
            )));
        }
        Ok(())
    }

    /// `Z = W X`, shape `p × n`.
    pub fn preactivations(&self, data: &DataSet) -> Result<Array2<f64>> {
        self.check(data)?;
        Ok(self.w.dot(data.inputs()))
    }
}

/// Strict ReLU gates: entry `(j, i)` is set iff `⟨w_j|x_i⟩ > 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    bits: Array2<bool>,
}

impl ActivationPattern {
    pub fn from_preactivations(z: &Array2<f64>) -> Self {
        ActivationPattern {
            bits: z.mapv(|v| v > 0.0),
        }
    }

    pub fn new(net: &NetworkState, data: &DataSet) -> Result<Self> {
        Ok(Self::from_preactivations(&net.preactivations(data)?))
    }

    pub fn get(&self, j: usize, i: usize) -> bool {
        self.bits[(j, i)]
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    /// Number of active neurons on each datum.
    pub fn active_per_datum(&self) -> Vec<usize> {
        self.bits
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&b| b).count())
            .collect()
    }

    /// Number of gates that differ between two patterns.
    pub fn flips(&self, other: &ActivationPattern) -> usize {
        Zip::from(&self.bits)
            .and(&other.bits)
            .fold(0, |acc, a, b| acc + usize::from(a != b))
    }
}

/// Time derivatives of `(a, w)` under the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub da: Array1<f64>,
    pub dw: Array2<f64>,
}

impl Velocity {
    /// `Σ_j ‖ẇ_j‖² + ȧ_j²`.
    pub fn sq_norm(&self) -> f64 {
        self.da.dot(&self.da) + self.dw.iter().map(|v| v * v).sum::<f64>()
    }
}

fn forward_from_z(a: &Array1<f64>, z: &Array2<f64>) -> Array1<f64> {
    let p = a.len() as f64;
    z.mapv(|v| v.max(0.0)).t().dot(a) / p
}

/// Network output `h(x_i) = (1/p) Σ_j a_j max(0, ⟨w_j|x_i⟩)` for every datum.
pub fn forward(net: &NetworkState, data: &DataSet) -> Result<Array1<f64>> {
    let z = net.preactivations(data)?;
    Ok(forward_from_z(&net.a, &z))
}

/// Residuals `r_i = y_i − h(x_i)`.
pub fn residuals(net: &NetworkState, data: &DataSet) -> Result<Array1<f64>> {
    Ok(data.outputs() - &forward(net, data)?)
}

/// Mean squared loss `(1/2n) Σ r_i²`.
pub fn loss(net: &NetworkState, data: &DataSet) -> Result<f64> {
    Ok(loss_of_residuals(&residuals(net, data)?))
}

pub fn loss_of_residuals(r: &Array1<f64>) -> f64 {
    r.dot(r) / (2.0 * r.len() as f64)
}

/// Everything the integrator needs from one evaluation of the field.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub preactivations: Array2<f64>,
    pub residuals: Array1<f64>,
    pub velocity: Velocity,
}

/// Evaluates residuals and flow velocities in one pass over `Z = W X`.
pub fn evaluate(net: &NetworkState, data: &DataSet) -> Result<FieldEval> {
    let z = net.preactivations(data)?;
    let gates = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let (r, velocity) = gated_field(net, data, &z, &gates);
    Ok(FieldEval {
        preactivations: z,
        residuals: r,
        velocity,
    })
}

/// The field of the network whose units are linear on the `gates` pattern
/// (`relu(z)` replaced by `g z`). It agrees with the flow while the pattern
/// holds and conserves every `a_j² − ‖w_j‖²` exactly.
fn gated_field(net: &NetworkState, data: &DataSet, z: &Array2<f64>, gates: &Array2<f64>) -> (Array1<f64>, Velocity) {
    let n = data.n() as f64;
    let p = net.p() as f64;
    let r = data.outputs() - &((z * gates).t().dot(&net.a) / p);
    // Gated residuals: entry (j, i) = g_{j,i} r_i.
    let gr = gates * &r.view().insert_axis(Axis(0));
    let da = Zip::from(z.rows())
        .and(gr.rows())
        .map_collect(|zr, g| zr.iter().zip(g).map(|(z, g)| z * g).sum::<f64>() / n);
    let mut dw = gr.dot(&data.inputs().t());
    Zip::from(dw.rows_mut()).and(&net.a).for_each(|mut row, &a| row *= a / n);
    (r, Velocity { da, dw })
}

/// Velocity with the activation pattern held at `gates` (entries 0 or 1).
pub fn velocity_with_gates(net: &NetworkState, data: &DataSet, gates: &Array2<f64>) -> Result<Velocity> {
    let z = net.preactivations(data)?;
    if gates.dim() != z.dim() {
        return Err(Error::config("gate pattern shape does not match p × n"));
    }
    Ok(gated_field(net, data, &z, gates).1)
}

/// The p-accelerated flow: `ẇ_j = (a_j/n) X P_j R`, `ȧ_j = (1/n) w_jᵀ X P_j R`.
pub fn velocity_field(net: &NetworkState, data: &DataSet) -> Result<Velocity> {
    Ok(evaluate(net, data)?.velocity)
}

/// Symmetric PSD matrix `M` with `dR/dt = −(1/n) M R`:
/// `M = (1/p) Σ_j [P_j Xᵀ w_j w_jᵀ X P_j + a_j² P_j XᵀX P_j]`.
pub fn residual_operator(net: &NetworkState, data: &DataSet) -> Result<Array2<f64>> {
    residual_operator_with_gram(net, data, &data.gram())
}

/// [`residual_operator`] with a precomputed Gram matrix `XᵀX`.
pub fn residual_operator_with_gram(
    net: &NetworkState,
    data: &DataSet,
    gram: &Array2<f64>,
) -> Result<Array2<f64>> {
    let z = net.preactivations(data)?;
    let relu = z.mapv(|v| v.max(0.0));
    let gates = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut scaled = gates.clone();
    Zip::from(scaled.rows_mut())
        .and(&net.a)
        .for_each(|mut row, &a| row *= a * a);
    let p = net.p() as f64;
    let mut m = gates.t().dot(&scaled) * gram;
    m += &relu.t().dot(&relu);
    m /= p;
    // Symmetrize away round-off from the two products.
    let mt = m.t().to_owned();
    Ok((&m + &mt) * 0.5)
}

/// Operator norm `‖XᵀX − D_X‖` of the off-diagonal Gram matrix.
pub fn offdiag_gram_norm(data: &DataSet) -> f64 {
    let n = data.n();
    if n == 1 {
        return 0.0;
    }
    let mut g = data.gram();
    g.diag_mut().fill(0.0);
    linalg::sym_operator_norm(&g, 1e-10, (10 * n).max(200))
}
