//! Network initializers and the good-initialization event.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, DataKind, GroupSpec};
use crate::model::{offdiag_gram_norm, DataSet, NetworkState};
use crate::{parallel, seed, Error, Result};

/// Relation between `|a_j|` and `‖w_j‖` at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// `|a_j| − ‖w_j‖ ~ Exp(1)`, so `|a_j| > ‖w_j‖` almost surely.
    Asymmetric,
    /// `|a_j| = ‖w_j‖`.
    Symmetric,
}

impl InitMode {
    pub fn label(self) -> &'static str {
        match self {
            InitMode::Asymmetric => "asymmetric",
            InitMode::Symmetric => "symmetric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asymmetric" => Ok(InitMode::Asymmetric),
            "symmetric" => Ok(InitMode::Symmetric),
            _ => Err(Error::config(format!("unknown init mode '{s}'"))),
        }
    }
}

/// `w_j ~ N(0, I/d)`, `sign(a_j)` uniform, magnitude set by `mode`.
pub fn init_standard(p: usize, d: usize, mode: InitMode, seed: u64) -> Result<NetworkState> {
    if p == 0 || d == 0 {
        return Err(Error::config("initialization needs p >= 1 and d >= 1"));
    }
    let mut rng = seed::rng_for(seed, 2);
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = Array2::zeros((p, d));
    let mut a = Array1::zeros(p);
    for j in 0..p {
        let mut row = w.row_mut(j);
        row.iter_mut()
            .for_each(|v| *v = scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let nrm = row.dot(&row).sqrt();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mag = match mode {
            InitMode::Asymmetric => nrm + Distribution::<f64>::sample(&Exp1, &mut rng),
            InitMode::Symmetric => nrm,
        };
        a[j] = sign * mag;
    }
    NetworkState::new(a, w)
}

/// One neuron per group, active exactly on its own group.
///
/// `w_j` is a positive combination of the normalized inputs of group `j`
/// (coefficients `|N(0,1)|`, then `‖w_j‖ = 1`) and `a_j = s_j ‖w_j‖`.
pub fn init_group(data: &DataSet, spec: &GroupSpec, seed: u64) -> Result<NetworkState> {
    if spec.n() != data.n() {
        return Err(Error::config(format!(
            "group spec covers {} points, data has {}",
            spec.n(),
            data.n()
        )));
    }
    let tol = 1e-10 * data.cx_max().powi(2);
    if offdiag_gram_norm(data) > tol {
        return Err(Error::config("group initialization needs orthogonal inputs"));
    }
    let mut rng = seed::rng_for(seed, 3);
    let d = data.d();
    let sq = data.sq_norms();
    let mut w = Array2::zeros((spec.p_n, d));
    for j in 0..spec.p_n {
        let mut row = w.row_mut(j);
        for i in spec.members(j) {
            let c: f64 = StandardNormal.sample(&mut rng);
            // Resample the (measure-zero) exact zero so every gate is open.
            let c = if c == 0.0 { 1.0 } else { c.abs() };
            row.scaled_add(c / sq[i].sqrt(), &data.x(i));
        }
        let nrm = row.dot(&row).sqrt();
        row /= nrm;
        // Rotated orthonormal inputs leave round-off sized inner products
        // with other groups. Push any that is not clearly negative to a small
        // negative margin so the gate stays shut under later round-off.
        // Exact zeros (coordinate data) are already shut and left alone.
        for _pass in 0..4 {
            let mut clean = true;
            for i in (0..data.n()).filter(|&i| spec.group_of(i) != j) {
                let margin = 1e-14 * sq[i].sqrt();
                let z = row.dot(&data.x(i));
                if z > -0.5 * margin && z != 0.0 {
                    clean = false;
                    row.scaled_add(-(z + margin) / sq[i], &data.x(i));
                }
            }
            if clean {
                break;
            }
        }
    }
    let a = Array1::from_shape_fn(spec.p_n, |j| {
        let r = w.row(j);
        spec.signs[j] * r.dot(&r).sqrt()
    });
    NetworkState::new(a, w)
}

/// True iff every datum has a neuron with `⟨w_j|x_i⟩ > 0` and `a_j y_i > 0`.
pub fn good_init_event(net: &NetworkState, data: &DataSet) -> Result<bool> {
    let z = net.preactivations(data)?;
    let y = data.outputs();
    Ok((0..data.n()).all(|i| (0..net.p()).any(|j| z[(j, i)] > 0.0 && net.a[j] * y[i] > 0.0)))
}

/// `1 − n (3/4)^p`, the lower bound on the good-initialization probability.
pub fn good_init_lower_bound(n: usize, p: usize) -> f64 {
    1.0 - n as f64 * 0.75f64.powi(p as i32)
}

/// Neuron count `⌊ln(n/ε)/ln(4/3)⌋ + 1` that makes the lower bound exceed `1 − ε`.
pub fn recommended_p(n: usize, epsilon: f64) -> Result<usize> {
    if n == 0 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config(format!(
            "recommended_p needs n >= 1 and 0 < epsilon < 1, got n = {n}, epsilon = {epsilon}"
        )));
    }
    let v = ((n as f64 / epsilon).ln() / (4.0f64 / 3.0).ln()).floor();
    Ok(v.max(0.0) as usize + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Normal-approximation 95% half-width.
    pub half_width: f64,
    pub trials: usize,
}

impl ProbabilityEstimate {
    pub fn from_counts(successes: usize, trials: usize) -> Self {
        let t = trials as f64;
        let p = successes as f64 / t;
        let se = (p * (1.0 - p) / t).sqrt();
        ProbabilityEstimate {
            estimate: p,
            std_error: se,
            half_width: 1.96 * se,
            trials,
        }
    }
}

/// Monte-Carlo frequency of the good-initialization event, each trial
/// drawing fresh sphere data and a fresh asymmetric initialization.
pub fn estimate_good_init_prob(
    d: usize,
    n: usize,
    p: usize,
    trials: usize,
    master_seed: u64,
) -> Result<ProbabilityEstimate> {
    if trials == 0 {
        return Err(Error::config("trials must be >= 1"));
    }
    let hits = parallel::map_trials(trials, |t| -> Result<bool> {
        let s = seed::derive(master_seed, t as u64);
        let data = data::generate(&DataKind::WhitenedSphere, d, n, s)?;
        let net = init_standard(p, d, InitMode::Asymmetric, s)?;
        good_init_event(&net, &data)
    });
    let mut count = 0;
    for h in hits {
        count += usize::from(h?);
    }
    Ok(ProbabilityEstimate::from_counts(count, trials))
}

/// Writes a state as CSV: header row `p,d` with values, then one row per
/// neuron (`a_j`, then the components of `w_j`) in `{:.16e}`.
pub fn write_state<W: Write>(net: &NetworkState, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let map = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record([net.p().to_string(), net.d().to_string()])
        .map_err(map)?;
    for j in 0..net.p() {
        let row = std::iter::once(&net.a[j])
            .chain(net.w.row(j).iter())
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>();
        w.write_record(&row).map_err(map)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_state<R: Read>(input: R) -> Result<NetworkState> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let bad = |m: &str| Error::Parse(format!("state csv: {m}"));
    let mut records = r.records();
    let head = records
        .next()
        .ok_or_else(|| bad("empty file"))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    if head.len() != 2 {
        return Err(bad("header must be p,d"));
    }
    let p: usize = head[0].parse().map_err(|_| bad("p"))?;
    let d: usize = head[1].parse().map_err(|_| bad("d"))?;
    let mut a = Array1::zeros(p);
    let mut w = Array2::zeros((p, d));
    let mut count = 0;
    for (j, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if j >= p || rec.len() != d + 1 {
            return Err(bad(&format!("row {j} has wrong shape")));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| bad("number"))?;
            if k == 0 {
                a[j] = v;
            } else {
                w[(j, k - 1)] = v;
            }
        }
        count += 1;
    }
    if count != p {
        return Err(bad(&format!("expected {p} rows, found {count}")));
    }
    NetworkState::new(a, w)
}

pub fn save_state(net: &NetworkState, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_state(net, std::io::BufWriter::new(f))
}

pub fn load_state(path: &Path) -> Result<NetworkState> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_state(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::model::ActivationPattern;
    use ndarray::array;

    #[test]
    fn recommended_p_examples() {
        assert_eq!(recommended_p(3000, 0.05).unwrap(), 39);
        assert_eq!(recommended_p(1, 0.5).unwrap(), 3);
        assert_eq!(recommended_p(64, 0.05).unwrap(), 25);
        let mut last = 0;
        for n in 1..2000 {
            let p = recommended_p(n, 0.05).unwrap();
            assert!(p >= last);
            last = p;
        }
        assert!(recommended_p(0, 0.05).is_err());
        assert!(recommended_p(10, 1.0).is_err());
    }

    #[test]
    fn modes_respect_balance() {
        for s in 0..20 {
            let net = init_standard(8, 5, InitMode::Asymmetric, s).unwrap();
            assert!((0..8).all(|j| net.a[j].abs() > net.w_norm(j)));
            let net = init_standard(8, 5, InitMode::Symmetric, s).unwrap();
            assert!(net.balance().iter().all(|b| b.abs() < 1e-15));
        }
    }

    #[test]
    fn group_init_is_block_diagonal() {
        for kind_seed in 0..3 {
            let spec = GroupSpec::new(3, 4, vec![1.0, -1.0, 1.0]).unwrap();
            let data = generate(&DataKind::Grouped(spec.clone()), 20, 12, kind_seed).unwrap();
            let net = init_group(&data, &spec, 5).unwrap();
            let pat = ActivationPattern::new(&net, &data).unwrap();
            for j in 0..3 {
                for i in 0..12 {
                    assert_eq!(pat.get(j, i), spec.group_of(i) == j);
                }
            }
            assert!(net.balance().iter().all(|b| b.abs() < 1e-15));
            assert!(good_init_event(&net, &data).unwrap());
        }
    }

    #[test]
    fn group_init_shuts_cross_gates_on_rotated_data() {
        let spec = GroupSpec::new(4, 8, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let data = generate(&DataKind::Orthonormal, 40, 32, 1).unwrap();
        let net = init_group(&data, &spec, 2).unwrap();
        let pat = ActivationPattern::new(&net, &data).unwrap();
        for j in 0..4 {
            for i in 0..32 {
                assert_eq!(pat.get(j, i), spec.group_of(i) == j);
            }
        }
    }

    #[test]
    fn group_init_rejects_correlated_data() {
        let spec = GroupSpec::new(2, 2, vec![1.0, -1.0]).unwrap();
        let data = generate(&DataKind::WhitenedSphere, 10, 4, 0).unwrap();
        assert!(init_group(&data, &spec, 0).is_err());
    }

    #[test]
    fn sign_mismatch_is_not_good() {
        let data = DataSet::new(array![[1.0]], array![-1.0]).unwrap();
        let net = NetworkState::new(array![1.0], array![[1.0]]).unwrap();
        assert!(!good_init_event(&net, &data).unwrap());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(estimate_good_init_prob(5, 5, 5, 0, 0).is_err());
    }

    #[test]
    fn state_csv_round_trip() {
        let net = init_standard(4, 3, InitMode::Asymmetric, 17).unwrap();
        let mut buf = Vec::new();
        write_state(&net, &mut buf).unwrap();
        assert_eq!(read_state(buf.as_slice()).unwrap(), net);
    }
}
