//! Seeded dataset generators and the low-correlation input check.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{offdiag_gram_norm, DataSet};
use crate::{seed, Error, Result};

/// How output magnitudes are drawn for grouped data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroupMagnitudes {
    /// Each `|y_i|` uniform on `[1, 2]`.
    Uniform,
    /// One `|y|` uniform on `[1, 2]` per group, shared by its members.
    PerGroup,
    /// Explicit magnitude for each group.
    Constant(Vec<f64>),
}

/// Partition of the data into `p_n` groups of `k_n` points.
///
/// Datum `i` belongs to group `i / k_n` and every output of group `j`
/// carries the sign `signs[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub p_n: usize,
    pub k_n: usize,
    pub signs: Vec<f64>,
    pub alpha: Option<f64>,
    pub magnitudes: GroupMagnitudes,
}

impl GroupSpec {
    pub fn new(p_n: usize, k_n: usize, signs: Vec<f64>) -> Result<Self> {
        if p_n == 0 || k_n == 0 {
            return Err(Error::config("group spec needs p_n >= 1 and k_n >= 1"));
        }
        if signs.len() != p_n {
            return Err(Error::config(format!(
                "{} signs for {} groups",
                signs.len(),
                p_n
            )));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::config("group signs must be +1 or -1"));
        }
        Ok(GroupSpec {
            p_n,
            k_n,
            signs,
            alpha: None,
            magnitudes: GroupMagnitudes::Uniform,
        })
    }

    /// Signs alternate `+, −, +, …`.
    pub fn alternating(p_n: usize, k_n: usize) -> Result<Self> {
        let signs = (0..p_n)
            .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Self::new(p_n, k_n, signs)
    }

    /// Group size `k_n = round(n^{2(1−α)})`, `p_n = n / k_n`, alternating signs.
    pub fn from_alpha(n: usize, alpha: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha {alpha} outside [1/2, 1]")));
        }
        let k_n = ((n as f64).powf(2.0 * (1.0 - alpha)).round() as usize).max(1);
        if n % k_n != 0 {
            return Err(Error::config(format!(
                "group size {k_n} from alpha {alpha} does not divide n = {n}"
            )));
        }
        let mut spec = Self::alternating(n / k_n, k_n)?;
        spec.alpha = Some(alpha);
        Ok(spec)
    }

    pub fn with_magnitudes(mut self, magnitudes: GroupMagnitudes) -> Result<Self> {
        if let GroupMagnitudes::Constant(m) = &magnitudes {
            if m.len() != self.p_n || m.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config(
                    "constant magnitudes need one positive value per group",
                ));
            }
        }
        self.magnitudes = magnitudes;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.p_n * self.k_n
    }

    pub fn group_of(&self, i: usize) -> usize {
        i / self.k_n
    }

    /// Indices of the data in group `j`.
    pub fn members(&self, j: usize) -> std::ops::Range<usize> {
        j * self.k_n..(j + 1) * self.k_n
    }
}

/// Input/output law of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataKind {
    /// Directions uniform on the sphere, norms and `|y|` uniform on `[1, 2]`.
    WhitenedSphere,
    /// Random orthonormal inputs.
    Orthonormal,
    /// Random orthogonal inputs with norms uniform on `[1, 2]`.
    OrthogonalScaled,
    /// Signed canonical basis vectors with group-structured outputs.
    Grouped(GroupSpec),
}

impl DataKind {
    pub fn label(&self) -> &'static str {
        match self {
            DataKind::WhitenedSphere => "whitened-sphere",
            DataKind::Orthonormal => "orthonormal",
            DataKind::OrthogonalScaled => "orthogonal-scaled",
            DataKind::Grouped(_) => "grouped",
        }
    }

    /// Parses the labels of the non-grouped kinds.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whitened-sphere" | "sphere" => Ok(DataKind::WhitenedSphere),
            "orthonormal" => Ok(DataKind::Orthonormal),
            "orthogonal-scaled" => Ok(DataKind::OrthogonalScaled),
            _ => Err(Error::config(format!("unknown data kind '{s}'"))),
        }
    }

    pub fn is_orthogonal(&self) -> bool {
        !matches!(self, DataKind::WhitenedSphere)
    }
}

fn uniform_12<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(1.0..=2.0)
}

fn random_sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `d × n` matrix with orthonormal columns: Gaussian columns passed twice
/// through modified Gram–Schmidt, which keeps `|XᵀX − I|` at round-off.
pub fn random_orthonormal<R: Rng>(d: usize, n: usize, rng: &mut R) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((d, n), |_| -> f64 { StandardNormal.sample(rng) });
    for i in 0..n {
        for _pass in 0..2 {
            for k in 0..i {
                let (done, mut rest) = q.view_mut().split_at(Axis(1), i);
                let qk = done.column(k);
                let mut qi = rest.column_mut(0);
                let proj = qk.dot(&qi);
                qi.scaled_add(-proj, &qk);
            }
        }
        let mut qi = q.column_mut(i);
        let nrm = qi.dot(&qi).sqrt();
        qi /= nrm;
    }
    q
}

/// Draws a dataset of the given kind, bitwise reproducible from `seed`.
pub fn generate(kind: &DataKind, d: usize, n: usize, seed: u64) -> Result<DataSet> {
    if d == 0 || n == 0 {
        return Err(Error::config("data generation needs d >= 1 and n >= 1"));
    }
    if kind.is_orthogonal() && n > d {
        return Err(Error::config(format!(
            "orthogonal data needs n <= d, got n = {n}, d = {d}"
        )));
    }
    let mut rng = seed::rng_for(seed, 1);
    let (x, y) = match kind {
        DataKind::WhitenedSphere => {
            let mut x = Array2::from_shape_fn((d, n), |_| -> f64 { StandardNormal.sample(&mut rng) });
            for mut col in x.columns_mut() {
                let nrm = col.dot(&col).sqrt();
                col *= uniform_12(&mut rng) / nrm;
            }
            let y = Array1::from_shape_fn(n, |_| random_sign(&mut rng) * uniform_12(&mut rng));
            (x, y)
        }
        DataKind::Orthonormal | DataKind::OrthogonalScaled => {
            let mut x = random_orthonormal(d, n, &mut rng);
            if matches!(kind, DataKind::OrthogonalScaled) {
                for mut col in x.columns_mut() {
                    col *= uniform_12(&mut rng);
                }
            }
            let y = Array1::from_shape_fn(n, |_| random_sign(&mut rng) * uniform_12(&mut rng));
            (x, y)
        }
        DataKind::Grouped(spec) => {
            if spec.n() != n {
                return Err(Error::config(format!(
                    "group spec covers {} points, requested n = {n}",
                    spec.n()
                )));
            }
            // Signed coordinate vectors keep cross-group inner products
            // exactly zero in floating point.
            let mut coords: Vec<usize> = (0..d).collect();
            coords.shuffle(&mut rng);
            let mut x = Array2::zeros((d, n));
            for i in 0..n {
                x[(coords[i], i)] = random_sign(&mut rng);
            }
            let group_mag: Vec<f64> = match &spec.magnitudes {
                GroupMagnitudes::Constant(m) => m.clone(),
                GroupMagnitudes::PerGroup => (0..spec.p_n).map(|_| uniform_12(&mut rng)).collect(),
                GroupMagnitudes::Uniform => Vec::new(),
            };
            let y = Array1::from_shape_fn(n, |i| {
                let j = spec.group_of(i);
                let m = if group_mag.is_empty() {
                    uniform_12(&mut rng)
                } else {
                    group_mag[j]
                };
                spec.signs[j] * m
            });
            (x, y)
        }
    };
    Ok(DataSet::new(x, y)?.with_meta(kind.label(), seed))
}

/// Right-hand side of the low-correlation condition,
/// `(C_x⁻)² / (2√n) · C_y⁻ / C_y⁺`.
pub fn low_correlation_threshold(data: &DataSet) -> f64 {
    data.cx_min().powi(2) / (2.0 * (data.n() as f64).sqrt()) * data.cy_min() / data.cy_max()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowCorrelationReport {
    pub holds: bool,
    pub norm: f64,
    pub threshold: f64,
    /// `threshold − norm`; positive when the condition holds.
    pub margin: f64,
}

/// Checks `‖XᵀX − D_X‖ < threshold` (strict).
pub fn check_low_correlation(data: &DataSet) -> LowCorrelationReport {
    let norm = offdiag_gram_norm(data);
    let threshold = low_correlation_threshold(data);
    LowCorrelationReport {
        holds: norm < threshold,
        norm,
        threshold,
        margin: threshold - norm,
    }
}

/// Writes the dataset as CSV: a header row `d,n,kind,seed` carrying the
/// values, then one row per point (x components, then y) in `{:.16e}`.
pub fn write_dataset<W: Write>(data: &DataSet, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let map = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record([
        data.d().to_string(),
        data.n().to_string(),
        data.kind.clone(),
        data.seed.to_string(),
    ])
    .map_err(map)?;
    for i in 0..data.n() {
        let row = data
            .x(i)
            .iter()
            .chain(std::iter::once(&data.outputs()[i]))
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>();
        w.write_record(&row).map_err(map)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<DataSet> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = r.records();
    let bad = |m: &str| Error::Parse(format!("dataset csv: {m}"));
    let head = records
        .next()
        .ok_or_else(|| bad("empty file"))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    if head.len() != 4 {
        return Err(bad("header must be d,n,kind,seed"));
    }
    let d: usize = head[0].parse().map_err(|_| bad("d"))?;
    let n: usize = head[1].parse().map_err(|_| bad("n"))?;
    let kind = head[2].to_string();
    let seed: u64 = head[3].parse().map_err(|_| bad("seed"))?;
    let mut x = Array2::zeros((d, n));
    let mut y = Array1::zeros(n);
    let mut count = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if i >= n || rec.len() != d + 1 {
            return Err(bad(&format!("row {i} has wrong shape")));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| bad("number"))?;
            if k < d {
                x[(k, i)] = v;
            } else {
                y[i] = v;
            }
        }
        count += 1;
    }
    if count != n {
        return Err(bad(&format!("expected {n} rows, found {count}")));
    }
    Ok(DataSet::new(x, y)?.with_meta(kind, seed))
}

pub fn save_dataset(data: &DataSet, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(data, std::io::BufWriter::new(f))
}

pub fn load_dataset(path: &Path) -> Result<DataSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthonormal_is_exact() {
        let data = generate(&DataKind::Orthonormal, 40, 30, 3).unwrap();
        assert!((data.cx_min() - 1.0).abs() < 1e-14);
        assert!((data.cx_max() - 1.0).abs() < 1e-14);
        let mut g = data.gram();
        g.diag_mut().fill(0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!(offdiag_gram_norm(&data) < 1e-12);
    }

    #[test]
    fn sphere_supports_are_bounded() {
        for s in 0..5 {
            let data = generate(&DataKind::WhitenedSphere, 7, 20, s).unwrap();
            assert!(data.cx_min() >= 1.0 - 1e-12 && data.cx_max() <= 2.0 + 1e-12);
            assert!(data.cy_min() >= 1.0 && data.cy_max() <= 2.0);
        }
    }

    #[test]
    fn orthogonal_kinds_reject_n_above_d() {
        assert!(generate(&DataKind::Orthonormal, 3, 4, 0).is_err());
        assert!(generate(&DataKind::OrthogonalScaled, 3, 4, 0).is_err());
    }

    #[test]
    fn grouped_signs_follow_group_spec() {
        let spec = GroupSpec::new(3, 4, vec![1.0, -1.0, -1.0]).unwrap();
        let data = generate(&DataKind::Grouped(spec.clone()), 16, 12, 9).unwrap();
        for i in 0..12 {
            assert_eq!(data.outputs()[i].signum(), spec.signs[spec.group_of(i)]);
        }
        assert_eq!(offdiag_gram_norm(&data), 0.0);
    }

    #[test]
    fn alpha_sets_group_size() {
        let s = GroupSpec::from_alpha(256, 1.0).unwrap();
        assert_eq!((s.p_n, s.k_n), (256, 1));
        let s = GroupSpec::from_alpha(16, 0.75).unwrap();
        assert_eq!((s.p_n, s.k_n), (4, 4));
        assert!(GroupSpec::from_alpha(10, 0.75).is_err());
    }

    #[test]
    fn threshold_examples() {
        let data = DataSet::new(
            Array2::eye(4),
            array![1.0, 2.0, -1.0, 1.5],
        )
        .unwrap();
        assert_eq!(low_correlation_threshold(&data), 0.125);
        let one = DataSet::new(array![[1.0]], array![1.0]).unwrap();
        assert_eq!(low_correlation_threshold(&one), 0.5);
        let two = DataSet::new(array![[2.0]], array![1.0]).unwrap();
        assert_eq!(low_correlation_threshold(&two), 2.0);
    }

    #[test]
    fn correlated_pair_fails_check() {
        let c: f64 = 0.6;
        let x = array![[1.0, c], [0.0, 0.8], [0.0, 0.0], [0.0, 0.0]];
        let x = ndarray::concatenate![Axis(1), x, array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]];
        let data = DataSet::new(x, array![1.0, 2.0, 1.0, 1.0]).unwrap();
        let rep = check_low_correlation(&data);
        assert_eq!(rep.threshold, 0.125);
        assert!(!rep.holds);
        assert!((rep.norm - 0.6).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let data = generate(&DataKind::WhitenedSphere, 5, 8, 11).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("5,8,whitened-sphere,11\n"));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&DataKind::OrthogonalScaled, 9, 6, 5).unwrap();
        let b = generate(&DataKind::OrthogonalScaled, 9, 6, 5).unwrap();
        assert_eq!(a, b);
    }
}
