//! Curve fits used by the sweeps: decreasing sigmoid, least-squares line
//! and Spearman rank correlation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `P(n) = 1/(1 + exp((n − midpoint)/width))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub midpoint: f64,
    pub width: f64,
    /// Sum of squared residuals at the optimum.
    pub sse: f64,
    /// Midpoint outside the sampled range.
    pub extrapolated: bool,
}

pub fn sigmoid(n: f64, midpoint: f64, width: f64) -> f64 {
    let z = (n - midpoint) / width;
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn sse(ns: &[f64], ps: &[f64], m: f64, s: f64) -> f64 {
    ns.iter()
        .zip(ps)
        .map(|(&n, &p)| (sigmoid(n, m, s) - p).powi(2))
        .sum()
}

/// Least-squares fit of a decreasing sigmoid (Levenberg–Marquardt on
/// midpoint and log-width). Needs at least four points, one above 0.8 and
/// one below 0.2.
pub fn fit_sigmoid(ns: &[f64], ps: &[f64]) -> Result<SigmoidFit> {
    if ns.len() != ps.len() {
        return Err(Error::FitRefused("length mismatch".into()));
    }
    if ns.len() < 4 {
        return Err(Error::FitRefused(format!("{} points, need at least 4", ns.len())));
    }
    let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > 0.8 && lo < 0.2) {
        return Err(Error::FitRefused(format!(
            "probabilities span [{lo:.3}, {hi:.3}], need values above 0.8 and below 0.2"
        )));
    }
    let nmin = ns.iter().copied().fold(f64::INFINITY, f64::min);
    let nmax = ns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (nmax - nmin).max(f64::MIN_POSITIVE);

    // Start at the linear-interpolated half crossing of the sorted data.
    let mut order: Vec<usize> = (0..ns.len()).collect();
    order.sort_by(|&a, &b| ns[a].total_cmp(&ns[b]));
    let mut m = 0.5 * (nmin + nmax);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if ps[a] >= 0.5 && ps[b] < 0.5 {
            m = ns[a] + (ps[a] - 0.5) / (ps[a] - ps[b]) * (ns[b] - ns[a]);
            break;
        }
    }
    let mut ls = (span / 10.0).ln();
    let mut lambda = 1e-3;
    let mut cur = sse(ns, ps, m, ls.exp());
    for _ in 0..500 {
        let s = ls.exp();
        // Jacobian of the model with respect to (m, log s).
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&n, &p) in ns.iter().zip(ps) {
            let f = sigmoid(n, m, s);
            let g = f * (1.0 - f);
            let dm = g / s;
            let dls = g * (n - m) / s;
            let r = p - f;
            jtj[0][0] += dm * dm;
            jtj[0][1] += dm * dls;
            jtj[1][1] += dls * dls;
            jtr[0] += dm * r;
            jtr[1] += dls * r;
        }
        jtj[1][0] = jtj[0][1];
        let mut improved = false;
        for _ in 0..30 {
            let a00 = jtj[0][0] * (1.0 + lambda);
            let a11 = jtj[1][1] * (1.0 + lambda);
            let det = a00 * a11 - jtj[0][1] * jtj[1][0];
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let dm = (a11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
            let dls = (a00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
            let (nm, nls) = (m + dm, ls + dls.clamp(-2.0, 2.0));
            let new = sse(ns, ps, nm, nls.exp());
            if new.is_finite() && new <= cur {
                let done = (cur - new) <= 1e-15 * (1.0 + cur) && dm.abs() <= 1e-12 * (1.0 + m.abs());
                m = nm;
                ls = nls;
                cur = new;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if done {
                    return Ok(finish(m, ls, cur, nmin, nmax));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(finish(m, ls, cur, nmin, nmax))
}

fn finish(m: f64, ls: f64, sse: f64, nmin: f64, nmax: f64) -> SigmoidFit {
    SigmoidFit {
        midpoint: m,
        width: ls.exp(),
        sse,
        extrapolated: m < nmin || m > nmax,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope · x + intercept`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::FitRefused("regression needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::FitRefused("regression needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Slope of `log y` against `log x`.
pub fn loglog_regression(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::FitRefused("log-log regression needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_regression(&lx, &ly)
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::FitRefused("rank correlation needs at least two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::FitRefused("rank correlation of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
