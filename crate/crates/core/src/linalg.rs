//! Small dense linear-algebra helpers.

use ndarray::{Array1, Array2, ArrayView1};

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Operator norm (largest absolute eigenvalue) of a symmetric matrix.
///
/// Power iteration with the estimate `‖S v‖`. That estimate is
/// nondecreasing for symmetric `S` and converges even when `±λ` are both
/// extremal, where the iterate itself oscillates. Starts from the
/// normalized all-ones vector so results are reproducible; stops when
/// successive estimates agree to relative tolerance `tol` or after
/// `max_iter` products.
pub fn sym_operator_norm(s: &Array2<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = s.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    let mut restarted = false;
    for _ in 0..max_iter {
        let sv = s.dot(&v);
        let new = norm(sv.view());
        if new == 0.0 {
            if restarted || s.iter().all(|&x| x == 0.0) {
                return est;
            }
            // All-ones start fell in the kernel: retry from a ramp.
            restarted = true;
            v = Array1::from_shape_fn(n, |i| 1.0 + i as f64);
            let nv = norm(v.view());
            v /= nv;
            continue;
        }
        v = sv / new;
        if (new - est).abs() <= tol * new {
            return new;
        }
        est = new;
    }
    est
}

/// Classical Rayleigh quotient `vᵀ S v / vᵀ v`.
pub fn rayleigh(s: &Array2<f64>, v: &Array1<f64>) -> f64 {
    let vv = v.dot(v);
    if vv == 0.0 {
        return 0.0;
    }
    v.dot(&s.dot(v)) / vv
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn symmetric_pair_has_norm_c() {
        let s = array![[0.0, 0.3], [0.3, 0.0]];
        assert!((sym_operator_norm(&s, 1e-12, 100) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn diagonal_picks_largest_magnitude() {
        let s = array![[1.0, 0.0, 0.0], [0.0, -4.0, 0.0], [0.0, 0.0, 2.0]];
        assert!((sym_operator_norm(&s, 1e-12, 1000) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn start_vector_in_kernel() {
        let s = array![[1.0, -1.0], [-1.0, 1.0]];
        assert!((sym_operator_norm(&s, 1e-12, 100) - 2.0).abs() < 1e-12);
    }
}
