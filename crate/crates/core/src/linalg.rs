//! Small dense helpers shared by the projection, network audit and
//! contraction diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest singular value via a full SVD.
pub fn max_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .map(|svd| svd.singular_values.max())
        .unwrap_or_else(|| power_iteration_max_sv(a, 1e-15, 10_000))
}

/// All singular values, sorted descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let svd = a
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Independent of the SVD path; used as its cross-check.
pub fn power_iteration_max_sv(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let cols = a.ncols();
    if cols == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let ata = a.transpose() * a;
    // Deterministic start with no exact symmetry so it is unlikely to be
    // orthogonal to the dominant direction.
    let mut v = DVector::from_fn(cols, |i, _| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = &ata * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Symmetric part `(W + Wᵀ)/2`.
pub fn symmetrize(w: &DMatrix<f64>) -> DMatrix<f64> {
    (w + w.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svd_and_power_iteration_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(3, 3), (5, 2), (2, 7), (40, 40)] {
            let a = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let s1 = max_singular_value(&a);
            let s2 = power_iteration_max_sv(&a, 1e-15, 100_000);
            assert!((s1 - s2).abs() <= 1e-10 * s1.max(1.0), "{s1} vs {s2}");
        }
    }

    #[test]
    fn singular_values_sorted() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0, 1.0]));
        assert_eq!(singular_values(&a).unwrap(), vec![3.0, 1.0, 0.5]);
    }
}
