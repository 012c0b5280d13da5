use conns::linalg::max_singular_value;
use conns::projection::{
    project, projected_gradient, qr_optimal_projection, verify_feasible, ProjectionSpec, SolverSettings,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const EPS: f64 = 1e-3;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n, 1.0).qr().q()
}

fn feasible_spectral(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let s = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0 - EPS));
    orthogonal(rng, n) * DMatrix::from_diagonal(&s) * orthogonal(rng, n)
}

fn feasible_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = orthogonal(rng, n);
    let l = DVector::from_fn(n, |_, _| rng.random_range(-(1.0 - EPS)..1.0 - EPS));
    &q * DMatrix::from_diagonal(&l) * q.transpose()
}

fn specs() -> [ProjectionSpec; 2] {
    [ProjectionSpec::spectral(EPS).unwrap(), ProjectionSpec::symmetric(EPS).unwrap()]
}

fn matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projections_are_feasible_and_idempotent(w in matrix(5)) {
        for spec in specs() {
            let p = project(&w, &spec).unwrap();
            prop_assert!(verify_feasible(&p, &spec).feasible);
            prop_assert!(max_singular_value(&p) <= 1.0 - EPS + 1e-8);
            let pp = project(&p, &spec).unwrap();
            prop_assert!((&pp - &p).amax() <= 1e-12);
        }
    }

    #[test]
    fn projections_are_non_expansive(a in matrix(4), b in matrix(4)) {
        for spec in specs() {
            let (pa, pb) = (project(&a, &spec).unwrap(), project(&b, &spec).unwrap());
            prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-10);
        }
    }

    #[test]
    fn schur_block_is_positive_semidefinite(w in matrix(4)) {
        let p = project(&w, &ProjectionSpec::spectral(EPS).unwrap()).unwrap();
        let n = p.nrows();
        let mut block = DMatrix::identity(2 * n, 2 * n);
        block.view_mut((0, n), (n, n)).copy_from(&p);
        block.view_mut((n, 0), (n, n)).copy_from(&p.transpose());
        let min = block.symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-9, "min eigenvalue {min}");
    }
}

#[test]
fn projection_dominates_sampled_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let w = gaussian(&mut rng, 5, 5, 1.0);
        let sp = project(&w, &specs()[0]).unwrap();
        let sy = project(&w, &specs()[1]).unwrap();
        for _ in 0..200 {
            assert!((&w - &sp).norm() <= (&w - feasible_spectral(&mut rng, 5)).norm() + 1e-12);
            assert!((&w - &sy).norm() <= (&w - feasible_symmetric(&mut rng, 5)).norm() + 1e-12);
        }
    }
}

#[test]
fn symmetric_projection_output_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = project(&gaussian(&mut rng, 6, 6, 2.0), &specs()[1]).unwrap();
    assert!((&p - p.transpose()).amax() <= 1e-14);
    let eig = p.symmetric_eigen().eigenvalues;
    assert!(eig.iter().all(|l| l.abs() <= 1.0 - EPS + 1e-12));
}

/// Column-major vec(W X) = (Xᵀ ⊗ I) vec(W).
fn kron_operator(x: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    x.transpose().kronecker(&DMatrix::identity(rows, rows))
}

#[test]
fn reduced_problem_matches_full_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = SolverSettings { tol: 1e-13, max_iter: 200_000 };
    for trial in 0..5 {
        let w_hat = gaussian(&mut rng, 3, 3, 1.5);
        let x = gaussian(&mut rng, 3, 12, 1.0);
        for spec in specs() {
            let reduced = qr_optimal_projection(&w_hat, &x, &spec, settings).unwrap();
            let a = kron_operator(&x, 3);
            let b = &a * DVector::from_column_slice(w_hat.as_slice());
            let lip = 2.0 * max_singular_value(&a).powi(2);
            let grad = |y: &DMatrix<f64>| {
                let r = &a * DVector::from_column_slice(y.as_slice()) - &b;
                let g = a.transpose() * r * 2.0;
                DMatrix::from_column_slice(3, 3, g.as_slice())
            };
            let full = projected_gradient(&w_hat, grad, lip, &spec, settings).unwrap();
            let diff = (&reduced.w - &full.w).amax();
            assert!(diff <= 1e-6, "trial {trial} {:?}: {diff}", spec.constraint);
        }
    }
}

#[test]
fn data_aware_projection_beats_plain_projection_on_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = specs()[0];
    for _ in 0..5 {
        let w = gaussian(&mut rng, 4, 4, 1.0);
        let x = gaussian(&mut rng, 4, 40, 1.0);
        let target = &w * &x;
        let best = qr_optimal_projection(&w, &x, &spec, SolverSettings::default()).unwrap().w;
        let plain = project(&w, &spec).unwrap();
        assert!(verify_feasible(&best, &spec).feasible);
        assert!((&target - &best * &x).norm() <= (&target - &plain * &x).norm() + 1e-9);
    }
}
