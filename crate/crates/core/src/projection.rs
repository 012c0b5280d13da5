//! Projections of weight matrices onto contraction-feasible sets.
//!
//! Two feasible sets are supported, both with margin `eps`:
//!
//! * spectral: largest singular value at most `1 - eps`;
//! * symmetric: `W = Wᵀ` with every eigenvalue in `[-(1 - eps), 1 - eps]`.
//!
//! The per-step projections are closed form (singular value clip and
//! eigenvalue clamp). The data-aware projection used once to warm-start
//! constrained training minimizes the layer-output discrepancy
//! `||(Ŵ - W) X||_F` instead, solved by accelerated projected gradient on
//! the QR-reduced problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{max_singular_value, symmetrize};
use crate::network::NetworkParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    None,
    Symmetric,
    Spectral,
}

impl ProjectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectionMode::None => "none",
            ProjectionMode::Symmetric => "symmetric",
            ProjectionMode::Spectral => "spectral",
        }
    }

    /// The projection this mode asks for, or `None` when unconstrained.
    pub fn spec(&self, eps: f64) -> Result<Option<ProjectionSpec>> {
        let constraint = match self {
            ProjectionMode::None => return Ok(None),
            ProjectionMode::Symmetric => Constraint::Symmetric,
            ProjectionMode::Spectral => Constraint::Spectral,
        };
        ProjectionSpec::new(constraint, eps).map(Some)
    }
}

impl std::str::FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ProjectionMode::None),
            "symmetric" => Ok(ProjectionMode::Symmetric),
            "spectral" => Ok(ProjectionMode::Spectral),
            other => Err(Error::Argument(format!(
                "unknown projection mode {other:?} (expected none, symmetric or spectral)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Symmetric,
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub constraint: Constraint,
    pub eps: f64,
}

impl ProjectionSpec {
    pub fn new(constraint: Constraint, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 0.5) {
            return Err(Error::config("eps_proj", format!("{eps} is outside (0, 0.5]")));
        }
        Ok(ProjectionSpec { constraint, eps })
    }

    pub fn spectral(eps: f64) -> Result<Self> {
        Self::new(Constraint::Spectral, eps)
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(Constraint::Symmetric, eps)
    }

    /// The bound `1 - eps`.
    pub fn bound(&self) -> f64 {
        1.0 - self.eps
    }

    pub fn mode(&self) -> ProjectionMode {
        match self.constraint {
            Constraint::Symmetric => ProjectionMode::Symmetric,
            Constraint::Spectral => ProjectionMode::Spectral,
        }
    }
}

/// Tolerance used by [`verify_feasible`].
pub const FEASIBILITY_TOL: f64 = 1e-8;

fn check_finite(w: &DMatrix<f64>) -> Result<()> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("matrix has non-finite entries".into()))
    }
}

/// Frobenius-nearest matrix with largest singular value at most `1 - eps`.
///
/// For a non-square `W`, padding it to a square `[W | M]` and constraining
/// the padded matrix is equivalent to constraining `W` itself with `M = 0`,
/// so the same clip applies.
pub fn project_spectral(w: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    check_finite(w)?;
    if w.is_empty() {
        return Ok(w.clone());
    }
    let bound = 1.0 - eps;
    if max_singular_value(w) <= bound {
        return Ok(w.clone());
    }
    // Right (or left) singular vectors from the smaller Gram matrix; the
    // clip is then a rescaling along them. Clustered singular values are
    // exactly what clipping produces, and this stays accurate for them.
    let tall = w.nrows() >= w.ncols();
    let gram = if tall { w.transpose() * w } else { w * w.transpose() };
    let eig = gram
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let factors = eig.eigenvalues.map(|l| {
        let s = l.max(0.0).sqrt();
        if s > bound {
            bound / s
        } else {
            1.0
        }
    });
    let v = &eig.eigenvectors;
    let shrink = v * DMatrix::from_diagonal(&factors) * v.transpose();
    Ok(if tall { w * shrink } else { shrink * w })
}

/// Frobenius-nearest symmetric matrix with eigenvalues in
/// `[-(1 - eps), 1 - eps]`.
pub fn project_symmetric(w: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if !w.is_square() {
        return Err(Error::Dimension {
            context: "symmetric projection needs a square matrix; rows",
            expected: w.ncols(),
            got: w.nrows(),
        });
    }
    check_finite(w)?;
    let bound = 1.0 - eps;
    let s = symmetrize(w);
    let eig = s
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    if s == *w && eig.eigenvalues.iter().all(|l| l.abs() <= bound) {
        return Ok(s);
    }
    let clamped = eig.eigenvalues.map(|l| l.clamp(-bound, bound));
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&clamped) * q.transpose())))
}

/// Iteration budget for the symmetric projection of a non-square matrix.
const AUGMENTED_MAX_ITER: usize = 300;

/// Symmetric-mode projection of a non-square matrix: the nearest `Ŵ` that is
/// a block of some symmetric `S` with eigenvalues in the allowed interval,
/// tall `W` being the leading columns of `S` and wide `W` its leading rows.
///
/// Solved by projected gradient over `S`; every iterate is feasible, so the
/// result is feasible even if the iteration budget runs out.
pub fn project_symmetric_augmented(w: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if w.is_square() {
        return project_symmetric(w, eps);
    }
    check_finite(w)?;
    if w.nrows() < w.ncols() {
        return Ok(project_symmetric_augmented(&w.transpose(), eps)?.transpose());
    }
    let (k, b) = w.shape();
    let embed = |s: &DMatrix<f64>| s.columns(0, b).into_owned();
    let mut s = DMatrix::zeros(k, k);
    s.columns_mut(0, b).copy_from(w);
    s.view_mut((0, b), (b, k - b)).copy_from(&w.rows(b, k - b).transpose());
    let mut s = project_symmetric(&s, eps)?;
    let mut prev = s.clone();
    let mut t = 1.0_f64;
    for _ in 0..AUGMENTED_MAX_ITER {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let y = &s + (&s - &prev) * ((t - 1.0) / t_next);
        let mut grad = DMatrix::zeros(k, k);
        grad.columns_mut(0, b).copy_from(&(embed(&y) - w));
        let next = project_symmetric(&(y - symmetrize(&grad)), eps)?;
        let change = (&next - &s).amax();
        prev = std::mem::replace(&mut s, next);
        t = t_next;
        if change <= 1e-12 {
            break;
        }
    }
    Ok(embed(&s))
}

/// Dispatches on the constraint. Non-square matrices in symmetric mode use
/// [`project_symmetric_augmented`].
pub fn project(w: &DMatrix<f64>, spec: &ProjectionSpec) -> Result<DMatrix<f64>> {
    match spec.constraint {
        Constraint::Spectral => project_spectral(w, spec.eps),
        Constraint::Symmetric if w.is_square() => project_symmetric(w, spec.eps),
        Constraint::Symmetric => project_symmetric_augmented(w, spec.eps),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub max_sv: f64,
    /// `sqrt(sum_{i<j} (w_ij - w_ji)^2)`; only set in symmetric mode for
    /// square matrices.
    pub symmetry_defect: Option<f64>,
}

pub fn symmetry_defect(w: &DMatrix<f64>) -> f64 {
    let mut sum = 0.0;
    for i in 0..w.nrows() {
        for j in i + 1..w.ncols() {
            sum += (w[(i, j)] - w[(j, i)]).powi(2);
        }
    }
    sum.sqrt()
}

/// Whether `w` satisfies the spec's constraint within [`FEASIBILITY_TOL`].
///
/// For non-square matrices in symmetric mode only the singular value bound
/// (a necessary condition) is checked.
pub fn verify_feasible(w: &DMatrix<f64>, spec: &ProjectionSpec) -> Feasibility {
    let max_sv = max_singular_value(w);
    let sv_ok = max_sv <= spec.bound() + FEASIBILITY_TOL;
    match spec.constraint {
        Constraint::Symmetric if w.is_square() => {
            let defect = symmetry_defect(w);
            Feasibility { feasible: sv_ok && defect <= FEASIBILITY_TOL, max_sv, symmetry_defect: Some(defect) }
        }
        _ => Feasibility { feasible: sv_ok && max_sv.is_finite(), max_sv, symmetry_defect: None },
    }
}

/// One row of a [`ProjectionReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProjection {
    pub layer: String,
    pub sv_before: f64,
    pub sv_after: f64,
    pub frob_change: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub layers: Vec<LayerProjection>,
}

impl ProjectionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,sv_before,sv_after,frob_change\n");
        for l in &self.layers {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", l.layer, l.sv_before, l.sv_after, l.frob_change));
        }
        out
    }

    pub fn max_sv_after(&self) -> f64 {
        self.layers.iter().map(|l| l.sv_after).fold(0.0, f64::max)
    }
}

fn layer_names(h: usize) -> impl Iterator<Item = String> {
    (1..=h).map(|i| format!("W{i}"))
}

fn record(name: String, before: &DMatrix<f64>, after: &DMatrix<f64>) -> LayerProjection {
    LayerProjection {
        layer: name,
        sv_before: max_singular_value(before),
        sv_after: max_singular_value(after),
        frob_change: (after - before).norm(),
    }
}

/// Projects every `W_i` of `p` in place. `U` and the biases are untouched.
pub fn project_network(p: &mut NetworkParams, spec: &ProjectionSpec) -> Result<()> {
    for w in p.weights_mut() {
        *w = project(w, spec)?;
    }
    Ok(())
}

/// Like [`project_network`] but returns the per-layer report.
pub fn project_network_report(p: &mut NetworkParams, spec: &ProjectionSpec) -> Result<ProjectionReport> {
    let h = p.layer_count();
    let mut layers = Vec::with_capacity(h);
    for (name, w) in layer_names(h).zip(p.weights_mut()) {
        let projected = project(w, spec)?;
        layers.push(record(name, w, &projected));
        *w = projected;
    }
    Ok(ProjectionReport { layers })
}

/// Settings for [`projected_gradient`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    /// Stop when the update's largest absolute entry is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol: 1e-9, max_iter: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOutcome {
    pub w: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Accelerated (FISTA) projected gradient for a convex quadratic over the
/// spec's feasible set. `grad` is the objective gradient and `lipschitz` a
/// bound on its Lipschitz constant.
pub fn projected_gradient(
    start: &DMatrix<f64>,
    grad: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    lipschitz: f64,
    spec: &ProjectionSpec,
    settings: SolverSettings,
) -> Result<SolverOutcome> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::Numeric(format!("bad Lipschitz constant {lipschitz}")));
    }
    let step = 1.0 / lipschitz;
    let mut w = project(start, spec)?;
    let mut prev = w.clone();
    let mut t = 1.0_f64;
    for it in 1..=settings.max_iter {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let y = &w + (&w - &prev) * ((t - 1.0) / t_next);
        let g = grad(&y);
        let next = project(&(&y - g * step), spec)?;
        let change = (&next - &w).amax();
        prev = std::mem::replace(&mut w, next);
        t = t_next;
        if change <= settings.tol {
            return Ok(SolverOutcome { w, iterations: it, converged: true });
        }
    }
    Ok(SolverOutcome { w, iterations: settings.max_iter, converged: false })
}

const RIDGE: f64 = 1e-10;

/// Data-aware projection: minimizes `||Ŵ X - W X||_F^2` over the feasible
/// set, where the columns of `x` are sampled inputs to the layer.
///
/// With `Xᵀ = Q R` (reduced QR), the objective equals `||Ŵ Rᵀ - C||_F^2`
/// with `C = (W X) Q`, a problem in the original number of unknowns whatever
/// the sample count. A rank-deficient `R` gets a small ridge term.
pub fn qr_optimal_projection(
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    spec: &ProjectionSpec,
    settings: SolverSettings,
) -> Result<SolverOutcome> {
    check_finite(w)?;
    check_finite(x)?;
    let b = w.ncols();
    if x.nrows() != b {
        return Err(Error::Dimension { context: "layer input rows", expected: b, got: x.nrows() });
    }
    if x.ncols() < b {
        return Err(Error::Argument(format!("need at least {b} input samples, got {}", x.ncols())));
    }
    let target = w * x;
    let qr = x.transpose().qr();
    let q = qr.q();
    let r = qr.r();
    let c = &target * &q;
    let diag_max = r.diagonal().amax();
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let ridge = if diag_max == 0.0 || diag_min <= 1e-12 * diag_max {
        log::warn!("layer input data is rank deficient; adding a ridge of {RIDGE}");
        RIDGE
    } else {
        0.0
    };
    let lipschitz = 2.0 * (max_singular_value(&r).powi(2) + ridge);
    let grad = |y: &DMatrix<f64>| {
        let mut g = (y * r.transpose() - &c) * &r * 2.0;
        if ridge > 0.0 {
            g += (y - w) * (2.0 * ridge);
        }
        g
    };
    if lipschitz == 0.0 {
        // All-zero data: every feasible matrix is optimal.
        return Ok(SolverOutcome { w: project(w, spec)?, iterations: 0, converged: true });
    }
    projected_gradient(w, grad, lipschitz, spec, settings)
}

/// Options for [`constrained_init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Number of dataset samples propagated; `None` uses all of them.
    pub max_columns: Option<usize>,
    pub seed: u64,
    pub solver: SolverSettings,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { max_columns: Some(4096), seed: 0, solver: SolverSettings::default() }
    }
}

/// Layer inputs for each `W_i`: `k2` for `W_1`, then each hidden activation.
pub fn layer_inputs(p: &NetworkParams, k2: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut inputs = vec![k2.clone()];
    let relu = |z: &mut DMatrix<f64>| z.iter_mut().for_each(|v| *v = v.max(0.0));
    let add_bias = |z: &mut DMatrix<f64>, b: &DVector<f64>| {
        for mut col in z.column_iter_mut() {
            col += b;
        }
    };
    let mut a = &p.w_in * k2 + &p.u * x;
    add_bias(&mut a, &p.biases[0]);
    relu(&mut a);
    inputs.push(a.clone());
    for (w, b) in p.hidden.iter().zip(&p.biases[1..]) {
        let mut z = w * &a;
        add_bias(&mut z, b);
        relu(&mut z);
        a = z;
        inputs.push(a.clone());
    }
    inputs
}

/// Projects a trained unconstrained network into the feasible set layer by
/// layer, each layer minimizing the discrepancy of its own output on the
/// inputs the unconstrained network sees.
pub fn constrained_init(
    unconstrained: &NetworkParams,
    ds: &Dataset,
    spec: &ProjectionSpec,
    opts: InitOptions,
) -> Result<(NetworkParams, ProjectionReport)> {
    unconstrained.validate()?;
    if ds.n != unconstrained.n {
        return Err(Error::Dimension { context: "dataset dimension", expected: unconstrained.n, got: ds.n });
    }
    let sample = match opts.max_columns {
        Some(max) => ds.subsample(max, opts.seed),
        None => ds.clone(),
    };
    let (k2, x, _) = sample.to_matrices();
    let inputs = layer_inputs(unconstrained, &k2, &x);
    let mut out = unconstrained.clone();
    let h = out.layer_count();
    let mut layers = Vec::with_capacity(h);
    for ((name, w), input) in layer_names(h).zip(out.weights_mut()).zip(&inputs) {
        let solved = qr_optimal_projection(w, input, spec, opts.solver)?;
        if !solved.converged {
            log::warn!("{name}: data-aware projection stopped after {} iterations", solved.iterations);
        }
        layers.push(record(name, w, &solved.w));
        *w = solved.w;
    }
    Ok((out, ProjectionReport { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn spectral_examples() {
        let w = DMatrix::<f64>::identity(3, 3) * 2.0;
        let p = project_spectral(&w, 0.01).unwrap();
        assert!((p - DMatrix::<f64>::identity(3, 3) * 0.99).amax() < 1e-14);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5]));
        let p = project_spectral(&d, 0.01).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.99, 0.5]));
        assert!((p - expected).amax() < 1e-14);

        let feasible = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, -0.1, 0.0, 0.3, 0.2]);
        assert_eq!(project_spectral(&feasible, 0.01).unwrap(), feasible);
    }

    #[test]
    fn spectral_rejects_non_finite() {
        let w = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(project_spectral(&w, 0.01), Err(Error::Numeric(_))));
    }

    #[test]
    fn symmetric_examples() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let p = project_symmetric(&w, 0.01).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.99, 0.99, 0.0]);
        assert!((p - expected).amax() < 1e-14);

        let p = project_symmetric(&(DMatrix::<f64>::identity(3, 3) * -5.0), 0.01).unwrap();
        assert!((p + DMatrix::<f64>::identity(3, 3) * 0.99).amax() < 1e-14);

        let s = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        assert_eq!(project_symmetric(&s, 0.01).unwrap(), s);

        assert!(project_symmetric(&DMatrix::zeros(2, 3), 0.01).is_err());
    }

    #[test]
    fn verify_examples() {
        let spec = ProjectionSpec::spectral(0.01).unwrap();
        let f = verify_feasible(&(DMatrix::<f64>::identity(2, 2) * 2.0), &spec);
        assert!(!f.feasible);
        assert!((f.max_sv - 2.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 4, 6, 2.0);
        assert!(verify_feasible(&project_spectral(&w, 0.01).unwrap(), &spec).feasible);

        let sym = ProjectionSpec::symmetric(0.01).unwrap();
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -0.5, 0.0]);
        let f = verify_feasible(&skew, &sym);
        assert!(!f.feasible);
        assert!((f.symmetry_defect.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(ProjectionSpec::spectral(0.0).is_err());
        assert!(ProjectionSpec::spectral(0.6).is_err());
        assert!(ProjectionSpec::symmetric(0.5).is_ok());
        assert!(ProjectionMode::None.spec(0.01).unwrap().is_none());
        assert_eq!("spectral".parse::<ProjectionMode>().unwrap(), ProjectionMode::Spectral);
        assert!("sdp".parse::<ProjectionMode>().is_err());
    }

    #[test]
    fn augmented_symmetric_is_feasible_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ProjectionSpec::symmetric(0.01).unwrap();
        for (r, c) in [(6, 2), (2, 6)] {
            let w = random(&mut rng, r, c, 2.0);
            let p = project(&w, &spec).unwrap();
            assert_eq!(p.shape(), (r, c));
            assert!(verify_feasible(&p, &spec).feasible);
            let k = r.min(c);
            let block = p.view((0, 0), (k, k));
            assert!((block - block.transpose()).amax() < 1e-12);
            // Feasible inputs (small, with a symmetric leading block) are kept.
            let mut small = random(&mut rng, r, c, 0.05);
            let sym_block = symmetrize(&small.view((0, 0), (k, k)).into_owned());
            small.view_mut((0, 0), (k, k)).copy_from(&sym_block);
            assert!((project(&small, &spec).unwrap() - &small).amax() < 1e-9);
        }
    }

    #[test]
    fn x_identity_reduces_to_plain_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in [ProjectionSpec::spectral(0.01).unwrap(), ProjectionSpec::symmetric(0.01).unwrap()] {
            let w = random(&mut rng, 3, 3, 2.0);
            let solved = qr_optimal_projection(&w, &DMatrix::identity(3, 3), &spec, SolverSettings::default()).unwrap();
            assert!(solved.converged);
            assert!((solved.w - project(&w, &spec).unwrap()).norm() < 1e-8);
        }
    }

    #[test]
    fn qr_projection_of_feasible_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ProjectionSpec::spectral(0.01).unwrap();
        let w = random(&mut rng, 3, 4, 0.1);
        let x = random(&mut rng, 4, 20, 1.0);
        let solved = qr_optimal_projection(&w, &x, &spec, SolverSettings::default()).unwrap();
        assert!((solved.w - w).norm() < 1e-8);
    }

    #[test]
    fn qr_projection_handles_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ProjectionSpec::spectral(0.01).unwrap();
        let w = random(&mut rng, 3, 3, 3.0);
        let mut x = random(&mut rng, 3, 10, 1.0);
        x.row_mut(2).fill(0.0);
        let solved = qr_optimal_projection(&w, &x, &spec, SolverSettings { tol: 1e-9, max_iter: 2000 }).unwrap();
        assert!(verify_feasible(&solved.w, &spec).feasible);
        assert!(qr_optimal_projection(&w, &random(&mut rng, 3, 2, 1.0), &spec, SolverSettings::default()).is_err());
    }
}
