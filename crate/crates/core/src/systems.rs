//! Benchmark dynamical systems and the generic ODE interface.
//!
//! Every system is autonomous, `dx/dt = f(x)`, and exposes an analytic
//! Jacobian so the trapezoidal Newton solve never falls back to finite
//! differences.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Right-hand side and Jacobian of an autonomous ODE.
///
/// Implementations may assume `x.len() == self.dim()`; the checked entry
/// points are [`eval_rhs`] and [`eval_jacobian`].
pub trait DynamicalSystem: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn rhs(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

pub fn eval_rhs(system: &dyn DynamicalSystem, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("eval_rhs state", system.dim(), x.len())?;
    Ok(system.rhs(x))
}

pub fn eval_jacobian(system: &dyn DynamicalSystem, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_len("eval_jacobian state", system.dim(), x.len())?;
    Ok(system.jacobian(x))
}

/// Two-state cubic oscillator:
/// `x' = -0.1 x^3 + 2 y^3`, `y' = -2 x^3 - 0.1 y^3`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CubicOscillator;

impl DynamicalSystem for CubicOscillator {
    fn name(&self) -> &str {
        "cubic_oscillator"
    }

    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, s: &DVector<f64>) -> DVector<f64> {
        let (x3, y3) = (s[0].powi(3), s[1].powi(3));
        DVector::from_vec(vec![-0.1 * x3 + 2.0 * y3, -2.0 * x3 - 0.1 * y3])
    }

    fn jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let (x2, y2) = (s[0] * s[0], s[1] * s[1]);
        DMatrix::from_row_slice(2, 2, &[-0.3 * x2, 6.0 * y2, -6.0 * x2, -0.3 * y2])
    }
}

/// Hopf normal form with the bifurcation parameter carried as a frozen
/// state: `(mu, x, y)` with `mu' = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hopf;

impl DynamicalSystem for Hopf {
    fn name(&self) -> &str {
        "hopf"
    }

    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, s: &DVector<f64>) -> DVector<f64> {
        let (mu, x, y) = (s[0], s[1], s[2]);
        let r2 = x * x + y * y;
        DVector::from_vec(vec![0.0, mu * x + y - x * r2, mu * y - x - y * r2])
    }

    fn jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let (mu, x, y) = (s[0], s[1], s[2]);
        let r2 = x * x + y * y;
        #[rustfmt::skip]
        let m = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, 0.0,
            x, mu - r2 - 2.0 * x * x, 1.0 - 2.0 * x * y,
            y, -1.0 - 2.0 * x * y, mu - r2 - 2.0 * y * y,
        ]);
        m
    }
}

/// Kundur-style reduced swing network parameters.
///
/// Per machine `i`: `delta_i' = omega_i`,
/// `omega_i' = p_i - d_i omega_i - sum_j B_ij sin(delta_i - delta_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KundurParams {
    pub p: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    /// Generator index set; all machines when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<usize>>,
    /// Nominal operating angles, used as the sampling base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<Vec<f64>>,
}

impl KundurParams {
    /// Five-machine stand-in network: symmetric coupling, positive damping,
    /// injections balanced so that `delta0` with zero speeds is an
    /// equilibrium.
    pub fn five_machine() -> Self {
        #[rustfmt::skip]
        let b = vec![
            vec![0.0, 8.0, 2.0, 1.0, 4.0],
            vec![8.0, 0.0, 6.0, 1.5, 3.0],
            vec![2.0, 6.0, 0.0, 7.0, 2.5],
            vec![1.0, 1.5, 7.0, 0.0, 5.0],
            vec![4.0, 3.0, 2.5, 5.0, 0.0],
        ];
        let delta0 = vec![0.0, -0.12, -0.31, -0.42, -0.2];
        let p = balanced_injections(&b, &delta0);
        KundurParams { p, d: vec![0.6, 0.5, 0.7, 0.55, 0.65], b, generators: None, delta0: Some(delta0) }
    }

    /// Two-machine variant (4 states) with the same construction.
    pub fn two_machine() -> Self {
        let b = vec![vec![0.0, 10.0], vec![10.0, 0.0]];
        let delta0 = vec![0.0, -0.2];
        let p = balanced_injections(&b, &delta0);
        KundurParams { p, d: vec![0.6, 0.6], b, generators: None, delta0: Some(delta0) }
    }
}

/// Injections `p_i = sum_j B_ij sin(delta_i - delta_j)` that make `delta` an
/// equilibrium. They sum to zero when `B` is symmetric.
pub fn balanced_injections(b: &[Vec<f64>], delta: &[f64]) -> Vec<f64> {
    (0..delta.len()).map(|i| (0..delta.len()).map(|j| b[i][j] * (delta[i] - delta[j]).sin()).sum()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kundur {
    p: Vec<f64>,
    d: Vec<f64>,
    b: DMatrix<f64>,
    delta0: Vec<f64>,
    params: KundurParams,
}

impl Kundur {
    pub fn new(params: KundurParams) -> Result<Self> {
        let total = params.p.len();
        if total == 0 {
            return Err(Error::config("params.p", "at least one machine is required"));
        }
        if params.d.len() != total {
            return Err(Error::config("params.d", format!("expected {total} entries, got {}", params.d.len())));
        }
        if params.b.len() != total || params.b.iter().any(|row| row.len() != total) {
            return Err(Error::config("params.B", format!("expected a {total}x{total} matrix")));
        }
        let all_finite = params.p.iter().chain(&params.d).chain(params.b.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::config("params", "non-finite parameter value"));
        }
        let gens: Vec<usize> = match &params.generators {
            Some(g) => g.clone(),
            None => (0..total).collect(),
        };
        if gens.is_empty() {
            return Err(Error::config("params.generators", "empty generator set"));
        }
        let mut seen = vec![false; total];
        for &g in &gens {
            if g >= total || seen[g] {
                return Err(Error::config("params.generators", format!("invalid or repeated generator index {g}")));
            }
            seen[g] = true;
        }
        let delta0_full = match &params.delta0 {
            Some(d0) if d0.len() == total => d0.clone(),
            Some(d0) => {
                return Err(Error::config("params.delta0", format!("expected {total} entries, got {}", d0.len())))
            }
            None => vec![0.0; total],
        };
        let k = gens.len();
        Ok(Kundur {
            p: gens.iter().map(|&g| params.p[g]).collect(),
            d: gens.iter().map(|&g| params.d[g]).collect(),
            b: DMatrix::from_fn(k, k, |i, j| params.b[gens[i]][gens[j]]),
            delta0: gens.iter().map(|&g| delta0_full[g]).collect(),
            params,
        })
    }

    pub fn machines(&self) -> usize {
        self.p.len()
    }

    pub fn params(&self) -> &KundurParams {
        &self.params
    }

    /// Nominal state `(delta0, 0)`.
    pub fn nominal_state(&self) -> DVector<f64> {
        let k = self.machines();
        DVector::from_fn(2 * k, |i, _| if i < k { self.delta0[i] } else { 0.0 })
    }
}

impl DynamicalSystem for Kundur {
    fn name(&self) -> &str {
        "kundur"
    }

    fn dim(&self) -> usize {
        2 * self.machines()
    }

    fn rhs(&self, s: &DVector<f64>) -> DVector<f64> {
        let k = self.machines();
        let mut out = DVector::zeros(2 * k);
        for i in 0..k {
            out[i] = s[k + i];
            let coupling: f64 = (0..k).filter(|&j| j != i).map(|j| self.b[(i, j)] * (s[i] - s[j]).sin()).sum();
            out[k + i] = self.p[i] - self.d[i] * s[k + i] - coupling;
        }
        out
    }

    fn jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let k = self.machines();
        let mut jac = DMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            jac[(i, k + i)] = 1.0;
            jac[(k + i, k + i)] = -self.d[i];
            let mut diag = 0.0;
            for j in (0..k).filter(|&j| j != i) {
                let c = self.b[(i, j)] * (s[i] - s[j]).cos();
                jac[(k + i, j)] = c;
                diag -= c;
            }
            jac[(k + i, i)] = diag;
        }
        jac
    }
}

/// The shipped benchmark systems.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum System {
    CubicOscillator(CubicOscillator),
    Hopf(Hopf),
    Kundur(Kundur),
}

impl System {
    fn inner(&self) -> &dyn DynamicalSystem {
        match self {
            System::CubicOscillator(s) => s,
            System::Hopf(s) => s,
            System::Kundur(s) => s,
        }
    }

    /// Parameter record in the same shape `make_system` accepts.
    pub fn params_json(&self) -> serde_json::Value {
        match self {
            System::Kundur(k) => serde_json::to_value(k.params()).expect("params serialize"),
            _ => serde_json::json!({}),
        }
    }
}

impl DynamicalSystem for System {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner().rhs(x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner().jacobian(x)
    }
}

/// Builds a benchmark system by name. `kundur` requires `p`, `d` and `B`
/// (and optionally `generators`, `delta0`); the others take no parameters.
pub fn make_system(name: &str, params: &serde_json::Value) -> Result<System> {
    match name {
        "cubic_oscillator" => Ok(System::CubicOscillator(CubicOscillator)),
        "hopf" => Ok(System::Hopf(Hopf)),
        "kundur" => {
            if params.is_null() || params.as_object().is_some_and(|o| o.is_empty()) {
                return Err(Error::config("params", "kundur requires arrays `p`, `d` and matrix `B`"));
            }
            let kp: KundurParams =
                serde_json::from_value(params.clone()).map_err(|e| Error::config("params", e.to_string()))?;
            Ok(System::Kundur(Kundur::new(kp)?))
        }
        other => {
            Err(Error::config("name", format!("unknown system `{other}` (expected cubic_oscillator, hopf or kundur)")))
        }
    }
}

/// On-disk system description: `{"name": ..., "params": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemFile {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

impl SystemFile {
    pub fn build(&self) -> Result<System> {
        make_system(&self.name, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn default_kundur() -> Self {
        SystemFile {
            name: "kundur".into(),
            params: serde_json::to_value(KundurParams::five_machine()).expect("params serialize"),
        }
    }
}

/// Gaussian perturbations around a base state.
///
/// Each sampler owns its RNG; independent streams for parallel work come
/// from [`InitialConditionSampler::stream`].
#[derive(Clone, Debug)]
pub struct InitialConditionSampler {
    base: DVector<f64>,
    scale: DVector<f64>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl InitialConditionSampler {
    pub fn new(base: DVector<f64>, scale: DVector<f64>, seed: u64) -> Result<Self> {
        check_len("sampler scale", base.len(), scale.len())?;
        if scale.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Argument("perturbation scale must be finite and non-negative".into()));
        }
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("sampler base must be finite".into()));
        }
        Ok(InitialConditionSampler { base, scale, seed, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn base(&self) -> &DVector<f64> {
        &self.base
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same distribution with every standard deviation multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.base.clone(), &self.scale * factor, self.seed)
    }

    /// Independent sampler for stream `id`, derived from `(seed, id)`.
    pub fn stream(&self, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        InitialConditionSampler { base: self.base.clone(), scale: self.scale.clone(), seed: self.seed, rng }
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let rng = &mut self.rng;
        DVector::from_fn(self.base.len(), |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.base[i] + self.scale[i] * z
        })
    }
}

/// Free-function form of [`InitialConditionSampler::sample`].
pub fn sample_initial_condition(sampler: &mut InitialConditionSampler) -> DVector<f64> {
    sampler.sample()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn fd_jacobian(sys: &dyn DynamicalSystem, x: &DVector<f64>) -> DMatrix<f64> {
        let n = sys.dim();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (sys.rhs(&xp) - sys.rhs(&xm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    fn all_systems() -> Vec<System> {
        vec![
            System::CubicOscillator(CubicOscillator),
            System::Hopf(Hopf),
            System::Kundur(Kundur::new(KundurParams::five_machine()).unwrap()),
            System::Kundur(Kundur::new(KundurParams::two_machine()).unwrap()),
        ]
    }

    #[test]
    fn cubic_rhs_examples() {
        let sys = CubicOscillator;
        let zero = eval_rhs(&sys, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
        let one = eval_rhs(&sys, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(one[0], 1.9, epsilon = 1e-15);
        assert_relative_eq!(one[1], -2.1, epsilon = 1e-15);
    }

    #[test]
    fn hopf_origin_is_stationary() {
        let out = Hopf.rhs(&DVector::from_vec(vec![0.1, 0.0, 0.0]));
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let err = eval_rhs(&CubicOscillator, &DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 3, .. }));
        assert!(eval_jacobian(&Hopf, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn cubic_jacobian_examples() {
        let j0 = CubicOscillator.jacobian(&DVector::zeros(2));
        assert!(j0.iter().all(|v| *v == 0.0));
        let j = CubicOscillator.jacobian(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[-0.3, 0.0, -6.0, 0.0]));
        let fd = fd_jacobian(&CubicOscillator, &DVector::from_vec(vec![1.0, 0.0]));
        assert!((j - fd).abs().max() < 1e-8);
    }

    #[test]
    fn kundur_off_diagonal_coupling() {
        let sys = Kundur::new(KundurParams::five_machine()).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.1, 0.0, -0.2, 0.3, 0.05]);
        let jac = sys.jacobian(&x);
        let b = &KundurParams::five_machine().b;
        for i in 0..5 {
            for j in (0..5).filter(|&j| j != i) {
                assert_relative_eq!(jac[(5 + i, j)], b[i][j] * (x[i] - x[j]).cos(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for sys in all_systems() {
            for _ in 0..100 {
                let x = DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.5..1.5));
                let a = sys.jacobian(&x);
                let fd = fd_jacobian(&sys, &x);
                let scale = a.abs().max().max(1.0);
                let rel = (&a - &fd).abs().max() / scale;
                assert!(rel <= 1e-6, "{}: relative error {rel}", sys.name());
            }
        }
    }

    #[test]
    fn rhs_is_deterministic() {
        for sys in all_systems() {
            let x = DVector::from_fn(sys.dim(), |i, _| 0.1 * i as f64 - 0.3);
            assert_eq!(sys.rhs(&x), sys.rhs(&x));
        }
    }

    #[test]
    fn hopf_mu_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            assert_eq!(Hopf.rhs(&x)[0], 0.0);
            assert!(Hopf.jacobian(&x).row(0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn kundur_coupling_cancels_in_sum() {
        // With zero damping and symmetric B, the coupling terms cancel
        // pairwise, so sum_i omega_i' = sum_i p_i at every angle.
        let mut params = KundurParams::five_machine();
        params.d = vec![0.0; 5];
        params.p = vec![0.4, -0.1, 0.3, -0.2, 0.1];
        let sys = Kundur::new(params.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            let f = sys.rhs(&x);
            let total: f64 = f.rows(5, 5).sum();
            assert_relative_eq!(total, params.p.iter().sum::<f64>(), epsilon = 1e-12);
        }
        let equal = DVector::from_fn(10, |i, _| if i < 5 { 0.7 } else { 0.0 });
        let f = sys.rhs(&equal);
        for i in 0..5 {
            assert_relative_eq!(f[5 + i], params.p[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn make_system_dimensions() {
        assert_eq!(make_system("cubic_oscillator", &serde_json::json!({})).unwrap().dim(), 2);
        assert_eq!(make_system("hopf", &serde_json::json!({})).unwrap().dim(), 3);
        let k = SystemFile::default_kundur().build().unwrap();
        assert_eq!(k.dim(), 10);
        let sub = serde_json::json!({
            "p": [0.1, -0.1, 0.0], "d": [1.0, 1.0, 1.0],
            "B": [[0, 1, 1], [1, 0, 1], [1, 1, 0]], "generators": [0, 2]
        });
        assert_eq!(make_system("kundur", &sub).unwrap().dim(), 4);
    }

    #[test]
    fn make_system_rejects_bad_input() {
        assert!(matches!(make_system("lorenz", &serde_json::json!({})), Err(Error::Config { .. })));
        assert!(make_system("kundur", &serde_json::json!({})).is_err());
        let ragged = serde_json::json!({"p": [0.0, 0.0], "d": [1.0, 1.0], "B": [[0.0], [1.0, 0.0]]});
        assert!(make_system("kundur", &ragged).is_err());
        let bad_gen = serde_json::json!({
            "p": [0.0, 0.0], "d": [1.0, 1.0], "B": [[0, 1], [1, 0]], "generators": [0, 0]
        });
        assert!(make_system("kundur", &bad_gen).is_err());
    }

    #[test]
    fn default_kundur_is_balanced_equilibrium() {
        let params = KundurParams::five_machine();
        assert!(params.p.iter().sum::<f64>().abs() < 1e-12);
        let sys = Kundur::new(params).unwrap();
        let f = sys.rhs(&sys.nominal_state());
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn system_file_round_trip() {
        let file = SystemFile::default_kundur();
        let text = serde_json::to_string(&file).unwrap();
        let back: SystemFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.build().unwrap(), file.build().unwrap());
    }

    #[test]
    fn zero_scale_returns_base() {
        let base = DVector::from_vec(vec![1.0, -2.0]);
        let mut s = InitialConditionSampler::new(base.clone(), DVector::zeros(2), 5).unwrap();
        for _ in 0..10 {
            assert_eq!(s.sample(), base);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let mk = || InitialConditionSampler::new(DVector::zeros(3), DVector::from_element(3, 0.5), 42).unwrap();
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..20 {
            assert_eq!(sample_initial_condition(&mut a), sample_initial_condition(&mut b));
        }
        let (mut s1, mut s2) = (mk().stream(3), mk().stream(4));
        assert_ne!(s1.sample(), s2.sample());
    }

    #[test]
    fn halved_scale_halves_spread() {
        let base = DVector::from_vec(vec![0.5, -1.0]);
        let scale = DVector::from_vec(vec![0.4, 0.2]);
        let full = InitialConditionSampler::new(base, scale, 9).unwrap();
        let mut half = full.scaled(0.5).unwrap();
        let mut full = full;
        let sd = |s: &mut InitialConditionSampler, k: usize| {
            let draws: Vec<f64> = (0..10_000).map(|_| s.sample()[k]).collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt()
        };
        for k in 0..2 {
            let ratio = sd(&mut half, k) / sd(&mut full, k);
            assert!((ratio - 0.5).abs() < 0.03, "component {k}: ratio {ratio}");
        }
    }

    #[test]
    fn negative_scale_rejected() {
        assert!(InitialConditionSampler::new(DVector::zeros(2), DVector::from_vec(vec![0.1, -0.1]), 0).is_err());
    }
}
