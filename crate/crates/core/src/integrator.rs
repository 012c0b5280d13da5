//! Trapezoidal implicit Runge-Kutta stepping with an exact Newton inner
//! solve, and a numerical check of the Newton map's contraction factor.
//!
//! The stage equation solved at every step is
//! `K(k2) = k2 - f(x + dt/2 k1 + dt/2 k2) = 0` with `k1 = f(x)`, and the
//! state advances as `x + dt/2 (k1 + k2*)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::power_iteration_max_sv;
use crate::systems::DynamicalSystem;

#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub alpha: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
}

impl ButcherTableau {
    pub fn trapezoidal() -> Self {
        ButcherTableau {
            alpha: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.5]),
            b: DVector::from_vec(vec![0.5, 0.5]),
            c: DVector::from_vec(vec![0.0, 1.0]),
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Row sums of `alpha` equal `c`.
    pub fn is_consistent(&self) -> bool {
        (0..self.stages()).all(|i| (self.alpha.row(i).sum() - self.c[i]).abs() < 1e-14)
    }
}

/// How the first Newton iterate of a step is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K2Init {
    /// Converged `k2*` of the previous step (falls back to `f(x)` on the
    /// first step).
    #[default]
    PreviousStep,
    FOfX,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub k2_init: K2Init,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-9, max_iter: 50, k2_init: K2Init::PreviousStep }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::config("tol", "must be positive and finite"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// Every iterate of one Newton solve, `k2^(0) .. k2^(I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NewtonTrace {
    pub iterates: Vec<DVector<f64>>,
    /// Infinity norm of `K` at each iterate.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
    pub x: DVector<f64>,
    pub dt: f64,
}

impl NewtonTrace {
    /// Number of Newton updates performed.
    pub fn updates(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Passes through the Newton map counted the way network passes are:
    /// every update plus the final confirming pass at the root.
    pub fn passes(&self) -> usize {
        self.iterates.len()
    }

    pub fn root(&self) -> &DVector<f64> {
        self.iterates.last().expect("trace holds the initial iterate")
    }
}

/// Uniform-grid trajectory with per-step solver pass counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub system: String,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub iterations_per_step: Vec<usize>,
    /// Column name for the pass counts, e.g. `newton_iters`.
    pub iteration_label: String,
}

impl TrajectoryRecord {
    pub fn total_iterations(&self) -> usize {
        self.iterations_per_step.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Values of state component `k` over time.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[k]).collect()
    }

    /// CSV with header `t,x1..xn,<iteration_label>`. The first row carries a
    /// zero count; row `k` carries the passes spent producing it.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(&format!(",{}\n", self.iteration_label));
        for (k, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
            out.push_str(&format_f64(*t));
            for v in s.iter() {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            let iters = if k == 0 { 0 } else { self.iterations_per_step[k - 1] };
            out.push_str(&format!(",{iters}\n"));
        }
        out
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar (system, dt).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let side = serde_json::json!({
            "system": self.system,
            "dt": self.dt,
            "n": self.dim(),
            "points": self.times.len(),
            "iteration_label": self.iteration_label,
            "total_iterations": self.total_iterations(),
        });
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    /// Parses the CSV written by [`TrajectoryRecord::to_csv`].
    pub fn from_csv(text: &str, system: &str, dt: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header =
            lines.next().ok_or_else(|| Error::Format { offset: 0, message: "empty trajectory file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "t" {
            return Err(Error::Format { offset: 0, message: format!("unexpected header `{header}`") });
        }
        let n = cols.len() - 2;
        let mut rec = TrajectoryRecord {
            system: system.to_string(),
            dt,
            times: Vec::new(),
            states: Vec::new(),
            iterations_per_step: Vec::new(),
            iteration_label: cols[cols.len() - 1].to_string(),
        };
        let mut offset = header.len() as u64 + 1;
        for (row, line) in lines.enumerate() {
            let bad = |m: String| Error::Format { offset, message: m };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n + 2 {
                return Err(bad(format!("row {row}: expected {} fields", n + 2)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")));
            rec.times.push(parse(fields[0])?);
            let mut state = DVector::zeros(n);
            for i in 0..n {
                state[i] = parse(fields[i + 1])?;
            }
            rec.states.push(state);
            if row > 0 {
                let it = fields[n + 1].parse::<usize>().map_err(|e| bad(format!("row {row}: {e}")))?;
                rec.iterations_per_step.push(it);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(rec)
    }
}

/// Shortest round-tripping decimal representation.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn check_step_inputs(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
) -> Result<()> {
    let n = system.dim();
    check_len("state x", n, x.len())?;
    check_len("stage k1", n, k1.len())?;
    check_len("stage k2", n, k2.len())
}

fn stage_point(x: &DVector<f64>, k1: &DVector<f64>, k2: &DVector<f64>, dt: f64) -> DVector<f64> {
    x + (k1 + k2) * (0.5 * dt)
}

fn residual_unchecked(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    k2 - system.rhs(&stage_point(x, k1, k2, dt))
}

fn jacobian_unchecked(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> DMatrix<f64> {
    let n = system.dim();
    DMatrix::identity(n, n) - system.jacobian(&stage_point(x, k1, k2, dt)) * (0.5 * dt)
}

/// `K(k2) = k2 - f(x + dt/2 k1 + dt/2 k2)`.
pub fn trapezoidal_residual(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    check_step_inputs(system, x, k1, k2)?;
    Ok(residual_unchecked(system, x, k1, k2, dt))
}

/// `dK/dk2 = I - dt/2 df/dx` at the stage point.
pub fn trapezoidal_jacobian(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> Result<DMatrix<f64>> {
    check_step_inputs(system, x, k1, k2)?;
    Ok(jacobian_unchecked(system, x, k1, k2, dt))
}

/// One application of the Newton map `G(k2) = k2 - J(k2)^-1 K(k2)`.
pub fn newton_update(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let k1 = eval_k1(system, x)?;
    check_len("stage k2", system.dim(), k2.len())?;
    newton_map(system, x, &k1, k2, dt).ok_or(Error::SingularJacobian { step: 0, iteration: 0 })
}

fn eval_k1(system: &dyn DynamicalSystem, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("state x", system.dim(), x.len())?;
    Ok(system.rhs(x))
}

fn newton_map(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    dt: f64,
) -> Option<DVector<f64>> {
    let k = residual_unchecked(system, x, k1, k2, dt);
    let j = jacobian_unchecked(system, x, k1, k2, dt);
    j.lu().solve(&k).map(|delta| k2 - delta)
}

/// Newton solve of the trapezoidal stage equation starting from `f(x)`.
pub fn newton_solve(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    dt: f64,
    cfg: &NewtonConfig,
) -> Result<NewtonTrace> {
    let k1 = eval_k1(system, x)?;
    solve_from(system, x, &k1, k1.clone(), dt, cfg, 0)
}

/// Newton solve from an explicit first iterate.
pub fn newton_solve_from(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k2_init: &DVector<f64>,
    dt: f64,
    cfg: &NewtonConfig,
) -> Result<NewtonTrace> {
    let k1 = eval_k1(system, x)?;
    check_len("initial k2", system.dim(), k2_init.len())?;
    solve_from(system, x, &k1, k2_init.clone(), dt, cfg, 0)
}

fn solve_from(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    k2_init: DVector<f64>,
    dt: f64,
    cfg: &NewtonConfig,
    step: usize,
) -> Result<NewtonTrace> {
    let mut k2 = k2_init;
    let mut iterates = Vec::new();
    let mut residual_norms = Vec::new();
    let mut converged = false;
    for iteration in 0..=cfg.max_iter {
        let k = residual_unchecked(system, x, k1, &k2, dt);
        let r = k.amax();
        iterates.push(k2.clone());
        residual_norms.push(r);
        if r <= cfg.tol {
            converged = true;
            break;
        }
        if iteration == cfg.max_iter || !r.is_finite() {
            break;
        }
        let j = jacobian_unchecked(system, x, k1, &k2, dt);
        let delta = j.lu().solve(&k).ok_or(Error::SingularJacobian { step, iteration })?;
        k2 -= delta;
    }
    Ok(NewtonTrace { iterates, residual_norms, converged, x: x.clone(), dt })
}

/// One trapezoidal step from `f(x)` as the initial iterate.
pub fn step_trapezoidal(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    dt: f64,
    cfg: &NewtonConfig,
) -> Result<(DVector<f64>, NewtonTrace)> {
    let k1 = eval_k1(system, x)?;
    let trace = solve_from(system, x, &k1, k1.clone(), dt, cfg, 0)?;
    if !trace.converged {
        return Err(Error::Step {
            step: 0,
            message: format!(
                "Newton did not converge in {} iterations (residual {:e})",
                cfg.max_iter,
                trace.residual_norms.last().copied().unwrap_or(f64::NAN)
            ),
        });
    }
    let next = advance(x, &k1, trace.root(), dt);
    Ok((next, trace))
}

fn advance(x: &DVector<f64>, k1: &DVector<f64>, k2: &DVector<f64>, dt: f64) -> DVector<f64> {
    x + (k1 + k2) * (0.5 * dt)
}

/// Number of uniform steps covering `[0, t_end]`.
pub fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::Argument(format!("t_end must be positive, got {t_end}")));
    }
    let steps = (t_end / dt).round();
    if steps < 1.0 {
        return Err(Error::Argument(format!("t_end {t_end} is shorter than dt {dt}")));
    }
    Ok(steps as usize)
}

/// Maximum number of times a failing step's dt is halved.
pub const MAX_DT_HALVINGS: u32 = 4;

/// Trajectory plus the Newton trace of every full-size step.
///
/// Steps that needed dt halving are integrated with substeps and have no
/// trace here (their samples would be at a different dt).
#[derive(Clone, Debug)]
pub struct TracedTrajectory {
    pub record: TrajectoryRecord,
    pub traces: Vec<Option<NewtonTrace>>,
}

/// Integrates `[0, t_end]` on a uniform grid.
pub fn simulate(
    system: &dyn DynamicalSystem,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    cfg: &NewtonConfig,
) -> Result<TrajectoryRecord> {
    simulate_traced(system, x0, dt, t_end, cfg).map(|t| t.record)
}

pub fn simulate_traced(
    system: &dyn DynamicalSystem,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    cfg: &NewtonConfig,
) -> Result<TracedTrajectory> {
    cfg.validate()?;
    check_len("initial state", system.dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("initial state must be finite".into()));
    }
    let steps = step_count(dt, t_end)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut iterations = Vec::with_capacity(steps);
    let mut traces = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut warm: Option<DVector<f64>> = None;
    times.push(0.0);
    states.push(x.clone());
    for step in 0..steps {
        let k1 = system.rhs(&x);
        let init = match (cfg.k2_init, &warm) {
            (K2Init::PreviousStep, Some(prev)) => prev.clone(),
            _ => k1.clone(),
        };
        let trace = solve_from(system, &x, &k1, init, dt, cfg, step)?;
        if trace.converged {
            iterations.push(trace.passes());
            x = advance(&x, &k1, trace.root(), dt);
            warm = Some(trace.root().clone());
            traces.push(Some(trace));
        } else {
            let (next, passes, last_k2) = substep(system, &x, dt, cfg, step).map_err(|e| match e {
                Error::Step { .. } | Error::SingularJacobian { .. } => e,
                other => Error::Step { step, message: other.to_string() },
            })?;
            iterations.push(trace.passes() + passes);
            x = next;
            warm = Some(last_k2);
            traces.push(None);
        }
        times.push((step + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(TracedTrajectory {
        record: TrajectoryRecord {
            system: system.name().to_string(),
            dt,
            times,
            states,
            iterations_per_step: iterations,
            iteration_label: "newton_iters".into(),
        },
        traces,
    })
}

/// Retries a failed step with `2^h` substeps of `dt / 2^h`.
fn substep(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    dt: f64,
    cfg: &NewtonConfig,
    step: usize,
) -> Result<(DVector<f64>, usize, DVector<f64>)> {
    'halving: for h in 1..=MAX_DT_HALVINGS {
        let parts = 1usize << h;
        let sub_dt = dt / parts as f64;
        let mut y = x.clone();
        let mut passes = 0;
        let mut last = None;
        for _ in 0..parts {
            let k1 = system.rhs(&y);
            let init = last.clone().unwrap_or_else(|| k1.clone());
            let trace = solve_from(system, &y, &k1, init, sub_dt, cfg, step)?;
            passes += trace.passes();
            if !trace.converged {
                continue 'halving;
            }
            y = advance(&y, &k1, trace.root(), sub_dt);
            last = Some(trace.root().clone());
        }
        log::debug!("step {step}: converged after halving dt {h} time(s)");
        return Ok((y, passes, last.expect("at least one substep")));
    }
    Err(Error::Step { step, message: format!("Newton failed to converge after {MAX_DT_HALVINGS} dt halvings") })
}

/// Result of the Newton-map contraction check at one probe point.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeOutcome {
    /// Largest singular value of `dG/dk2` at the probe.
    Estimate(f64),
    /// `J` was singular at (or next to) the probe.
    Singular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionEstimate {
    pub per_probe: Vec<ProbeOutcome>,
}

impl ContractionEstimate {
    /// Supremum over successful probes (`NaN` if none succeeded).
    pub fn sup(&self) -> f64 {
        self.per_probe
            .iter()
            .filter_map(|p| match p {
                ProbeOutcome::Estimate(v) => Some(*v),
                ProbeOutcome::Singular => None,
            })
            .fold(f64::NAN, f64::max)
    }

    /// True when every probe succeeded with an estimate below one.
    pub fn certifies_contraction(&self) -> bool {
        !self.per_probe.is_empty() && self.per_probe.iter().all(|p| matches!(p, ProbeOutcome::Estimate(v) if *v < 1.0))
    }
}

/// Largest singular value of the Jacobian of an arbitrary self-map `g`,
/// estimated by central differences and power iteration. `g` returns
/// `None` where it is undefined.
pub fn map_contraction_at<G>(g: &G, probe: &DVector<f64>) -> ProbeOutcome
where
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let n = probe.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * probe[j].abs().max(1.0);
        let mut plus = probe.clone();
        let mut minus = probe.clone();
        plus[j] += h;
        minus[j] -= h;
        match (g(&plus), g(&minus)) {
            (Some(a), Some(b)) if a.len() == n && b.len() == n => {
                jac.set_column(j, &((a - b) / (2.0 * h)));
            }
            _ => return ProbeOutcome::Singular,
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return ProbeOutcome::Singular;
    }
    ProbeOutcome::Estimate(power_iteration_max_sv(&jac, 1e-14, 10_000))
}

/// Estimates `sup` over the probes of the largest singular value of the
/// Jacobian of the Newton map `G(k2) = k2 - J^-1 K`. A value below one
/// certifies that Newton contracts at the probes.
pub fn check_newton_contraction(
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    dt: f64,
    probes: &[DVector<f64>],
) -> Result<ContractionEstimate> {
    let k1 = eval_k1(system, x)?;
    for p in probes {
        check_len("probe k2", system.dim(), p.len())?;
    }
    let g = |k2: &DVector<f64>| newton_map(system, x, &k1, k2, dt);
    Ok(ContractionEstimate { per_probe: probes.iter().map(|p| map_contraction_at(&g, p)).collect() })
}
