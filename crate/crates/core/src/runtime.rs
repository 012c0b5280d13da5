//! Recurrent fixed-point iteration of a trained step network, and time
//! stepping with the network in place of the Newton solver.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::integrator::{step_count, TrajectoryRecord};
use crate::network::{Model, StepMap};
use crate::systems::DynamicalSystem;

/// Number of trailing update ratios the rate estimate is taken over.
const RATE_WINDOW: usize = 10;

/// Starting iterate of each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Fixed point of the previous step (`f(x)` on the first step).
    #[default]
    PreviousStep,
    FOfX,
    Zeros,
}

/// What to do when a step exhausts `max_iter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Fail the trajectory.
    Abort,
    /// Take the iterate with the smallest update and carry on.
    AcceptBest,
}

impl FailurePolicy {
    /// Abort for constrained models, accept-best for unconstrained ones.
    pub fn default_for(model: &Model) -> Self {
        if model.is_constrained() {
            FailurePolicy::Abort
        } else {
            FailurePolicy::AcceptBest
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    /// Tolerance on the infinity norm of the update `k2_next - k2`.
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub init_policy: InitPolicy,
    /// `None` picks [`FailurePolicy::default_for`] the model.
    #[serde(default)]
    pub on_failure: Option<FailurePolicy>,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { tol: 1e-9, max_iter: 10_000, init_policy: InitPolicy::PreviousStep, on_failure: None }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::config("fixed_point.tol", format!("must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("fixed_point.max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    /// Last iterate when converged; otherwise the iterate whose update was
    /// smallest.
    pub k2_star: DVector<f64>,
    /// Network passes performed.
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the last update.
    pub final_delta: f64,
    /// Median ratio of successive update norms over the last iterations;
    /// `None` with fewer than two nonzero updates.
    pub rate_estimate: Option<f64>,
    /// Infinity norms of every update.
    pub deltas: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] })
}

/// Median of the trailing update-norm ratios.
pub fn rate_estimate(deltas: &[f64]) -> Option<f64> {
    let start = deltas.len().saturating_sub(RATE_WINDOW + 1);
    let ratios: Vec<f64> =
        deltas[start..].windows(2).filter(|w| w[0] > 0.0 && w[1].is_finite()).map(|w| w[1] / w[0]).collect();
    median(ratios)
}

/// Iterates `k2 <- map(k2, x)` until the update's infinity norm is at most
/// `cfg.tol` or `cfg.max_iter` passes are spent. Non-convergence is reported
/// in the result, not as an error.
pub fn fixed_point_iterate<M: StepMap + ?Sized>(
    map: &M,
    x: &DVector<f64>,
    k2_init: &DVector<f64>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    check_len("fixed point state", map.dim(), x.len())?;
    check_len("fixed point initial iterate", map.dim(), k2_init.len())?;
    let mut k2 = k2_init.clone();
    let mut deltas = Vec::new();
    let mut best = (f64::INFINITY, k2.clone());
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let next = map.step(&k2, x);
        let delta = (&next - &k2).amax();
        if !delta.is_finite() || next.iter().any(|v| !v.is_finite()) {
            deltas.push(f64::INFINITY);
            break;
        }
        deltas.push(delta);
        if delta < best.0 {
            best = (delta, next.clone());
        }
        k2 = next;
        if delta <= cfg.tol {
            converged = true;
            break;
        }
    }
    let final_delta = deltas.last().copied().unwrap_or(f64::INFINITY);
    let k2_star = if converged { k2 } else { best.1 };
    Ok(FixedPointResult {
        k2_star,
        iterations: deltas.len(),
        converged,
        final_delta,
        rate_estimate: rate_estimate(&deltas),
        deltas,
    })
}

/// Rejects a model trained for another system or step size.
pub fn check_model_matches(model: &Model, system: &dyn DynamicalSystem, dt: f64) -> Result<()> {
    if model.meta.system != system.name() {
        return Err(Error::Usage(format!("model was trained on {:?}, not {:?}", model.meta.system, system.name())));
    }
    if (model.meta.dt - dt).abs() > 1e-12 * dt.abs().max(1.0) {
        return Err(Error::Usage(format!("model was trained at dt = {}, not {dt}", model.meta.dt)));
    }
    if model.params.n != system.dim() {
        return Err(Error::Usage(format!(
            "model state dimension {} does not match the system's {}",
            model.params.n,
            system.dim()
        )));
    }
    Ok(())
}

fn initial_iterate(policy: InitPolicy, k1: &DVector<f64>, previous: Option<&DVector<f64>>) -> DVector<f64> {
    match (policy, previous) {
        (InitPolicy::PreviousStep, Some(prev)) => prev.clone(),
        (InitPolicy::PreviousStep | InitPolicy::FOfX, _) => k1.clone(),
        (InitPolicy::Zeros, _) => DVector::zeros(k1.len()),
    }
}

/// One trapezoidal step with the network's fixed point as `k2`:
/// `x_next = x + dt/2 (f(x) + k2*)`.
pub fn conns_step(
    model: &Model,
    system: &dyn DynamicalSystem,
    x: &DVector<f64>,
    dt: f64,
    cfg: &FixedPointConfig,
) -> Result<(DVector<f64>, FixedPointResult)> {
    check_model_matches(model, system, dt)?;
    check_len("state", system.dim(), x.len())?;
    let k1 = system.rhs(x);
    let init = initial_iterate(cfg.init_policy, &k1, None);
    let fp = fixed_point_iterate(model, x, &init, cfg)?;
    let next = x + (&k1 + &fp.k2_star) * (0.5 * dt);
    Ok((next, fp))
}

/// A network-driven trajectory with per-step solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnsTrajectory {
    pub record: TrajectoryRecord,
    /// Steps whose iteration hit `max_iter` (only with accept-best).
    pub unconverged_steps: Vec<usize>,
    pub rate_estimates: Vec<Option<f64>>,
}

/// Integrates `[0, t_end]` with the network in place of Newton.
pub fn conns_simulate(
    model: &Model,
    system: &dyn DynamicalSystem,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    cfg: &FixedPointConfig,
) -> Result<TrajectoryRecord> {
    conns_simulate_detailed(model, system, x0, dt, t_end, cfg).map(|t| t.record)
}

pub fn conns_simulate_detailed(
    model: &Model,
    system: &dyn DynamicalSystem,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    cfg: &FixedPointConfig,
) -> Result<ConnsTrajectory> {
    cfg.validate()?;
    check_model_matches(model, system, dt)?;
    check_len("initial state", system.dim(), x0.len())?;
    let policy = cfg.on_failure.unwrap_or_else(|| FailurePolicy::default_for(model));
    let steps = step_count(dt, t_end)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut iterations = Vec::with_capacity(steps);
    let mut unconverged = Vec::new();
    let mut rates = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut previous: Option<DVector<f64>> = None;
    times.push(0.0);
    states.push(x.clone());
    for step in 0..steps {
        let k1 = system.rhs(&x);
        let init = initial_iterate(cfg.init_policy, &k1, previous.as_ref());
        let fp = fixed_point_iterate(model, &x, &init, cfg)?;
        if !fp.converged {
            if policy == FailurePolicy::Abort {
                return Err(Error::Step {
                    step,
                    message: format!(
                        "fixed-point iteration did not converge in {} passes (last update {:e})",
                        cfg.max_iter, fp.final_delta
                    ),
                });
            }
            unconverged.push(step);
        }
        iterations.push(fp.iterations);
        rates.push(fp.rate_estimate);
        x = &x + (&k1 + &fp.k2_star) * (0.5 * dt);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Step { step, message: "state became non-finite".into() });
        }
        previous = Some(fp.k2_star);
        times.push((step + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(ConnsTrajectory {
        record: TrajectoryRecord {
            system: system.name().to_string(),
            dt,
            times,
            states,
            iterations_per_step: iterations,
            iteration_label: "conns_iters".into(),
        },
        unconverged_steps: unconverged,
        rate_estimates: rates,
    })
}
