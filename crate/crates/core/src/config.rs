//! JSON run configuration shared by the command-line tool and the
//! end-to-end experiments.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::GridSpec;
use crate::integrator::{K2Init, NewtonConfig};
use crate::network::{Architecture, TrainingConfig};
use crate::projection::ProjectionMode;
use crate::runtime::FixedPointConfig;
use crate::systems::{make_system, DynamicalSystem as _, InitialConditionSampler, System, SystemFile};

/// Largest step size accepted.
pub const MAX_DT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub base: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
    /// A system parameter file; relative paths resolve against the config's
    /// directory. Takes precedence over `params`.
    #[serde(default)]
    pub params_path: Option<PathBuf>,
    pub sampler: SamplerBlock,
    /// Test initial conditions use `scale * test_scale_factor`.
    #[serde(default = "one")]
    pub test_scale_factor: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationBlock {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "IntegrationBlock::default_tol")]
    pub tol: f64,
    #[serde(default = "IntegrationBlock::default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub k2_init: K2Init,
}

impl IntegrationBlock {
    fn default_tol() -> f64 {
        1e-9
    }
    fn default_max_iter() -> usize {
        50
    }

    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig { tol: self.tol, max_iter: self.max_iter, k2_init: self.k2_init }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Cap on training samples (uniform subsample); `None` keeps all.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitBlock {
    /// Samples propagated for the data-aware projection; `None` uses all.
    #[serde(default = "InitBlock::default_columns")]
    pub max_columns: Option<usize>,
    #[serde(default = "InitBlock::default_max_iter")]
    pub max_iter: usize,
}

impl InitBlock {
    fn default_columns() -> Option<usize> {
        Some(4096)
    }
    fn default_max_iter() -> usize {
        10_000
    }
}

impl Default for InitBlock {
    fn default() -> Self {
        InitBlock { max_columns: Self::default_columns(), max_iter: Self::default_max_iter() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub arch: Architecture,
    pub unconstrained: TrainingConfig,
    pub constrained: TrainingConfig,
    #[serde(default)]
    pub init: InitBlock,
    /// Retrain the unconstrained model so it stops at the constrained
    /// model's final loss.
    #[serde(default)]
    pub match_loss: bool,
    /// Standardize network inputs and outputs.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointBlock {
    pub constrained: FixedPointConfig,
    pub unconstrained: FixedPointConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFieldBlock {
    pub anchor: Vec<f64>,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    /// Also evaluate on the training trajectories.
    #[serde(default = "default_true")]
    pub training_split: bool,
    /// Trajectories drawn in each overlay plot.
    #[serde(default = "EvalBlock::default_overlays")]
    pub overlays: usize,
    #[serde(default)]
    pub vector_field: Option<VectorFieldBlock>,
}

fn default_true() -> bool {
    true
}

impl EvalBlock {
    fn default_overlays() -> usize {
        3
    }
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock { training_split: true, overlays: Self::default_overlays(), vector_field: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemBlock,
    pub integration: IntegrationBlock,
    pub data: DataBlock,
    pub train: TrainBlock,
    pub fixed_point: FixedPointBlock,
    #[serde(default)]
    pub eval: EvalBlock,
    /// Directory containing the config file; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn field(path: &str, ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message()))
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn build_system(&self) -> Result<System> {
        match &self.system.params_path {
            Some(p) => {
                let file = SystemFile::load(&self.resolve(p))?;
                field("system.params_path", file.name == self.system.name, || {
                    format!("file describes {:?}, config names {:?}", file.name, self.system.name)
                })?;
                file.build()
            }
            None => make_system(&self.system.name, &self.system.params),
        }
    }

    pub fn train_sampler(&self) -> Result<InitialConditionSampler> {
        InitialConditionSampler::new(
            DVector::from_vec(self.system.sampler.base.clone()),
            DVector::from_vec(self.system.sampler.scale.clone()),
            self.data.seed,
        )
    }

    /// Test initial conditions come from the same streams as training
    /// (disjoint trajectory ids) unless the test scale differs, in which
    /// case a separate seed is used.
    pub fn test_sampler(&self) -> Result<InitialConditionSampler> {
        let train = self.train_sampler()?;
        if self.system.test_scale_factor == 1.0 {
            return Ok(train);
        }
        let scaled = train.scaled(self.system.test_scale_factor)?;
        InitialConditionSampler::new(scaled.base().clone(), scaled.scale().clone(), self.data.seed ^ TEST_SEED_SALT)
    }

    /// Checks every field; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let system = self.build_system()?;
        let n = system.dim();
        let s = &self.system;
        field("system.sampler.base", s.sampler.base.len() == n, || {
            format!("needs {n} entries, got {}", s.sampler.base.len())
        })?;
        field("system.sampler.scale", s.sampler.scale.len() == n, || {
            format!("needs {n} entries, got {}", s.sampler.scale.len())
        })?;
        field("system.sampler.base", s.sampler.base.iter().all(|v| v.is_finite()), || "entries must be finite".into())?;
        field("system.sampler.scale", s.sampler.scale.iter().all(|v| v.is_finite() && *v >= 0.0), || {
            "entries must be finite and non-negative".into()
        })?;
        field("system.test_scale_factor", s.test_scale_factor > 0.0 && s.test_scale_factor.is_finite(), || {
            "must be positive".into()
        })?;

        let i = &self.integration;
        field("integration.dt", i.dt > 0.0 && i.dt <= MAX_DT, || format!("{} is outside (0, {MAX_DT}]", i.dt))?;
        field("integration.t_end", i.t_end >= i.dt && i.t_end.is_finite(), || {
            format!("{} must be at least dt", i.t_end)
        })?;
        field("integration.tol", i.tol > 0.0, || "must be positive".into())?;
        field("integration.max_iter", i.max_iter >= 1, || "must be at least 1".into())?;

        let d = &self.data;
        field("data.n_train", d.n_train >= 1, || "must be at least 1".into())?;
        field("data.n_test", d.n_test >= 1, || "must be at least 1".into())?;
        field("data.max_samples", d.max_samples != Some(0), || "must be positive".into())?;

        let t = &self.train;
        t.arch.validate().map_err(|e| Error::config("train.arch", e.to_string()))?;
        t.unconstrained.validate().map_err(|e| Error::config("train.unconstrained", e.to_string()))?;
        t.constrained.validate().map_err(|e| Error::config("train.constrained", e.to_string()))?;
        field("train.unconstrained.projection_mode", t.unconstrained.projection_mode == ProjectionMode::None, || {
            "the unconstrained model must use projection_mode \"none\"".into()
        })?;
        field("train.constrained.projection_mode", t.constrained.projection_mode != ProjectionMode::None, || {
            "the constrained model needs \"symmetric\" or \"spectral\"".into()
        })?;
        field("train.init.max_columns", t.init.max_columns != Some(0), || "must be positive".into())?;
        field("train.init.max_iter", t.init.max_iter >= 1, || "must be at least 1".into())?;

        self.fixed_point.constrained.validate().map_err(|e| Error::config("fixed_point.constrained", e.to_string()))?;
        self.fixed_point
            .unconstrained
            .validate()
            .map_err(|e| Error::config("fixed_point.unconstrained", e.to_string()))?;

        if let Some(vf) = &self.eval.vector_field {
            field("eval.vector_field.anchor", vf.anchor.len() == n, || {
                format!("needs {n} entries, got {}", vf.anchor.len())
            })?;
            let (a, b) = vf.grid.axes;
            field("eval.vector_field.grid.axes", a != b && a < n && b < n, || {
                format!("({a}, {b}) must be distinct and below {n}")
            })?;
            field("eval.vector_field.grid", vf.grid.points >= 2 && vf.grid.half_width > 0.0, || {
                "needs at least 2 points and a positive half_width".into()
            })?;
        }
        Ok(())
    }
}

const TEST_SEED_SALT: u64 = 0x7e57_5eed;
