//! End-to-end experiment steps: reference simulation, data generation,
//! training both network variants, and evaluation against Newton.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_dataset, save_dataset, split_by_trajectory, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    export_sv_histogram, export_vector_field, overlay_csv, render_histogram_svg, render_overlay_svg, render_quiver_svg,
    spectra_to_csv, summarize, trajectory_error, write_text, Method, MetricsTable, Series, Split,
};
use crate::integrator::{simulate, K2Init, TrajectoryRecord};
use crate::network::{
    load_model, loss_batch, save_model, train, train_from, Batch, Model, ModelMeta, NetworkParams, Standardization,
    TrainReport, TrainingConfig,
};
use crate::projection::{constrained_init, project_network, InitOptions, ProjectionReport, SolverSettings};
use crate::runtime::{conns_simulate_detailed, fixed_point_iterate, FixedPointConfig};
use crate::systems::{DynamicalSystem, InitialConditionSampler, System};

/// File layout under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.cnns")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data").join("test.cnns")
    }

    pub fn model(&self, method: Method) -> PathBuf {
        self.root.join("models").join(format!("{}.cnnm", method.as_str()))
    }

    pub fn train_report(&self, method: Method) -> PathBuf {
        self.root.join("models").join(format!("{}_report.json", method.as_str()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Sampler and trajectory ids of each split. With equal train and test
/// distributions both splits share one sampler and use disjoint streams.
pub fn split_samplers(cfg: &RunConfig) -> Result<(InitialConditionSampler, InitialConditionSampler)> {
    Ok((cfg.train_sampler()?, cfg.test_sampler()?))
}

/// Initial condition of trajectory `id` drawn from `sampler`.
pub fn initial_condition(sampler: &InitialConditionSampler, id: u32) -> DVector<f64> {
    sampler.stream(u64::from(id)).sample()
}

/// Newton reference trajectories for the given ids.
pub fn reference_trajectories(
    cfg: &RunConfig,
    system: &System,
    sampler: &InitialConditionSampler,
    ids: &[u32],
) -> Result<Vec<TrajectoryRecord>> {
    let newton = cfg.integration.newton();
    ids.par_iter()
        .map(|&id| {
            simulate(system, &initial_condition(sampler, id), cfg.integration.dt, cfg.integration.t_end, &newton)
                .map_err(|e| Error::Trajectory { trajectory: id as usize, source: Box::new(e) })
        })
        .collect()
}

/// Writes reference trajectories for the test split as
/// `traj_<id>.csv` (plus JSON sidecars) and returns the written paths.
pub fn write_reference_trajectories(cfg: &RunConfig, system: &System, dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, test_sampler) = split_samplers(cfg)?;
    let ids = test_ids(cfg);
    let records = reference_trajectories(cfg, system, &test_sampler, &ids)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(ids.len());
    for (id, rec) in ids.iter().zip(&records) {
        let stem = format!("traj_{id:03}");
        rec.write(dir, &stem)?;
        paths.push(dir.join(format!("{stem}.csv")));
    }
    Ok(paths)
}

fn shared_distribution(cfg: &RunConfig) -> bool {
    cfg.system.test_scale_factor == 1.0
}

/// Test trajectory ids: after the training ids when the splits share a
/// distribution, otherwise `0..n_test` of the test sampler.
pub fn test_ids(cfg: &RunConfig) -> Vec<u32> {
    let offset = if shared_distribution(cfg) { cfg.data.n_train } else { 0 };
    (offset..offset + cfg.data.n_test).map(|i| i as u32).collect()
}

pub fn train_ids(cfg: &RunConfig) -> Vec<u32> {
    (0..cfg.data.n_train as u32).collect()
}

/// Newton-step datasets for the training and test splits.
///
/// With a shared distribution all trajectories are generated together and
/// split by trajectory; otherwise the test split has its own sampler.
pub fn generate(cfg: &RunConfig, system: &System) -> Result<(Dataset, Dataset)> {
    let newton = cfg.integration.newton();
    let (dt, t_end) = (cfg.integration.dt, cfg.integration.t_end);
    let (train_sampler, test_sampler) = split_samplers(cfg)?;
    if shared_distribution(cfg) {
        let total = cfg.data.n_train + cfg.data.n_test;
        let all = generate_dataset(system, &train_sampler, total, dt, t_end, &newton)?;
        let train_set: std::collections::HashSet<u32> = train_ids(cfg).into_iter().collect();
        let (train, test): (Vec<_>, Vec<_>) =
            all.samples.iter().cloned().partition(|s| train_set.contains(&s.trajectory_id));
        let mut train_ds = all.clone();
        train_ds.samples = train;
        train_ds.trajectory_count = cfg.data.n_train as u32;
        let mut test_ds = all;
        test_ds.samples = test;
        test_ds.trajectory_count = cfg.data.n_test as u32;
        Ok((train_ds, test_ds))
    } else {
        let train = generate_dataset(system, &train_sampler, cfg.data.n_train, dt, t_end, &newton)?;
        let test = generate_dataset(system, &test_sampler, cfg.data.n_test, dt, t_end, &newton)?;
        Ok((train, test))
    }
}

/// Random trajectory-level split of an existing dataset, for ad hoc use.
pub fn resplit(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split_by_trajectory(ds, test_fraction, seed)
}

pub fn save_datasets(layout: &Layout, train: &Dataset, test: &Dataset) -> Result<()> {
    for (path, ds) in [(layout.train_data(), train), (layout.test_data(), test)] {
        create_parent(&path)?;
        save_dataset(ds, &path)?;
    }
    Ok(())
}

pub fn load_datasets(layout: &Layout) -> Result<(Dataset, Dataset)> {
    Ok((load_dataset(&layout.train_data())?, load_dataset(&layout.test_data())?))
}

/// The training set as the networks see it: capped and optionally
/// standardized.
pub fn training_view(cfg: &RunConfig, train: &Dataset) -> Result<(Dataset, Option<Standardization>)> {
    let capped = match cfg.data.max_samples {
        Some(max) => train.subsample(max, cfg.data.seed),
        None => train.clone(),
    };
    if cfg.train.normalize {
        let norm = Standardization::fit(&capped)?;
        Ok((norm.apply(&capped), Some(norm)))
    } else {
        Ok((capped, None))
    }
}

fn meta(cfg: &RunConfig, system: &System, tc: &TrainingConfig, norm: &Option<Standardization>) -> ModelMeta {
    ModelMeta {
        system: system.name().to_string(),
        dt: cfg.integration.dt,
        projection_mode: tc.projection_mode,
        eps_proj: tc.eps_proj,
        normalization: norm.clone(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstrainedTraining {
    pub report: TrainReport,
    /// Report of the data-aware projection; `None` for a cold start.
    pub init: Option<ProjectionReport>,
    /// Loss right after the data-aware projection.
    pub init_loss: Option<f64>,
    /// Loss of the same checkpoint after plain per-matrix projection.
    pub naive_init_loss: Option<f64>,
}

/// Trains the unconstrained model, optionally stopping at `loss_target`.
pub fn train_unconstrained(
    cfg: &RunConfig,
    system: &System,
    train_set: &Dataset,
    loss_target: Option<f64>,
) -> Result<(Model, TrainReport)> {
    let (view, norm) = training_view(cfg, train_set)?;
    let mut tc = cfg.train.unconstrained.clone();
    if loss_target.is_some() {
        tc.loss_target = loss_target;
    }
    let (params, report) = train(&view, cfg.train.arch, &tc)?;
    Ok((Model { params, meta: meta(cfg, system, &tc, &norm) }, report))
}

/// Trains the constrained model. With `warm` set, starts from the
/// data-aware projection of that unconstrained model; otherwise from a
/// projected random initialization.
pub fn train_constrained(
    cfg: &RunConfig,
    system: &System,
    train_set: &Dataset,
    warm: Option<&Model>,
) -> Result<(Model, ConstrainedTraining)> {
    let (view, norm) = training_view(cfg, train_set)?;
    let tc = &cfg.train.constrained;
    let spec = tc
        .projection_mode
        .spec(tc.eps_proj)?
        .ok_or_else(|| Error::config("train.constrained.projection_mode", "must not be none"))?;
    let result = match warm {
        None => {
            let (params, report) = train(&view, cfg.train.arch, tc)?;
            (params, ConstrainedTraining { report, init: None, init_loss: None, naive_init_loss: None })
        }
        Some(unconstrained) => {
            if unconstrained.params.architecture() != cfg.train.arch {
                return Err(Error::Usage("unconstrained checkpoint has a different architecture".into()));
            }
            if unconstrained.meta.normalization != norm {
                return Err(Error::Usage("unconstrained checkpoint was trained with a different normalization".into()));
            }
            let opts = InitOptions {
                max_columns: cfg.train.init.max_columns,
                seed: cfg.data.seed,
                solver: SolverSettings { max_iter: cfg.train.init.max_iter, ..SolverSettings::default() },
            };
            let batch = Batch::from_dataset(&view)?;
            let (init, init_report) = constrained_init(&unconstrained.params, &view, &spec, opts)?;
            let mut naive = unconstrained.params.clone();
            project_network(&mut naive, &spec)?;
            let init_loss = loss_batch(&init, &batch);
            let naive_loss = loss_batch(&naive, &batch);
            log::info!("data-aware init loss {init_loss:.4e}, naive projection loss {naive_loss:.4e}");
            let (params, report) = train_from(init, &view, tc)?;
            (
                params,
                ConstrainedTraining {
                    report,
                    init: Some(init_report),
                    init_loss: Some(init_loss),
                    naive_init_loss: Some(naive_loss),
                },
            )
        }
    };
    Ok((Model { params: result.0, meta: meta(cfg, system, tc, &norm) }, result.1))
}

/// Both trained models and their reports.
#[derive(Clone, Debug)]
pub struct TrainedPair {
    pub unconstrained: Model,
    pub unconstrained_report: TrainReport,
    pub constrained: Model,
    pub constrained_training: ConstrainedTraining,
    /// Whether the unconstrained model was stopped at the constrained loss.
    pub loss_matched: bool,
}

/// Unconstrained training, data-aware initialization and constrained
/// training. With `match_loss`, the constrained run stops once it reaches the
/// unconstrained model's loss; if it ends above it instead, the unconstrained
/// model is retrained from scratch and stopped at the constrained loss.
pub fn train_pair(cfg: &RunConfig, system: &System, train_set: &Dataset) -> Result<TrainedPair> {
    let (unconstrained, u_report) = train_unconstrained(cfg, system, train_set, None)?;
    let mut c_cfg = cfg.clone();
    if cfg.train.match_loss {
        let own = cfg.train.constrained.loss_target.unwrap_or(0.0);
        c_cfg.train.constrained.loss_target = Some(own.max(u_report.final_loss));
    }
    let (constrained, c_training) = train_constrained(&c_cfg, system, train_set, Some(&unconstrained))?;
    let c_loss = c_training.report.final_loss;
    if !cfg.train.match_loss || c_training.report.reached_target {
        return Ok(TrainedPair {
            unconstrained,
            unconstrained_report: u_report,
            constrained,
            constrained_training: c_training,
            loss_matched: cfg.train.match_loss,
        });
    }
    let (matched, m_report) = train_unconstrained(cfg, system, train_set, Some(c_loss))?;
    Ok(TrainedPair {
        loss_matched: m_report.reached_target,
        unconstrained: matched,
        unconstrained_report: m_report,
        constrained,
        constrained_training: c_training,
    })
}

pub fn save_pair(layout: &Layout, pair: &TrainedPair) -> Result<()> {
    let items = [
        (Method::Unconstrained, &pair.unconstrained, serde_json::to_string_pretty(&pair.unconstrained_report)?),
        (Method::Constrained, &pair.constrained, serde_json::to_string_pretty(&pair.constrained_training)?),
    ];
    for (method, model, report) in items {
        let path = layout.model(method);
        create_parent(&path)?;
        save_model(model, &path)?;
        write_text(&layout.train_report(method), &report)?;
    }
    Ok(())
}

pub fn load_pair_models(layout: &Layout) -> Result<(Model, Model)> {
    Ok((load_model(&layout.model(Method::Constrained))?, load_model(&layout.model(Method::Unconstrained))?))
}

/// Per-trajectory outcome for one method.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub records: Vec<Option<TrajectoryRecord>>,
    /// Per-state errors; infinite when the run failed.
    pub errors: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub failures: usize,
    pub unconverged_steps: usize,
}

/// Evaluation of one split.
#[derive(Clone, Debug)]
pub struct SplitEvaluation {
    pub split: Split,
    pub ids: Vec<u32>,
    pub reference: Vec<TrajectoryRecord>,
    pub newton: MethodRun,
    pub constrained: MethodRun,
    pub unconstrained: MethodRun,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsTable,
    pub splits: Vec<SplitEvaluation>,
}

fn run_model(
    model: &Model,
    system: &System,
    x0s: &[DVector<f64>],
    reference: &[TrajectoryRecord],
    cfg: &RunConfig,
    fp: &FixedPointConfig,
) -> Result<MethodRun> {
    let n = system.dim();
    let outcomes: Vec<Result<_>> = x0s
        .par_iter()
        .map(|x0| conns_simulate_detailed(model, system, x0, cfg.integration.dt, cfg.integration.t_end, fp))
        .collect();
    let mut run = MethodRun {
        records: Vec::with_capacity(x0s.len()),
        errors: Vec::with_capacity(x0s.len()),
        iterations: Vec::with_capacity(x0s.len()),
        failures: 0,
        unconverged_steps: 0,
    };
    for (outcome, reference) in outcomes.into_iter().zip(reference) {
        match outcome {
            Ok(t) => {
                run.errors.push(trajectory_error(reference, &t.record)?);
                run.iterations.push(t.record.total_iterations());
                run.unconverged_steps += t.unconverged_steps.len();
                run.records.push(Some(t.record));
            }
            Err(e @ (Error::Usage(_) | Error::Config { .. } | Error::Dimension { .. })) => return Err(e),
            Err(e) => {
                log::warn!("{} run failed: {e}", model.meta.projection_mode.as_str());
                run.failures += 1;
                run.errors.push(vec![f64::INFINITY; n]);
                run.iterations.push(0);
                run.records.push(None);
            }
        }
    }
    Ok(run)
}

fn evaluate_split(
    cfg: &RunConfig,
    system: &System,
    split: Split,
    sampler: &InitialConditionSampler,
    ids: Vec<u32>,
    constrained: &Model,
    unconstrained: &Model,
) -> Result<SplitEvaluation> {
    let reference = reference_trajectories(cfg, system, sampler, &ids)?;
    let x0s: Vec<DVector<f64>> = ids.iter().map(|&id| initial_condition(sampler, id)).collect();
    // Newton again with the other warm start: the solver noise floor.
    let mut alt = cfg.integration.newton();
    alt.k2_init = match alt.k2_init {
        K2Init::PreviousStep => K2Init::FOfX,
        K2Init::FOfX => K2Init::PreviousStep,
    };
    let newton_runs: Vec<TrajectoryRecord> = x0s
        .par_iter()
        .map(|x0| simulate(system, x0, cfg.integration.dt, cfg.integration.t_end, &alt))
        .collect::<Result<_>>()?;
    let newton = MethodRun {
        errors: reference.iter().zip(&newton_runs).map(|(r, p)| trajectory_error(r, p)).collect::<Result<_>>()?,
        iterations: reference.iter().map(TrajectoryRecord::total_iterations).collect(),
        records: newton_runs.into_iter().map(Some).collect(),
        failures: 0,
        unconverged_steps: 0,
    };
    let constrained_run = run_model(constrained, system, &x0s, &reference, cfg, &cfg.fixed_point.constrained)?;
    let unconstrained_run = run_model(unconstrained, system, &x0s, &reference, cfg, &cfg.fixed_point.unconstrained)?;
    Ok(SplitEvaluation {
        split,
        ids,
        reference,
        newton,
        constrained: constrained_run,
        unconstrained: unconstrained_run,
    })
}

/// Runs Newton and both models from every initial condition of the
/// evaluated splits and tabulates errors and iteration counts.
pub fn evaluate(cfg: &RunConfig, system: &System, constrained: &Model, unconstrained: &Model) -> Result<Evaluation> {
    let (train_sampler, test_sampler) = split_samplers(cfg)?;
    let mut splits = Vec::new();
    if cfg.eval.training_split {
        splits.push(evaluate_split(
            cfg,
            system,
            Split::Training,
            &train_sampler,
            train_ids(cfg),
            constrained,
            unconstrained,
        )?);
    }
    splits.push(evaluate_split(cfg, system, Split::Test, &test_sampler, test_ids(cfg), constrained, unconstrained)?);
    let mut metrics = MetricsTable::default();
    for s in &splits {
        for (method, run) in [
            (Method::Newton, &s.newton),
            (Method::Constrained, &s.constrained),
            (Method::Unconstrained, &s.unconstrained),
        ] {
            metrics.extend(summarize(method, s.split, &run.errors, &run.iterations)?);
        }
    }
    Ok(Evaluation { metrics, splits })
}

/// Writes the metrics CSV, overlay plots, spectra and (if configured) the
/// vector fields of both models.
pub fn write_evaluation(
    cfg: &RunConfig,
    eval: &Evaluation,
    constrained: &Model,
    unconstrained: &Model,
    dir: &Path,
) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &eval.metrics.to_csv())?;
    for s in &eval.splits {
        for k in 0..cfg.eval.overlays.min(s.ids.len()) {
            let mut series = vec![Series { label: "newton", record: &s.reference[k] }];
            if let Some(r) = &s.constrained.records[k] {
                series.push(Series { label: "constrained", record: r });
            }
            if let Some(r) = &s.unconstrained.records[k] {
                series.push(Series { label: "unconstrained", record: r });
            }
            let stem = format!("overlay_{}_{:03}", s.split.as_str(), s.ids[k]);
            write_text(&dir.join(format!("{stem}.csv")), &overlay_csv(&series))?;
            write_text(&dir.join(format!("{stem}.svg")), &render_overlay_svg(&series))?;
        }
    }
    for (method, model) in [(Method::Constrained, constrained), (Method::Unconstrained, unconstrained)] {
        let spectra = export_sv_histogram(&model.params)?;
        write_text(&dir.join(format!("sv_{}.csv", method.as_str())), &spectra_to_csv(&spectra))?;
        write_text(
            &dir.join(format!("sv_{}.svg", method.as_str())),
            &render_histogram_svg(&spectra, 40, &format!("{} singular values", method.as_str())),
        )?;
        if let Some(vf) = &cfg.eval.vector_field {
            let x = DVector::from_vec(vf.anchor.clone());
            let base = fixed_point_or_zero(model, &x, &cfg.fixed_point.constrained);
            let grid = export_vector_field(model, &x, &base, &vf.grid)?;
            write_text(&dir.join(format!("field_{}.csv", method.as_str())), &grid.to_csv())?;
            write_text(
                &dir.join(format!("field_{}.svg", method.as_str())),
                &render_quiver_svg(&grid, &format!("{} displacement field", method.as_str())),
            )?;
        }
    }
    Ok(())
}

/// The model's fixed point at `x` when the iteration settles, else zero.
pub fn fixed_point_or_zero(model: &Model, x: &DVector<f64>, cfg: &FixedPointConfig) -> DVector<f64> {
    let start = DVector::zeros(x.len());
    match fixed_point_iterate(model, x, &start, cfg) {
        Ok(fp) if fp.converged => fp.k2_star,
        _ => start,
    }
}

/// Network parameter sanity: the constrained model is feasible.
pub fn audit(model: &Model) -> Result<(Vec<f64>, bool)> {
    let svs = model.params.max_singular_values();
    let feasible = match model.meta.projection_mode.spec(model.meta.eps_proj)? {
        None => true,
        Some(spec) => model.params.weights().into_iter().all(|w| crate::projection::verify_feasible(w, &spec).feasible),
    };
    Ok((svs, feasible))
}

/// Parameters shared by tests that need a model without training.
pub fn untrained_model(cfg: &RunConfig, system: &System, seed: u64) -> Model {
    Model {
        params: NetworkParams::init(system.dim(), cfg.train.arch, seed),
        meta: meta(cfg, system, &cfg.train.unconstrained, &None),
    }
}
