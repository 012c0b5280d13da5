use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use conns::config::RunConfig;
use conns::evaluation::{export_sv_histogram, Method, Split};
use conns::network::{load_model, save_model};
use conns::pipeline::{self, Layout};
use conns::projection::ProjectionMode;
use conns::Error;

#[derive(Parser, Debug)]
#[command(name = "conns", version, about = "Contraction-constrained Newton emulator for trapezoidal IRK")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the data and training seeds of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for per-trajectory parallelism.
    #[arg(long, global = true, env = "CONNS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Newton reference trajectories of the test split as CSV files.
    Simulate,
    /// Newton-step training and test datasets.
    Generate,
    /// Trains a model on the generated training set.
    Train {
        #[arg(value_enum)]
        mode: TrainMode,
        /// Constrained mode: start from a projected random initialization
        /// instead of the unconstrained checkpoint.
        #[arg(long)]
        cold: bool,
        /// Stop once the training loss reaches this value.
        #[arg(long)]
        loss_target: Option<f64>,
    },
    /// Runs Newton and both models, writes metrics and plots.
    Eval,
    /// Per-layer singular values and feasibility of a checkpoint.
    Audit { checkpoint: PathBuf },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Unconstrained,
    Constrained,
    /// Unconstrained, constrained, then a loss-matched unconstrained retrain.
    Pair,
}

enum Failure {
    Usage(String),
    Infeasible(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config { .. } | Error::Json(_) | Error::Argument(_) | Error::Io { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Usage("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.unconstrained.seed = seed;
        cfg.train.constrained.seed = seed;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found at {} (run the earlier step first)", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    conns::evaluation::write_text(path, &text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let system = cfg.build_system()?;
            let paths = pipeline::write_reference_trajectories(&cfg, &system, &layout.trajectories())?;
            println!("wrote {} trajectories to {}", paths.len(), layout.trajectories().display());
        }
        Command::Generate => {
            let cfg = load_config(cli)?;
            let system = cfg.build_system()?;
            let (train, test) = pipeline::generate(&cfg, &system)?;
            pipeline::save_datasets(&layout, &train, &test)?;
            println!(
                "train: {} samples from {} trajectories; test: {} samples from {} trajectories",
                train.len(),
                train.trajectory_count,
                test.len(),
                test.trajectory_count
            );
        }
        Command::Train { mode, cold, loss_target } => {
            let cfg = load_config(cli)?;
            let system = cfg.build_system()?;
            require(&layout.train_data(), "training set")?;
            let train = conns::dataset::load_dataset(&layout.train_data())?;
            match mode {
                TrainMode::Unconstrained => {
                    let (model, report) = pipeline::train_unconstrained(&cfg, &system, &train, *loss_target)?;
                    pipeline::create_parent(&layout.model(Method::Unconstrained))?;
                    save_model(&model, &layout.model(Method::Unconstrained))?;
                    write_json(&layout.train_report(Method::Unconstrained), &report)?;
                    println!(
                        "unconstrained: final loss {:.6e} after {} epochs",
                        report.final_loss,
                        report.loss_history.len()
                    );
                }
                TrainMode::Constrained => {
                    let mut cfg = cfg;
                    if loss_target.is_some() {
                        cfg.train.constrained.loss_target = *loss_target;
                    }
                    let warm = if *cold {
                        None
                    } else {
                        let path = layout.model(Method::Unconstrained);
                        require(&path, "unconstrained checkpoint (or pass --cold)")?;
                        Some(load_model(&path)?)
                    };
                    let (model, training) = pipeline::train_constrained(&cfg, &system, &train, warm.as_ref())?;
                    pipeline::create_parent(&layout.model(Method::Constrained))?;
                    save_model(&model, &layout.model(Method::Constrained))?;
                    write_json(&layout.train_report(Method::Constrained), &training)?;
                    let worst =
                        training.report.sv_audit_history.last().map_or(0.0, |a| a.iter().cloned().fold(0.0, f64::max));
                    println!(
                        "constrained: final loss {:.6e}, largest singular value {worst:.9}",
                        training.report.final_loss
                    );
                }
                TrainMode::Pair => {
                    let pair = pipeline::train_pair(&cfg, &system, &train)?;
                    pipeline::save_pair(&layout, &pair)?;
                    println!(
                        "constrained loss {:.6e}; unconstrained loss {:.6e} (matched: {})",
                        pair.constrained_training.report.final_loss,
                        pair.unconstrained_report.final_loss,
                        pair.loss_matched
                    );
                }
            }
        }
        Command::Eval => {
            let cfg = load_config(cli)?;
            let system = cfg.build_system()?;
            for method in [Method::Constrained, Method::Unconstrained] {
                require(&layout.model(method), &format!("{} checkpoint", method.as_str()))?;
            }
            let (constrained, unconstrained) = pipeline::load_pair_models(&layout)?;
            let eval = pipeline::evaluate(&cfg, &system, &constrained, &unconstrained)?;
            pipeline::write_evaluation(&cfg, &eval, &constrained, &unconstrained, &layout.eval_dir())?;
            for split in [Split::Training, Split::Test] {
                for method in [Method::Newton, Method::Constrained, Method::Unconstrained] {
                    if let (Some(err), Some(it)) = (
                        eval.metrics.mean_error(method, split),
                        eval.metrics.get(method, split, "iterations_mean", "all"),
                    ) {
                        println!("{:<8} {:<13} error {err:.4e}  iterations {it:.1}", split.as_str(), method.as_str());
                    }
                }
            }
            println!("wrote {}", layout.eval_dir().display());
        }
        Command::Audit { checkpoint } => {
            let model = load_model(checkpoint)?;
            let (svs, feasible) = pipeline::audit(&model)?;
            let spectra = export_sv_histogram(&model.params)?;
            println!("mode {} eps {}", model.meta.projection_mode.as_str(), model.meta.eps_proj);
            for (s, sv) in spectra.iter().zip(&svs) {
                println!("{:<4} max singular value {sv:.12}", s.layer);
            }
            let constrained = model.meta.projection_mode != ProjectionMode::None;
            println!("feasible: {feasible}");
            if constrained && !feasible {
                return Err(Failure::Infeasible(format!("{} violates its constraint", checkpoint.display())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible(m)) | Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
