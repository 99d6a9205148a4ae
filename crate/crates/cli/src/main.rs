//! `nxn`: config-driven runner for non-expansive ODE-block networks.
//!
//! One binary, batch subcommands. Every run writes its artifacts (and an
//! echo of the fully resolved config) under a directory named by the config
//! hash and seed; identical configs reproduce identical bytes apart from
//! wall-clock columns. NXN_THREADS caps worker parallelism (default 1).

use clap::{Args, Parser, Subcommand};
use nxn_core::config::{ExperimentConfig, TaskKind};
use nxn_core::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nxn", version, about = "Non-expansive ODE-network experiments")]
struct Cli {
    /// Output root for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tableau: Option<String>,
    /// "nonexp" or "baseline".
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, task: TaskKind) -> Result<ExperimentConfig, nxn_core::NxnError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::for_task(task),
        };
        cfg.task = task;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = &self.tableau {
            cfg.architecture.tableau = t.clone();
        }
        if let Some(m) = &self.model {
            cfg.architecture.model = m.clone();
        }
        if let Some(i) = self.iters {
            cfg.optimizer.iters = i;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a task described entirely by a config file.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Print tableau name, Q matrix, generalized eigenvalues and radius.
    Radius,
    /// Monte-Carlo circle-contractivity checks (plus net checks with a checkpoint).
    Verify {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Train the synthetic-image denoiser.
    TrainDenoiser {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train the toy classifier (optionally adversarially).
    TrainClassifier {
        #[command(flatten)]
        common: ConfigArgs,
        /// Adversarial training perturbation size.
        #[arg(long)]
        adv_eps: Option<f64>,
        /// Adversarial training PGD iterations.
        #[arg(long)]
        adv_iters: Option<usize>,
    },
    /// Robust-accuracy curve of a trained classifier under l2-PGD.
    AttackEval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        /// Comma-separated ascending epsilons starting at 0.
        #[arg(long)]
        eps_grid: Option<String>,
        #[arg(long)]
        pgd_iters: Option<usize>,
    },
    /// Plug-and-Play deblurring with a trained averaged denoiser.
    PnpDeblur {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        kernel: Option<String>,
        /// Step size; defaults to 1/|K|^2.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        pnp_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn build_config(cmd: &Command) -> Result<ExperimentConfig, nxn_core::NxnError> {
    match cmd {
        Command::Run { config } => ExperimentConfig::from_path(config),
        Command::Radius => Ok(ExperimentConfig::for_task(TaskKind::Radius)),
        Command::Verify { common, samples, checkpoint } => {
            let mut cfg = common.resolve(TaskKind::Verify)?;
            let mut section = cfg.verify.clone().unwrap_or_default();
            if let Some(s) = samples {
                section.samples = *s;
            }
            if let Some(c) = checkpoint {
                section.checkpoint = Some(c.clone());
            }
            cfg.verify = Some(section);
            Ok(cfg)
        }
        Command::TrainDenoiser { common } => {
            let mut cfg = common.resolve(TaskKind::TrainDenoiser)?;
            cfg.data.kind = "synth-denoise".into();
            Ok(cfg)
        }
        Command::TrainClassifier { common, adv_eps, adv_iters } => {
            let mut cfg = common.resolve(TaskKind::TrainClassifier)?;
            cfg.data.kind = "toy-classify".into();
            if adv_eps.is_some() || adv_iters.is_some() {
                let mut adv = cfg
                    .adversarial
                    .clone()
                    .unwrap_or_else(|| serde_json::from_str("{}").unwrap());
                if let Some(e) = adv_eps {
                    adv.eps = *e;
                }
                if let Some(i) = adv_iters {
                    adv.pgd_iters = *i;
                }
                cfg.adversarial = Some(adv);
            }
            Ok(cfg)
        }
        Command::AttackEval { common, checkpoint, eps_grid, pgd_iters } => {
            let mut cfg = common.resolve(TaskKind::AttackEval)?;
            let mut section = cfg.attack.clone().unwrap_or_default();
            section.checkpoint = Some(checkpoint.clone());
            if let Some(grid) = eps_grid {
                let parsed: Result<Vec<f64>, _> =
                    grid.split(',').map(|t| t.trim().parse::<f64>()).collect();
                section.eps_grid = parsed
                    .map_err(|e| nxn_core::NxnError::Config(format!("bad eps grid: {e}")))?;
            }
            if let Some(n) = pgd_iters {
                section.pgd_iters = *n;
            }
            cfg.attack = Some(section);
            Ok(cfg)
        }
        Command::PnpDeblur { common, checkpoint, kernel, tau, pnp_iters, tol } => {
            let mut cfg = common.resolve(TaskKind::PnpDeblur)?;
            let mut section = cfg.pnp.clone().unwrap_or_default();
            section.checkpoint = Some(checkpoint.clone());
            if let Some(k) = kernel {
                section.kernel = k.clone();
            }
            if let Some(t) = tau {
                section.tau = Some(*t);
            }
            if let Some(n) = pnp_iters {
                section.iters = *n;
            }
            if let Some(t) = tol {
                section.tol = *t;
            }
            cfg.pnp = Some(section);
            Ok(cfg)
        }
    }
}

fn run(cli: &Cli) -> Result<(), nxn_core::NxnError> {
    let cfg = build_config(&cli.command)?;
    let artifacts = runner::run_config(&cfg, &cli.out)?;
    match cfg.task {
        TaskKind::Radius => {
            print!("{}", std::fs::read_to_string(artifacts.dir.join("radius.csv"))?);
        }
        TaskKind::Verify => {
            print!("{}", std::fs::read_to_string(artifacts.dir.join("verify.csv"))?);
        }
        _ => {}
    }
    println!("run dir: {}", artifacts.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": format!("{e}"),
                "kind": error_kind(&e),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &nxn_core::NxnError) -> &'static str {
    use nxn_core::NxnError::*;
    match e {
        DimensionMismatch { .. } => "dimension-mismatch",
        RejectedInput(_) => "rejected-input",
        RejectedConfig(_) => "rejected-config",
        UnsupportedTableau(_) => "unsupported-tableau",
        Singular(_) => "numerical-singularity",
        Divergence { .. } => "divergence",
        Checkpoint(_) => "checkpoint",
        Io(_) => "io",
        Config(_) => "config",
    }
}
