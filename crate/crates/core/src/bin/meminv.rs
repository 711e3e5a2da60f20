//! Command-line entry point. Exit status: 0 success, 1 invalid input or
//! configuration, 2 I/O or malformed file, 3 numerical failure.

use clap::{Parser, Subcommand};
use meminv::config::ExperimentConfig;
use meminv::experiment::{self, ScenarioSummary};
use meminv::gradcheck::{run_gradcheck, GradCheckOptions};
use meminv::io;
use meminv::trainer::Trainer;
use meminv::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "meminv", version, about = "Memory-based invariance learning for unsupervised domain adaptation")]
struct Cli {
    /// Worker threads for per-sample work (overrides `train.threads`);
    /// results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, target-train and target-test datasets.
    Generate { config: PathBuf },
    /// Train on previously generated datasets.
    Train {
        config: PathBuf,
        /// Run the six-row ablation grid instead of a single model.
        #[arg(long, conflicts_with = "resume")]
        grid: bool,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target test split.
    Eval {
        config: PathBuf,
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random instances per component.
        #[arg(long, default_value_t = 16)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Perturb one component's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Run the ablation grid (same as `train --grid`).
    Grid { config: PathBuf },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print a config with every setting explicit (the defaults if no file
    /// is given).
    Dump { config: Option<PathBuf> },
}

/// A failure together with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path, threads: Option<u16>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })?;
    if let Some(t) = threads {
        cfg.train.threads = t as usize;
    }
    Ok(cfg)
}

fn print_metrics(label: &str, m: &meminv::eval::RetrievalMetrics) {
    println!(
        "{label}: rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  rank20 {:.4}  mAP {:.4}",
        m.rank1, m.rank5, m.rank10, m.rank20, m.map
    );
}

fn generate(config: &Path, threads: Option<u16>) -> CmdResult {
    let cfg = load_config(config, threads)?;
    let sc = experiment::generate(&cfg)?;
    println!("wrote datasets to {}", cfg.output_dir.display());
    println!("{}", ScenarioSummary::of(&sc));
    Ok(())
}

fn grid(cfg: &ExperimentConfig) -> CmdResult {
    let sc = experiment::load_scenario(&cfg.output_dir)?;
    let rows = experiment::grid(cfg, &sc)?;
    for row in &rows {
        if let Some(m) = row.final_metrics() {
            print_metrics(&format!("{:>16}", row.name), &m);
        }
    }
    println!("wrote {}", cfg.output_dir.join("grid").display());
    Ok(())
}

fn train(config: &Path, threads: Option<u16>, grid_flag: bool, resume: Option<&Path>) -> CmdResult {
    let cfg = load_config(config, threads)?;
    if grid_flag {
        return grid(&cfg);
    }
    let sc = experiment::load_scenario(&cfg.output_dir)?;
    let state = resume.map(io::load_checkpoint).transpose()?;
    let state = experiment::train(&cfg, &sc, state)?;
    for r in &state.reports {
        println!(
            "epoch {:>3}  L_src {:.4}  L_tgt {:.4}  L_gpp {:.4}  rank1 {:.4}  mAP {:.4}",
            r.epoch, r.l_src, r.l_tgt, r.l_gpp, r.metrics.rank1, r.metrics.map
        );
    }
    println!("wrote {}", cfg.output_dir.join(experiment::METRICS_FILE).display());
    Ok(())
}

fn eval(config: &Path, threads: Option<u16>, checkpoint: &Path) -> CmdResult {
    let cfg = load_config(config, threads)?;
    let sc = experiment::load_scenario(&cfg.output_dir)?;
    let mut state = io::load_checkpoint(checkpoint)?;
    state.config.threads = cfg.train.threads;
    let epoch = state.epoch;
    let trainer = Trainer::resume(state, &sc.source, &sc.target_train, &sc.target_test)?;
    print_metrics(&format!("epoch {epoch}"), &trainer.evaluate()?);
    Ok(())
}

fn gradcheck(opts: GradCheckOptions) -> CmdResult {
    let report = run_gradcheck(&opts)?;
    for c in &report.components {
        println!(
            "{:<24} {:>4} instances  max rel err {:.3e}  {}",
            c.name,
            c.instances,
            c.max_relative_error,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    println!(
        "{} components, {} instances",
        report.components.len(),
        report.total_instances()
    );
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst().expect("a failing suite has components");
    Err(Failure {
        code: 3,
        message: format!(
            "gradient check failed; worst: {} (instance {}, relative error {:.3e} > {:.0e})",
            worst.name, worst.worst_instance, worst.max_relative_error, opts.tol
        ),
    })
}

fn dump(config: Option<&Path>, threads: Option<u16>) -> CmdResult {
    let cfg = match config {
        Some(path) => load_config(path, threads)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(t) = threads {
                cfg.train.threads = t as usize;
            }
            cfg
        }
    };
    print!("{}", cfg.dump()?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = cli.threads;
    let result = match cli.command {
        Command::Generate { config } => generate(&config, threads),
        Command::Train { config, grid, resume } => train(&config, threads, grid, resume.as_deref()),
        Command::Eval { config, checkpoint } => eval(&config, threads, &checkpoint),
        Command::Gradcheck {
            seed,
            instances,
            tol,
            corrupt,
        } => gradcheck(GradCheckOptions {
            seed,
            instances,
            tol,
            corrupt,
            ..GradCheckOptions::default()
        }),
        Command::Grid { config } => load_config(&config, threads).and_then(|cfg| grid(&cfg)),
        Command::Config {
            action: ConfigAction::Dump { config },
        } => dump(config.as_deref(), threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
