//! Command-line front end: each subcommand runs one pipeline stage against
//! the artifact directory named in the experiment config, so a grid can be
//! resumed or re-driven stage by stage. Exit codes: 0 success, 2 bad
//! configuration, 3 a stage failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use remi::error::Error;
use remi::eval::{
    self, emit_report, run_experiment, ExperimentConfig, Layout, RunReport, StageFailure,
};

#[derive(Parser)]
#[command(name = "remi", version, about = "membership-guided unlearning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the artifact directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the forget-ratio list.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Override the privacy-term weight.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Override the unlearning step size.
    #[arg(long)]
    unlearn_lr: Option<f64>,
    /// Override the unlearning epoch cap.
    #[arg(long)]
    unlearn_max_epochs: Option<usize>,
    /// Pin the early-stop threshold instead of deriving it.
    #[arg(long)]
    stop_threshold: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(ratios) = &self.ratios {
            cfg.ratios = ratios.clone();
        }
        if let Some(l2) = self.lambda2 {
            cfg.unlearn.lambda2 = l2;
        }
        if let Some(lr) = self.unlearn_lr {
            cfg.unlearn.learning_rate = lr;
        }
        if let Some(cap) = self.unlearn_max_epochs {
            cfg.unlearn.max_epochs = cap;
        }
        if let Some(t) = self.stop_threshold {
            cfg.unlearn.stop_threshold = Some(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus and train target and shadow models.
    Train(Common),
    /// Train the membership probes from persisted models.
    AttackTrain(Common),
    /// Rank training samples by the guide and persist forget sets.
    SelectForget(Common),
    /// Run guided unlearning for every (seed, ratio) cell.
    Unlearn(Common),
    /// Train the from-scratch baselines on the remaining data.
    Retrain(Common),
    /// Recompute all metrics from artifacts and write the report.
    Evaluate(Common),
    /// Run every stage end to end.
    Report(Common),
}

fn init_workers() -> Result<(), Error> {
    let n = eval::worker_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn fail_code(e: &Error) -> ExitCode {
    if e.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn report_failures(failures: &[StageFailure]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in failures {
        eprintln!("error: {f}");
    }
    ExitCode::from(3)
}

fn summarize(report: &RunReport) {
    let complete = report.rows.iter().filter(|r| r.status == "complete").count();
    println!("{} of {} cells complete", complete, report.rows.len());
    for f in &report.failures {
        eprintln!("error: {f}");
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    init_workers()?;
    match cli.command {
        Command::Train(c) => Ok(report_failures(&eval::stage_train(&c.load()?)?)),
        Command::AttackTrain(c) => Ok(report_failures(&eval::stage_attack_train(&c.load()?)?)),
        Command::SelectForget(c) => Ok(report_failures(&eval::stage_select(&c.load()?)?)),
        Command::Unlearn(c) => Ok(report_failures(&eval::stage_unlearn(&c.load()?)?)),
        Command::Retrain(c) => Ok(report_failures(&eval::stage_retrain(&c.load()?)?)),
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let (mut report, failures) = eval::stage_evaluate(&cfg)?;
            report.failures = failures.iter().map(|f| f.to_string()).collect();
            emit_report(&report, &Layout::new(&cfg.output_dir))?;
            summarize(&report);
            Ok(report_failures(&failures))
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let report = run_experiment(&cfg)?;
            summarize(&report);
            println!("report at {}", Layout::new(&cfg.output_dir).report_csv().display());
            if report.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            fail_code(&e)
        }
    }
}
