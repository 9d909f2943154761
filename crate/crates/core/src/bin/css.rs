use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use css_core::harness::{compare_runs, run_experiment, run_oracles, ExperimentConfig};
use css_core::Result;

#[derive(Parser)]
#[command(name = "css", about = "Continual semantic segmentation experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). The reference toy task when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.step.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => {
                let text = serde_json::to_string(&ExperimentConfig::reference())?;
                ExperimentConfig::from_json(&text, &self.overrides)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as PNG images under `train/` and `val/`.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the first point of every sweep axis.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every sweep point.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare run directories against the first; exits 2 on regression.
    Compare {
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
    /// Run randomized self-checks against brute-force references.
    Oracle {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective config as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn print_summary(m: &css_core::harness::RunMetrics) {
    println!("{} ({}) config {}", m.name, m.label, m.config_hash);
    for r in &m.summary {
        let v = |x: Option<f64>| x.map_or("-".into(), |x| format!("{x:.4}"));
        println!(
            "  {:40} old {} new {} all {} all+bg {}",
            r.name,
            v(r.values.old),
            v(r.values.new),
            v(r.values.all),
            v(r.values.all_with_bg)
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let c = cfg.load()?;
            c.validate()?;
            c.dataset.save(&out)?;
            println!("wrote {} training and {} validation images to {}", c.dataset.train_count, c.dataset.val_count, out.display());
        }
        Command::Run { cfg, out } => print_summary(&run_experiment(&cfg.load()?.single(), &out)?),
        Command::Sweep { cfg, out } => print_summary(&run_experiment(&cfg.load()?, &out)?),
        Command::Compare { runs, tolerance } => {
            let c = compare_runs(&runs, tolerance)?;
            print!("{}", c.to_table());
            if !c.regressions().is_empty() {
                eprintln!("{} regression(s) beyond {tolerance}", c.regressions().len());
                return Ok(ExitCode::from(2));
            }
        }
        Command::Oracle { cases, seed } => {
            let outcomes = run_oracles(cases, seed)?;
            for o in &outcomes {
                let status = if o.passed() { "PASS" } else { "FAIL" };
                println!("{status} {} ({} cases, {} failures): {}", o.name, o.cases, o.failures, o.detail);
            }
            if outcomes.iter().any(|o| !o.passed()) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Config { cfg } => {
            let c = cfg.load()?;
            c.validate()?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
