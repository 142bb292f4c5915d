//! `cbp`: run, sweep and summarize online continual-learning experiments.
//!
//! ```bash
//! cbp run --config bitflip.toml --seed 3 --out results/bp
//! cbp sweep --config sweep.toml --jobs 4 --out results/sweep
//! cbp report results/sweep
//! ```
//!
//! A config file is TOML holding an experiment (`steps`, `[problem]`,
//! `[learner]`, `[algorithm]`, ...) and, for `sweep`, an optional `[sweep]`
//! table of value lists. Command-line flags override file values.
//!
//! Exit status: 0 on success, 2 for unusable configuration or arguments,
//! 1 for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbp_core::harness::{
    self, best_cell, report_dir, run_sweep, total_loss_table, ExperimentConfig, ProblemConfig,
    Resources, SweepSpec,
};
use cbp_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cbp", version, about = "Online continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one configuration for each of its seeds.
    Run(RunArgs),
    /// Run every point of the config's `[sweep]` grid for each seed.
    Sweep(RunArgs),
    /// Summarize a results directory written by `run` or `sweep`.
    Report {
        /// Results directory.
        dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,

    /// Seed to run; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,

    /// Number of online steps.
    #[arg(long)]
    steps: Option<u64>,

    /// Steps per metrics bin; must divide the step count.
    #[arg(long)]
    bin: Option<u64>,

    /// Output directory for `metrics.csv` and `manifest.json`.
    #[arg(long, default_value = "results")]
    out: PathBuf,

    /// Worker threads (0 = one per core).
    #[arg(long, env = "CBP_JOBS", default_value_t = 0)]
    jobs: usize,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 2, message }
}

/// Reads a config file into an experiment and an optional sweep grid.
fn load_config(path: &Path) -> Result<(ExperimentConfig, Option<SweepSpec>), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let sweep = table
        .remove("sweep")
        .map(|s| s.try_into::<SweepSpec>())
        .transpose()
        .map_err(|e| config_error(format!("{}: [sweep]: {e}", path.display())))?;
    let mut exp: ExperimentConfig = table
        .try_into()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    // A relative data directory is taken relative to the config file.
    if let ProblemConfig::PermutedMnist(m) = &mut exp.problem {
        if let (Some(dir), Some(base)) = (&m.data_dir, path.parent()) {
            if dir.is_relative() {
                m.data_dir = Some(base.join(dir));
            }
        }
    }
    Ok((exp, sweep))
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.bin {
        cfg.bin_size = Some(b);
    }
}

fn execute(args: &RunArgs, allow_grid: bool) -> Result<(), Failure> {
    let (mut cfg, sweep) = load_config(&args.config)?;
    apply_overrides(&mut cfg, args);
    let spec = match sweep {
        Some(s) if !allow_grid && !s.is_empty() => {
            return Err(config_error(
                "config has a [sweep] table; use `cbp sweep` to run it".into(),
            ))
        }
        Some(s) => s,
        None => SweepSpec::default(),
    };
    cfg.validate()?;
    let cells = spec.expand(&cfg)?;
    let res = Resources::load_for(&cfg)?;

    eprintln!(
        "running {} config(s) x {} seed(s), {} steps each",
        cells.len(),
        cfg.seeds.len(),
        cfg.steps
    );
    let results = run_sweep(&cells, &res, args.jobs)?;
    harness::write_results(&args.out, &results)?;

    let mut failed = 0;
    for c in &results {
        for (seed, r) in &c.runs {
            match r {
                Ok(m) => {
                    let last = m.bins.last().map_or(f64::NAN, |b| b.loss);
                    print!(
                        "{} seed {seed}: total_loss {:.6e} final_bin_loss {last:.6}",
                        c.cell.label(),
                        m.total_loss
                    );
                    if let Some(acc) = m.bins.last().and_then(|b| b.accuracy) {
                        print!(" final_accuracy {acc:.4}");
                    }
                    if let Some(at) = m.diverged_at {
                        print!(" diverged_at {at}");
                    }
                    println!();
                }
                Err(e) => {
                    failed += 1;
                    println!("{} seed {seed}: error: {e}", c.cell.label());
                }
            }
        }
    }
    if allow_grid && results.len() > 1 {
        let rows = total_loss_table(&results);
        println!("total-loss table: {} rows", rows.len());
        match best_cell(&results) {
            Some(b) => println!(
                "best: {} ({}) mean total_loss {:.6e}",
                b.cell.config_id,
                b.cell.label(),
                b.mean_total_loss()
            ),
            None => println!("best: none (every config diverged or failed)"),
        }
    }
    println!("wrote {}", args.out.display());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} run(s) failed"),
        });
    }
    Ok(())
}

fn report(dir: &Path) -> Result<(), Failure> {
    let r = report_dir(dir)?;
    println!(
        "{:<6} {:>5} {:>13} {:>11} {:>11} {:>11} {:>8}  params",
        "config", "seeds", "total_loss", "min_bin", "final_bin", "degrade", "acc"
    );
    for s in &r.summaries {
        println!(
            "{:<6} {:>5} {:>13.6e} {:>11.5} {:>11.5} {:>11.4} {:>8}  {}",
            s.config_id,
            s.seeds,
            s.mean_total_loss,
            s.min_loss,
            s.final_loss,
            s.degradation_ratio,
            s.final_accuracy
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}")),
            s.params
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => execute(a, false),
        Command::Sweep(a) => execute(a, true),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
