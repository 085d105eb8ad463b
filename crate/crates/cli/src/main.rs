use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simlab_core::harness::{
    collect_runs, emit_report, load_dataset, run_base, run_experiment, run_ideals, run_incremental, session_plan,
    ExperimentConfig, HarnessError,
};

/// Incremental similarity-learning experiments.
#[derive(Parser)]
#[command(name = "simlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `seeds`, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the class plan of every seed.
    Plan(Common),
    /// Train and save the base models.
    Base(Common),
    /// Run the incremental sessions from saved base models.
    Incremental(Common),
    /// Train the offline ideal models.
    Ideal(Common),
    /// Write CSV tables and the SVG chart from saved session logs.
    Report(Common),
    /// Base, ideal, incremental and report in one go.
    All(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seeds) = &c.seeds {
        cfg.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn report(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let artifacts = collect_runs(cfg)?;
    let files = emit_report(&artifacts, &cfg.output_dir)?;
    for run in &artifacts.runs {
        match (&run.omega, &run.failure) {
            (_, Some(f)) => println!("{} seed {}: failed: {f}", run.strategy, run.seed),
            (Some(o), None) => println!(
                "{} seed {}: omega_base {:.4} omega_new {:.4} omega_all {:.4}",
                run.strategy, run.seed, o.omega_base, o.omega_new, o.omega_all
            ),
            (None, None) => println!("{} seed {}: no incremental sessions", run.strategy, run.seed),
        }
    }
    println!("wrote {}", files.sessions_csv.display());
    println!("wrote {}", files.omega_csv.display());
    println!("wrote {}", files.svg.display());
    Ok(())
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Plan(c) => {
            let cfg = load(&c)?;
            cfg.validate()?;
            let set = load_dataset(&cfg)?;
            for &seed in &cfg.seeds {
                print!("{}", session_plan(&cfg, set.class_count, seed)?);
            }
        }
        Command::Base(c) => {
            let cfg = load(&c)?;
            for (seed, activation, r) in run_base(&cfg)? {
                println!("seed {seed} {activation} base: mAP@R {:.4}", r.alpha_base);
            }
        }
        Command::Ideal(c) => {
            let cfg = load(&c)?;
            for (seed, i) in run_ideals(&cfg)? {
                println!("seed {seed}: ideal base {:.4}, ideal all {:.4}", i.base, i.all);
            }
        }
        Command::Incremental(c) => {
            let cfg = load(&c)?;
            run_incremental(&cfg)?;
            report(&cfg)?;
        }
        Command::Report(c) => report(&load(&c)?)?,
        Command::All(c) => {
            let cfg = load(&c)?;
            let outcome = run_experiment(&cfg);
            // partial logs are reported even after an abort
            report(&cfg)?;
            outcome?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
