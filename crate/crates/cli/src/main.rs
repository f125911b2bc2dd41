use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dije::experiment::{compare_runs, run_experiment, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(
    name = "dije",
    version,
    about = "Dense image-Jacobian experiments on a simulated planar arm"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_frames: bool,
        #[arg(long)]
        dump_fields: bool,
        #[arg(long)]
        dump_masks: bool,
    },
    /// Paired per-frame comparison of two report.csv files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        metric: String,
        /// Compare only the last N frames.
        #[arg(long)]
        last: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<i32, ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            dump_frames,
            dump_fields,
            dump_masks,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            if cfg.output.dir.is_none() {
                cfg.output.dir = Some(PathBuf::from("runs").join(&cfg.name));
            }
            cfg.output.dump_frames |= dump_frames;
            cfg.output.dump_fields |= dump_fields;
            cfg.output.dump_masks |= dump_masks;
            let report = run_experiment(&cfg)?;
            for c in &report.checks {
                println!(
                    "{} {}: {} {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.relation,
                    c.threshold
                );
            }
            for d in &report.deadlines {
                println!(
                    "info waypoint {}: tracked error {:.3} px, true error {:.3} px",
                    d.waypoint, d.tracked_px, d.true_px
                );
            }
            if let Some(dir) = &cfg.output.dir {
                println!("{} frames, outputs in {}", report.rows.len(), dir.display());
            }
            Ok(report.exit_code())
        }
        Command::Compare { a, b, metric, last } => {
            let c = compare_runs(&a, &b, &metric, last)?;
            println!("{}", c.to_json());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
