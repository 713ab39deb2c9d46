use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavefield_doe::experiment::{self, parse_band, Experiment, Overrides, Report};
use wavefield_doe::forward::BandpassSpec;

/// Observation-site selection and twin experiments on a layered-earth model.
#[derive(Parser)]
#[command(name = "wavefield-doe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-site parameter sensitivity maps.
    Sensitivity(Common),
    /// Greedy (or configured) observation-site selection.
    Select(Common),
    /// Full twin experiment on the configured selection.
    Twin(Common),
    /// Twin estimation over random site subsets.
    Baseline(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; the run directory is created inside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "seed-truth")]
    seed_truth: Option<u64>,
    #[arg(long = "seed-noise")]
    seed_noise: Option<u64>,
    /// Band-pass edges in Hz, as LO:HI.
    #[arg(long, value_parser = band)]
    band: Option<BandpassSpec>,
    /// Number of sites to select.
    #[arg(long)]
    sites: Option<usize>,
    /// Determinant regularization.
    #[arg(long)]
    epsilon: Option<f64>,
}

fn band(s: &str) -> Result<BandpassSpec, String> {
    parse_band(s).map_err(|e| e.to_string())
}

fn run(cmd: Command) -> wavefield_doe::Result<Report> {
    let (c, f): (Common, fn(&Experiment) -> wavefield_doe::Result<Report>) = match cmd {
        Command::Sensitivity(c) => (c, experiment::cmd_sensitivity),
        Command::Select(c) => (c, experiment::cmd_select),
        Command::Twin(c) => (c, experiment::cmd_twin),
        Command::Baseline(c) => (c, experiment::cmd_baseline),
    };
    let overrides = Overrides {
        out: c.out,
        seed_truth: c.seed_truth,
        seed_noise: c.seed_noise,
        band: c.band,
        sites: c.sites,
        epsilon: c.epsilon,
    };
    let x = Experiment::load(&c.config, &overrides)?;
    f(&x)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(report) => {
            print!("{}", report.text);
            println!("run_dir {}", report.run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
