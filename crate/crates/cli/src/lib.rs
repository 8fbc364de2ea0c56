//! Command-line driver: configuration, file formats and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use smoothwarp::Variant;

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "smoothwarp", version, about = "Downscale gridded forecasts with spectral smoothing and spatial warping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, also the default input directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the model variant (fit) or restricts the study to it (report).
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic forecast, station data and ground truth.
    Simulate,
    /// Run the sampler on the training timesteps.
    Fit,
    /// Draw from the posterior predictive at the test timesteps.
    Predict,
    /// Score predictive draws against held-out observations.
    Evaluate,
    /// Run the replicated simulation study and write its tables.
    Report,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut config, cli);
    execute(cli.command, &config, &cli.out)
}

/// Folds `--seed` and `--variant` into the configuration.
pub fn apply_overrides(config: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        config.simulate.scenario.seed = seed;
        config.fit.model.seed = seed;
        config.predict.seed = seed;
        config.report.study.seed = seed;
    }
    if let Some(v) = cli.variant {
        config.fit.variant = v;
        config.report.variants = vec![v];
    }
}

pub fn execute(command: Command, config: &RunConfig, out: &Path) -> CliResult<()> {
    use commands::input_dir;
    match command {
        Command::Simulate => commands::simulate(&config.simulate, out),
        Command::Fit => commands::fit(&config.fit, &input_dir(&config.fit.data, out), out),
        Command::Predict => {
            let p = &config.predict;
            commands::predict(p, &input_dir(&p.data, out), &input_dir(&p.fit, out), out)
        }
        Command::Evaluate => {
            let e = &config.evaluate;
            let s = commands::evaluate(e, &input_dir(&e.data, out), &input_dir(&e.predictions, out), out)?;
            println!(
                "mse {:.4}  mad {:.4}  crps {:.4}  coverage {:.3}  ({} scored, {} missing)",
                s.mse, s.mad, s.crps, s.coverage, s.n_scored, s.n_missing
            );
            Ok(())
        }
        Command::Report => {
            let rows = commands::report(&config.report, out)?;
            print!("{}", commands::summary_text(&rows, &config.report.variants));
            Ok(())
        }
    }
}
