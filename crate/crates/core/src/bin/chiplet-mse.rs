use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chiplet_mse::experiment::{self, ExperimentConfig, ExperimentError, Overrides};
use chiplet_mse::hw::Preset;
use chiplet_mse::trace::Strategy;

/// Mapping space exploration for LLM serving on chiplet accelerators.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for the best mapping and write result artifacts.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a fixed mapping without searching.
    Eval {
        config: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Normalize EDP across result directories, per scenario.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_parser = clap::value_parser!(Preset))]
    preset: Option<Preset>,
    #[arg(long, value_parser = clap::value_parser!(Strategy))]
    strategy: Option<Strategy>,
    /// Search seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, config: &PathBuf) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = experiment::load_config(config)?;
        cfg.apply(&Overrides {
            preset: self.preset,
            strategy: self.strategy,
            seed: self.seed,
            out_dir: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

fn main_inner(cli: Cli) -> Result<(), ExperimentError> {
    match cli.cmd {
        Cmd::Run { config, common } => {
            let cfg = common.load(&config)?;
            let res = experiment::run(&cfg)?;
            println!(
                "{}: mb={} tp={} edp={:e} (validation {:e}) -> {}",
                res.scenario,
                res.micro_batch_size,
                res.tp,
                res.search.edp,
                res.validation.edp,
                cfg.out_dir.display()
            );
        }
        Cmd::Eval {
            config,
            mapping,
            common,
        } => {
            let cfg = common.load(&config)?;
            let text =
                std::fs::read_to_string(&mapping).map_err(|source| ExperimentError::Io { path: mapping, source })?;
            let s = experiment::eval(&cfg, &text)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Compare { dirs, out } => {
            let csv = experiment::compare(&dirs)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|source| ExperimentError::Io { path: p, source })?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
