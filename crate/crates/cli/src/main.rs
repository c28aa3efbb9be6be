use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tsic_core::harness::{
    run_experiment, trace_experiment, write_metrics_csv, write_trace_csv, ExperimentConfig, Preset,
};

#[derive(Parser)]
#[command(
    name = "tsic",
    version,
    about = "Joint task scheduling and image caching on edge nodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every combination in a JSON experiment config and write metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `output`; stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in sweep (fig3, fig4 or fig5).
    Preset {
        name: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the preset's config as JSON instead of running it.
        #[arg(long)]
        dump_config: bool,
    },
    /// Per-decision log of the first combination in a config.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.or_else(|| cfg.output.as_ref().map(PathBuf::from));
    let rows = run_experiment(cfg)?;
    write_metrics_csv(&rows, sink(out.as_deref())?)?;
    if let Some(p) = out {
        eprintln!("wrote {} rows to {}", rows.len(), p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => run(&load(&config)?, out),
        Command::Preset { name, out, dump_config } => {
            let cfg = name.config();
            if dump_config {
                let mut w = sink(out.as_deref())?;
                serde_json::to_writer_pretty(&mut w, &cfg)?;
                writeln!(w)?;
                return Ok(());
            }
            run(&cfg, out)
        }
        Command::Trace { config, out } => {
            let rows = trace_experiment(&load(&config)?)?;
            write_trace_csv(&rows, sink(out.as_deref())?)?;
            Ok(())
        }
    }
}
