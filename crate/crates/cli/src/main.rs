//! `mvip` command-line tool.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvip::data::{save_dataset, synthesize_dataset, validate_root, Split};
use mvip::harness::train::evaluate_checkpoint;
use mvip::harness::{stability, sweep, train, RunConfig, SweepPreset};

#[derive(Parser)]
#[command(name = "mvip", version, about = "Multi-view, multi-modal part classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; `profile = toy|desk|paper` picks the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied after the file, in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration and its hash.
    Config(ConfigArgs),
    /// Render the configured synthetic dataset to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check a dataset directory and print a JSON report.
    Validate {
        #[arg(long)]
        root: PathBuf,
    },
    /// Train one model and print the run report as JSON.
    Train(ConfigArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run a preset grid and write a CSV table.
    Sweep {
        /// fusion, views, rgbd, anchor or augment.
        #[arg(long)]
        preset: String,
        /// Seeds per cell.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Repeat training with consecutive seeds and summarize.
    Stability {
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Use the same seed for every run.
        #[arg(long)]
        same_seed: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|p| p.as_str() == s)
        .with_context(|| format!("unknown split '{s}', expected train, val or test"))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(args) => {
            let cfg = args.resolve()?;
            print!("{}", cfg.to_text());
            println!("# hash {}", cfg.hash());
        }
        Command::Synth { out, cfg } => {
            let cfg = cfg.resolve()?;
            let index = synthesize_dataset(&cfg.data.synth, cfg.data.seed)?;
            save_dataset(&index, &out)?;
            eprintln!("wrote {} sets to {}", index.sets.len(), out.display());
        }
        Command::Validate { root } => {
            let report = validate_root(&root);
            print_json(&report)?;
            if !report.ok {
                bail!("dataset at {} is invalid", root.display());
            }
        }
        Command::Train(args) => {
            let report = train(&args.resolve()?)?;
            print_json(&report)?;
        }
        Command::Eval { ckpt, split } => {
            print_json(&evaluate_checkpoint(&ckpt, parse_split(&split)?)?)?;
        }
        Command::Sweep { preset, runs, out, cfg } => {
            let preset: SweepPreset = preset.parse()?;
            let table = sweep(preset, &cfg.resolve()?, runs)?;
            match out {
                Some(p) => table.write_csv(File::create(&p).with_context(|| format!("creating {}", p.display()))?)?,
                None => table.write_csv(io::stdout().lock())?,
            }
            if let Some(t) = &table.trend {
                eprintln!("view trend {:?}: non-decreasing = {}", t.values, t.non_decreasing);
            }
        }
        Command::Stability { runs, same_seed, cfg } => {
            let report = stability(&cfg.resolve()?, runs, same_seed)?;
            print_json(&report)?;
            if !report.complete {
                bail!("some runs aborted; the report covers the finished ones");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
