//! `sernet` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sernet_core::data::Split;
use sernet_core::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sernet", version, about = "Train, evaluate and ablate the attention-boosted segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.serk, history.csv and report.csv.
    Train(Common),
    /// Evaluate a checkpoint on one split; writes eval_<split>.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.serk.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Train the full model and each single-drop variant over several seeds.
    Ablate(Common),
    /// Finite-difference check of every op, block and a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the learnable parameter count per group.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width_mult: Option<f64>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Write a synthetic dataset and its manifest.
    Synth(Common),
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Shape { .. } => 2,
        Error::Numeric(_) => 3,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => commands::cmd_train(&c.load()?),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run.out.join("model.serk"));
            commands::cmd_eval(&cfg, &ckpt, split.parse::<Split>()?)
        }
        Command::Ablate(c) => commands::cmd_ablate(&c.load()?),
        Command::Gradcheck { seed } => commands::cmd_gradcheck(seed),
        Command::Params {
            common,
            width_mult,
            classes,
        } => {
            let mut cfg = common.load()?;
            if let Some(w) = width_mult {
                cfg.model.width_mult = w;
            }
            if let Some(k) = classes {
                cfg.model.num_classes = k;
            }
            let model = cfg.model_config();
            model.validate()?;
            commands::cmd_params(&model)
        }
        Command::Synth(c) => commands::cmd_synth(&c.load()?),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
