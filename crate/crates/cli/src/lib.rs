//! Command-line front end: subcommand dispatch over a flat dotted-key config.

pub mod commands;
pub mod plot;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] hetfuse::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// One line: `error[<category>]: <message>`.
    pub fn line(&self) -> String {
        let cat = match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(e) => e.category(),
        };
        format!("error[{cat}]: {self}")
    }
}

#[derive(Debug, Parser)]
#[command(name = "hetfuse", version, about = "Volume + image fusion segmentation: data, training, evaluation, sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Generate(Common),
    /// Write preprocessed copies of a dataset
    Preprocess(Common),
    /// Train one model
    Train(Common),
    /// Evaluate a trained run
    Eval(Common),
    /// Run an experiment grid (ablation, data efficiency, super-resolution)
    Sweep(Common),
    /// Render SVG charts from report.csv / curves.csv
    Plot(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file with `key = value` lines
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; relative paths in the config resolve against it
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed routed to data generation, split, training and evaluation noise
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` overrides applied after the config file
    pub overrides: Vec<String>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::Preprocess(c) | Command::Train(c) | Command::Eval(c) | Command::Sweep(c) | Command::Plot(c) => c,
        }
    }
}

pub fn resolve(c: &Common) -> Result<Settings, CliError> {
    let mut s = Settings::new(&c.out);
    if let Some(path) = &c.config {
        s.apply_text(&settings::read_config(path)?, &path.display().to_string())?;
    }
    if let Some(seed) = c.seed {
        s.apply_seed(seed);
    }
    for kv in &c.overrides {
        s.apply_override(kv)?;
    }
    Ok(s)
}

pub fn run(cmd: &Command) -> Result<(), CliError> {
    let s = resolve(cmd.common())?;
    commands::echo_config(&s)?;
    match cmd {
        Command::Generate(_) => commands::generate(&s),
        Command::Preprocess(_) => commands::preprocess(&s),
        Command::Train(_) => commands::train_cmd(&s),
        Command::Eval(_) => commands::eval_cmd(&s),
        Command::Sweep(_) => commands::sweep(&s),
        Command::Plot(_) => commands::plot_cmd(&s),
    }
}
