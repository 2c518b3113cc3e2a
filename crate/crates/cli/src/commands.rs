//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::dataset::write_dataset;
use crate::error::{AtStage, CliError, CliResult, Stage};
use crate::output::write_atomic;
use crate::pipeline::{load_dataset, run_baseline, run_direct, run_indirect, RunOutput};
use crate::report::build_report;

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "cpcontrol", version, about = "Chance-constrained control with conformal prediction regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (JSON); the built-in benchmark when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset CSV; overrides the config's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace every seed in the config with streams derived from this one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of validation trials.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the built-in benchmark configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a disturbance dataset of k + 1 sequences.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Direct method end to end.
    RunDirect(RunArgs),
    /// Indirect method end to end.
    RunIndirect(RunArgs),
    /// Either method, chosen by `--method`.
    Run {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Scenario-program baseline.
    RunBaseline {
        #[command(flatten)]
        args: RunArgs,
        /// Number of dataset sequences used as scenarios.
        #[arg(long)]
        scenarios: Option<usize>,
    },
    /// Merge manifests (files or run directories) into a comparison table.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::benchmark(),
    };
    if let Some(seed) = seed {
        config.reseed(seed);
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn run_pipeline(args: &RunArgs, method: MethodArg) -> CliResult<RunOutput> {
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    if let Some(trials) = args.trials {
        config.validation.n_trials = trials;
    }
    config.validate()?;
    let (dataset, origin) = load_dataset(&config, args.data.as_deref())?;
    let output = match method {
        MethodArg::Direct => run_direct(&config, &dataset, &origin)?,
        MethodArg::Indirect => run_indirect(&config, &dataset, &origin)?,
    };
    output.write(&args.out)?;
    Ok(output)
}

fn summary(output: &RunOutput) -> String {
    let m = &output.manifest;
    format!(
        "{}: objective {:.6}, state {:.4}, input {:.4}, joint {:.4} over {} trials",
        m.method.name(),
        m.objective,
        m.validation.state.rate,
        m.validation.input.rate,
        m.validation.joint.rate,
        m.validation.n_trials
    )
}

/// Run a parsed command; returns the text printed on success.
pub fn execute(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::InitConfig { out } => {
            create_dir(&out)?;
            let path = out.join(CONFIG_FILE);
            crate::output::write_json(&path, &RunConfig::benchmark())?;
            Ok(format!("wrote {}", path.display()))
        }
        Command::GenData { config, out, seed } => {
            let config = load_config(config.as_deref(), seed)?;
            config.validate()?;
            let gen = config
                .generator()
                .ok_or_else(|| CliError::Config("gen-data needs a generator data source".into()))?;
            let dataset = gen
                .generate(config.data.k + 1, config.system.horizon, config.data.seed)
                .at(Stage::Load)?;
            create_dir(&out)?;
            let path = out.join(DATASET_FILE);
            write_dataset(&path, &dataset)?;
            Ok(format!(
                "wrote {} sequences of {} steps to {}",
                dataset.len(),
                dataset.horizon(),
                path.display()
            ))
        }
        Command::RunDirect(args) => run_pipeline(&args, MethodArg::Direct).map(|o| summary(&o)),
        Command::RunIndirect(args) => run_pipeline(&args, MethodArg::Indirect).map(|o| summary(&o)),
        Command::Run { method, args } => run_pipeline(&args, method).map(|o| summary(&o)),
        Command::RunBaseline { args, scenarios } => {
            let mut config = load_config(args.config.as_deref(), args.seed)?;
            if let Some(trials) = args.trials {
                config.validation.n_trials = trials;
            }
            if let Some(s) = scenarios {
                config.baseline.scenarios = s;
            }
            config.validate()?;
            let (dataset, origin) = load_dataset(&config, args.data.as_deref())?;
            let output = run_baseline(&config, &dataset, &origin, config.baseline.scenarios)?;
            output.write(&args.out)?;
            Ok(summary(&output))
        }
        Command::Report { manifests, out } => {
            let report = build_report(&manifests)?;
            let text = report.to_text();
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_atomic(&dir.join(REPORT_CSV_FILE), &report.to_csv()?)?;
                write_atomic(&dir.join(REPORT_TEXT_FILE), text.as_bytes())?;
            }
            Ok(text)
        }
    }
}
