use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctta_core::error::{Error, Result};
use ctta_core::harness::{
    self, pretrain_source, BaselineKind, HarnessConfig, ReportFormat, RunOptions,
};
use ctta_core::model::Checkpoint;
use ctta_core::stream::ScenarioConfig;

/// Continual test-time adaptation on synthetic shifted streams.
#[derive(Parser)]
#[command(name = "ctta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the source model on the scenario's clean task and write a checkpoint.
    Pretrain(Common),
    /// Run the online protocol for one baseline.
    Run(RunArgs),
    /// Adapt over the seen domains, then evaluate held-out domains frozen.
    Generalize(RunArgs),
    /// Run every ablation row on the scenario.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Model, pretraining and adaptation settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed (stream, task and adaptation).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; reports go to stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Source checkpoint; pretrains in-process when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    baseline: BaselineKind,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Add wall-clock seconds to the report (breaks byte-for-byte determinism).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctta: error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(common: &Common) -> Result<(ScenarioConfig, HarnessConfig)> {
    let mut scenario = ScenarioConfig::from_file(&common.scenario)?;
    if let Some(seed) = common.seed {
        scenario = scenario.with_seed(seed);
    }
    let cfg = match &common.config {
        Some(p) => HarnessConfig::from_file(p)?,
        None => HarnessConfig::default(),
    };
    Ok((scenario, cfg))
}

fn source(path: Option<&Path>, scenario: &ScenarioConfig, cfg: &HarnessConfig) -> Result<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load(p),
        None => Ok(pretrain_source(&scenario.task, &cfg.model, &cfg.pretrain)?.checkpoint()),
    }
}

fn label(scenario: &ScenarioConfig) -> &str {
    if scenario.name.is_empty() {
        "scenario"
    } else {
        &scenario.name
    }
}

fn write_out(out_dir: Option<&Path>, file: &str, body: &str) -> Result<()> {
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(file);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let (scenario, cfg) = load(&common)?;
            let p = pretrain_source(&scenario.task, &cfg.model, &cfg.pretrain)?;
            let dir = common.out_dir.unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("checkpoint.json");
            p.checkpoint().save(&path)?;
            eprintln!(
                "source error {:.2}% on held-out clean data; wrote {}",
                p.source_error_pct,
                path.display()
            );
            Ok(())
        }
        Command::Run(args) => run(args, false),
        Command::Generalize(args) => run(args, true),
        Command::Ablate(args) => {
            let (scenario, cfg) = load(&args.common)?;
            let ck = source(args.checkpoint.as_deref(), &scenario, &cfg)?;
            let report = harness::run_ablation(&ck, &scenario, &cfg)?;
            let file = format!("ablation-{}-s{}.{}", label(&scenario), scenario.seed, args.format.extension());
            write_out(args.common.out_dir.as_deref(), &file, &report.render(args.format)?)
        }
    }
}

fn run(args: RunArgs, generalize: bool) -> Result<()> {
    let (scenario, cfg) = load(&args.common)?;
    let ck = source(args.checkpoint.as_deref(), &scenario, &cfg)?;
    let opts = RunOptions {
        record_timing: args.record_timing,
    };
    let report = if generalize {
        harness::run_generalization(&ck, &scenario, &cfg, args.baseline, opts)?
    } else {
        harness::run_scenario(&ck, &scenario, &cfg, args.baseline, opts)?
    };
    let kind = if generalize { "generalize" } else { "run" };
    let file = format!(
        "{kind}-{}-{}-s{}.{}",
        label(&scenario),
        args.baseline.as_str(),
        scenario.seed,
        args.format.extension()
    );
    write_out(args.common.out_dir.as_deref(), &file, &report.render(args.format)?)
}
