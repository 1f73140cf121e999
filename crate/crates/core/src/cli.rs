//! Command-line front end: `simulate`, `train` and `verify`.
//!
//! Flags may also come from a TOML file given with `--config`. Top-level keys
//! and keys under a table named after the subcommand become flags
//! (`dataset_size = 500` turns into `--dataset-size 500`). They are inserted
//! ahead of the command-line flags, so explicit flags win.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{epoch_dynamics, write_dynamics_csv, DynamicsParams};
use crate::experiments::{
    benchmark_sweep, run_experiment, run_gaussian_scenario, summarize_sweep, write_summary_csv,
    write_sweep_csv, ExperimentReport, SweepRow, TrainConfig, BENCHMARK_LOSSES, BENCHMARK_MASKS,
};
use crate::losses::{LossKind, LossSpec};
use crate::oracles::{run_suite, Suite};
use crate::task::{GaussianScenario, SamplingKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Run(crate::Error::Parameter(_)) => 2,
            Self::Run(_) | Self::ChecksFailed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Run(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "prefdyn",
    version,
    about = "Gradient balance in pairwise preference losses"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file whose keys mirror the flags; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-response update weights for a single-prompt Gaussian scenario.
    Simulate(SimulateArgs),
    /// Train a tabular policy on the toy task, or sweep the loss/mask grid.
    Train(TrainArgs),
    /// Run the randomized and exhaustive inequality checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Mean of the model distribution.
    #[arg(long, allow_negative_numbers = true)]
    pub mu_p: f64,
    /// Mean of the utility distribution.
    #[arg(long, allow_negative_numbers = true)]
    pub mu_q: f64,
    #[arg(long)]
    pub sigma2: f64,
    /// Number of responses.
    #[arg(long)]
    pub n: usize,
    /// uniform | shiftless
    #[arg(long, default_value = "uniform", value_parser = parse_sampling)]
    pub sampling: SamplingKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write alpha, beta, w and the predicted probability updates.
    #[arg(long)]
    pub dynamics_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// dpo | reward-bt | nbdpo-asym | nbdpo-sym | nbdpov2-asym | nbdpov2-sym | bdpo | balanced-ref
    #[arg(long, value_parser = parse_loss, required_unless_present = "sweep")]
    #[serde(serialize_with = "ser_opt_loss")]
    pub loss: Option<LossKind>,
    #[arg(long, default_value_t = 0.0)]
    pub mask: f64,
    /// Seed of a single run; the first seed of a sweep.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report (single run) or CSV table (sweep).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Upper clip of the nbDPO weight offset.
    #[arg(long, default_value_t = LossSpec::DEFAULT_CLIP)]
    pub clip: f64,
    /// Sharpness of the toy utility.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Loss temperature.
    #[arg(long, default_value_t = LossSpec::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 300)]
    pub bootstrap_steps: usize,
    /// Fixed offline dataset swept every step; 0 trains online.
    #[arg(long, default_value_t = 1000)]
    pub dataset_size: usize,
    #[arg(long, default_value_t = 64)]
    pub pairs_per_epoch: usize,
    /// Train on the exact expected dataset.
    #[arg(long)]
    pub full_batch: bool,
    #[arg(long, default_value = "uniform", value_parser = parse_sampling)]
    pub sampling: SamplingKind,
    #[arg(long, default_value_t = 50)]
    pub record_every: usize,
    #[arg(long, default_value_t = 20)]
    pub prompts: usize,
    #[arg(long, default_value_t = 20)]
    pub responses: usize,
    /// Run every loss in `--losses` on every mask in `--masks`.
    #[arg(long)]
    pub sweep: bool,
    /// Number of consecutive seeds per sweep cell.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    /// Comma-separated losses to sweep [default: the six benchmark losses]
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    #[serde(serialize_with = "ser_losses")]
    pub losses: Vec<LossKind>,
    /// Comma-separated mask rates to sweep [default: 0,0.2,0.4]
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub masks: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// all | fym | fym2 | variance | dataquality | distshift | ood | probupdate
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    pub suite: Suite,
    /// Trials per randomized check.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write all reports as one JSON array.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_sampling(s: &str) -> Result<SamplingKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn ser_opt_loss<S: serde::Serializer>(k: &Option<LossKind>, s: S) -> Result<S::Ok, S::Error> {
    k.map(|k| k.name()).serialize(s)
}

fn ser_losses<S: serde::Serializer>(k: &[LossKind], s: S) -> Result<S::Ok, S::Error> {
    k.iter().map(|k| k.name()).collect::<Vec<_>>().serialize(s)
}

/// Provenance record. Embedded (without timestamp) in JSON outputs and
/// written in full to `<out>.manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl RunManifest {
    fn new<A: Serialize>(
        subcommand: &'static str,
        args: &A,
        seed: Option<u64>,
        outputs: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            flags: serde_json::to_value(args)?,
            seed,
            outputs,
            timestamp: None,
        })
    }

    fn write_sidecar(&self, out: &Path) -> Result<(), CliError> {
        let stamped = Self {
            timestamp: Some(
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            ),
            ..self.clone()
        };
        let mut f = create(&sidecar_path(out, "manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &stamped)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`.
pub fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// `dir/name.ext` -> `dir/name.<ext>`.
fn with_ext(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        CliError::Run(crate::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

// ---------------------------------------------------------------------------
// Config file expansion

fn config_flags(path: &Path, subcommand: Option<&str>) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(sub) => {
                if Some(key.as_str()) == subcommand {
                    for (k, v) in sub {
                        push_flag(&mut flags, k, v)?;
                    }
                }
            }
            v => push_flag(&mut flags, key, v)?,
        }
    }
    Ok(flags)
}

fn push_flag(flags: &mut Vec<OsString>, key: &str, value: &toml::Value) -> Result<(), CliError> {
    let name = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| -> Result<String, CliError> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            other => Err(CliError::Usage(format!(
                "config key {key:?}: unsupported value {other}"
            ))),
        }
    };
    match value {
        toml::Value::Boolean(true) => flags.push(name.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) => {
            let joined = items
                .iter()
                .map(scalar)
                .collect::<Result<Vec<_>, _>>()?
                .join(",");
            flags.push(format!("{name}={joined}").into());
        }
        v => flags.push(format!("{name}={}", scalar(v)?).into()),
    }
    Ok(())
}

/// Splices config-file flags right after the subcommand name.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut config = None;
    let mut iter = args.iter().enumerate().skip(1);
    while let Some((_, a)) = iter.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            config = iter.next().map(|(_, v)| PathBuf::from(v));
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let sub_pos = args
        .iter()
        .position(|a| matches!(a.to_str(), Some("simulate" | "train" | "verify")));
    let Some(pos) = sub_pos else {
        return Ok(args);
    };
    let extra = config_flags(&config, args[pos].to_str())?;
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subcommands

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let scenario = GaussianScenario::new(args.mu_p, args.mu_q, args.sigma2, args.n)?;
    let mut f = create(&args.out)?;
    run_gaussian_scenario(&scenario, args.sampling, &mut f)?;
    f.flush()?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.dynamics_out {
        let task = scenario.to_task();
        let policy = scenario.model_policy();
        let dyns = epoch_dynamics(&policy, &task, &DynamicsParams::default());
        let labels: Vec<f64> = (0..args.n).map(|y| task.response_label(y)).collect();
        let mut f = create(path)?;
        write_dynamics_csv(&mut f, &dyns[0], task.utility_row(0), &labels)?;
        f.flush()?;
        outputs.push(path.clone());
    }
    RunManifest::new("simulate", args, None, outputs)?.write_sidecar(&args.out)
}

fn base_config(args: &TrainArgs, kind: LossKind) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        loss: LossSpec::new(kind, args.beta, args.clip)?,
        eta: args.eta,
        steps: args.steps,
        pairs_per_epoch: args.pairs_per_epoch,
        full_batch: args.full_batch,
        dataset_size: args.dataset_size,
        mask_rate: args.mask,
        alpha_utility: args.alpha,
        reference_bootstrap_steps: args.bootstrap_steps,
        seed: args.seed,
        sampling: args.sampling,
        record_every: args.record_every,
        n_prompts: args.prompts,
        n_responses: args.responses,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    report: &'a ExperimentReport,
}

fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    if args.sweep {
        return sweep_cmd(args);
    }
    let kind = args.loss.unwrap_or(LossKind::Dpo);
    let config = base_config(args, kind)?;
    let report = run_experiment(&config)?;
    let csv_path = with_ext(&args.out, "csv");
    let manifest = RunManifest::new(
        "train",
        args,
        Some(args.seed),
        vec![args.out.clone(), csv_path.clone()],
    )?;
    let mut f = create(&args.out)?;
    serde_json::to_writer_pretty(
        &mut f,
        &ReportFile {
            manifest: &manifest,
            report: &report,
        },
    )?;
    writeln!(f)?;
    f.flush()?;
    let row = SweepRow {
        loss: kind.name().to_string(),
        mask: config.mask_rate,
        seed: config.seed,
        reward_negsq: report.final_reward[0],
        reward_util: report.final_reward[1],
    };
    let mut f = create(&csv_path)?;
    write_sweep_csv(&[row], &mut f)?;
    f.flush()?;
    manifest.write_sidecar(&args.out)
}

fn sweep_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let losses: Vec<LossKind> = if args.losses.is_empty() {
        BENCHMARK_LOSSES
            .iter()
            .map(|n| n.parse())
            .collect::<Result<_, _>>()?
    } else {
        args.losses.clone()
    };
    let masks: Vec<f64> = if args.masks.is_empty() {
        BENCHMARK_MASKS.to_vec()
    } else {
        args.masks.clone()
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed + i).collect();
    let base = base_config(args, args.loss.unwrap_or(LossKind::Dpo))?;
    for &m in &masks {
        TrainConfig {
            mask_rate: m,
            ..base.clone()
        }
        .validate()?;
    }
    let rows = benchmark_sweep(&losses, &masks, &seeds, &base)?;
    let summary_path = with_ext(&args.out, "summary.csv");
    let mut f = create(&args.out)?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = create(&summary_path)?;
    write_summary_csv(&summarize_sweep(&rows), &mut f)?;
    f.flush()?;
    RunManifest::new(
        "train",
        args,
        Some(args.seed),
        vec![args.out.clone(), summary_path],
    )?
    .write_sidecar(&args.out)
}

fn verify_cmd<W: Write>(args: &VerifyArgs, stdout: &mut W) -> Result<(), CliError> {
    let reports = run_suite(args.suite, args.trials as usize, args.seed)?;
    for r in &reports {
        writeln!(stdout, "{}", serde_json::to_string(r)?)?;
    }
    if let Some(out) = &args.out {
        let mut f = create(out)?;
        serde_json::to_writer_pretty(&mut f, &reports)?;
        writeln!(f)?;
        f.flush()?;
        RunManifest::new("verify", args, Some(args.seed), vec![out.clone()])?.write_sidecar(out)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Verify(a) => verify_cmd(a, &mut std::io::stdout().lock()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
