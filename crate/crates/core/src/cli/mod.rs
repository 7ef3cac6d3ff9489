//! `followbench` command line: calibrate, simulate, benchmark, export-finetune, synth.
//!
//! Settings are layered: config file, then `--from-manifest`, then flags.
//! Exit codes: 0 success, 2 usage or config, 3 data, 4 backend.

mod commands;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{Manifest, MANIFEST_FILE};
pub use settings::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "followbench", version, about = "Closed-loop car-following simulation and benchmarking")]
pub struct Cli {
    /// Key-value config file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit IDM or GHR parameters to recorded events with a genetic algorithm.
    Calibrate(CalibrateArgs),
    /// Roll a single model out over every event.
    Simulate(SimulateArgs),
    /// Roll several models out and compare them in one table.
    Benchmark(BenchmarkArgs),
    /// Write a JSONL chat fine-tuning dataset from recorded events.
    ExportFinetune(ExportArgs),
    /// Generate synthetic events driven by a physics model.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Event file (CSV or JSON).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// csv or json; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Replay the settings recorded in a run manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Seconds copied from the record before the model takes over.
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Seconds between predictions.
    #[arg(long)]
    pub stride: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// IDM parameter file written by `calibrate`.
    #[arg(long)]
    pub params_idm: Option<PathBuf>,
    /// GHR parameter file written by `calibrate`.
    #[arg(long)]
    pub params_ghr: Option<PathBuf>,
    /// mean, median or global-min.
    #[arg(long)]
    pub ttc_agg: Option<String>,
    /// mock or remote.
    #[arg(long)]
    pub backend: Option<String>,
    /// Base URL of a chat-completions endpoint.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout_s: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub rate_limit_per_min: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// idm or ghr.
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub rollout: RolloutArgs,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub crossover_rate: Option<f64>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub mutation_sigma: Option<f64>,
    /// Fit every event separately instead of one pooled fit.
    #[arg(long)]
    pub per_event: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// idm, ghr, genfollower, constant or playback.
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub rollout: RolloutArgs,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated list of idm, ghr, genfollower, constant, playback.
    #[arg(long)]
    pub models: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub rollout: RolloutArgs,
    #[command(flatten)]
    pub model_args: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output JSONL file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of examples.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// constant, sinusoid, stop-and-go or random-accel.
    #[arg(long)]
    pub profile: Option<String>,
    /// Generating model parameters (defaults to IDM defaults).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Number of events.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output event file (.csv or .json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn put<T: ToString>(s: &mut Settings, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        s.set(key, v.to_string()).expect("flag keys are known settings");
    }
}

fn put_path(s: &mut Settings, key: &str, value: &Option<PathBuf>) {
    put(s, key, &value.as_ref().map(|p| p.display().to_string()));
}

impl DataArgs {
    fn apply(&self, s: &mut Settings) {
        put_path(s, "data", &self.data);
        put(s, "format", &self.format);
    }
}

impl RunArgs {
    fn apply(&self, s: &mut Settings) {
        put_path(s, "out", &self.out);
        put(s, "seed", &self.seed);
        put(s, "jobs", &self.jobs);
    }
}

impl RolloutArgs {
    fn apply(&self, s: &mut Settings) {
        put(s, "warmup", &self.warmup);
        put(s, "stride", &self.stride);
    }
}

impl ModelArgs {
    fn apply(&self, s: &mut Settings) {
        put_path(s, "params_idm", &self.params_idm);
        put_path(s, "params_ghr", &self.params_ghr);
        put(s, "ttc_agg", &self.ttc_agg);
        put(s, "backend", &self.backend);
        put(s, "base_url", &self.base_url);
        put(s, "llm_model", &self.llm_model);
        put(s, "api_key_env", &self.api_key_env);
        put(s, "timeout_s", &self.timeout_s);
        put(s, "max_retries", &self.max_retries);
        put(s, "rate_limit_per_min", &self.rate_limit_per_min);
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Calibrate(_) => "calibrate",
            Command::Simulate(_) => "simulate",
            Command::Benchmark(_) => "benchmark",
            Command::ExportFinetune(_) => "export-finetune",
            Command::Synth(_) => "synth",
        }
    }

    /// Flag values as settings, plus the manifest to replay if any.
    pub fn flag_settings(&self) -> (Settings, Option<PathBuf>) {
        let mut s = Settings::new();
        let manifest = match self {
            Command::Calibrate(a) => {
                put(&mut s, "model", &a.model);
                a.data.apply(&mut s);
                a.run.apply(&mut s);
                a.rollout.apply(&mut s);
                put(&mut s, "population", &a.population);
                put(&mut s, "generations", &a.generations);
                put(&mut s, "crossover_rate", &a.crossover_rate);
                put(&mut s, "mutation_rate", &a.mutation_rate);
                put(&mut s, "mutation_sigma", &a.mutation_sigma);
                if a.per_event {
                    put(&mut s, "per_event", &Some(true));
                }
                a.run.from_manifest.clone()
            }
            Command::Simulate(a) => {
                put(&mut s, "model", &a.model);
                a.data.apply(&mut s);
                a.run.apply(&mut s);
                a.rollout.apply(&mut s);
                a.models.apply(&mut s);
                a.run.from_manifest.clone()
            }
            Command::Benchmark(a) => {
                put(&mut s, "models", &a.models);
                a.data.apply(&mut s);
                a.run.apply(&mut s);
                a.rollout.apply(&mut s);
                a.model_args.apply(&mut s);
                a.run.from_manifest.clone()
            }
            Command::ExportFinetune(a) => {
                a.data.apply(&mut s);
                put_path(&mut s, "out", &a.out);
                put(&mut s, "n", &a.n);
                put(&mut s, "seed", &a.seed);
                a.from_manifest.clone()
            }
            Command::Synth(a) => {
                put(&mut s, "profile", &a.profile);
                put_path(&mut s, "params", &a.params);
                put(&mut s, "n", &a.n);
                put(&mut s, "seed", &a.seed);
                put_path(&mut s, "out", &a.out);
                None
            }
        };
        (s, manifest)
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve layered settings and dispatch.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let (flags, manifest) = cli.command.flag_settings();
    let mut settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::new(),
    };
    if let Some(path) = manifest {
        let m = Manifest::load(&path)?;
        if m.command != name {
            return Err(CliError::Usage(format!(
                "{} records a `{}` run, not `{name}`",
                path.display(),
                m.command
            )));
        }
        settings.merge(&m.settings);
    }
    settings.merge(&flags);
    commands::dispatch(name, &settings)
}
