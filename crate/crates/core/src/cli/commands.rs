use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CliError, Settings};
use crate::baselines::{AccelLimits, IdmParams, ModelParams, PhysicsModel, PhysicsPredictor};
use crate::calibrate::{calibrate_ga, calibrate_per_event, CalibrateError, CalibrationResult, GaConfig};
use crate::events::{load_events, save_events, synth_events, CarFollowingEvent, EventFormat, LeaderProfile};
use crate::kinematics::{
    rollout, write_trajectory_csv, ConstantSpeedPredictor, PlaybackPredictor, RolloutConfig,
    SimulatedTrajectory, DEFAULT_WARMUP,
};
use crate::llm::backend::{BackendConfig, BackendKind, ChatBackend, DEFAULT_API_KEY_ENV};
use crate::llm::finetune::{export_finetune_dataset, FinetuneError, DEFAULT_INSTANCES};
use crate::llm::predictor::{GenFollower, GenFollowerConfig, PredictionOutcome, ReplyCache};
use crate::llm::prompt::{TaskConfig, TEMPLATE_VERSION};
use crate::metrics::{evaluate, render_table, write_report_csv, EvalReport, FailedEvent, TtcAggregation};

pub const MANIFEST_FILE: &str = "run_manifest.json";
const DEFAULT_OUT: &str = "followbench-out";

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub prompt_template: String,
    pub settings: Settings,
}

impl Manifest {
    fn new(command: &str, settings: &Settings) -> Result<Self, CliError> {
        let seed = seed(settings)?;
        let mut settings = settings.clone();
        settings.set("seed", seed.to_string())?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            prompt_template: TEMPLATE_VERSION.into(),
            settings,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }
}

pub(super) fn dispatch(command: &str, settings: &Settings) -> Result<(), CliError> {
    let jobs = settings.parsed_or("jobs", 0usize)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| match command {
        "calibrate" => cmd_calibrate(settings),
        "simulate" => cmd_benchmark(command, settings),
        "benchmark" => cmd_benchmark(command, settings),
        "export-finetune" => cmd_export_finetune(settings),
        "synth" => cmd_synth(settings),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn seed(settings: &Settings) -> Result<u64, CliError> {
    settings.parsed_or("seed", 0u64)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value).expect("serializable");
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn out_dir(settings: &Settings) -> Result<PathBuf, CliError> {
    let dir = settings.path("out").unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn event_format(settings: &Settings, path: &Path) -> Result<EventFormat, CliError> {
    Ok(settings
        .parsed::<EventFormat>("format")?
        .or_else(|| EventFormat::from_path(path))
        .unwrap_or(EventFormat::Csv))
}

fn load_data(settings: &Settings) -> Result<Vec<CarFollowingEvent>, CliError> {
    let path = PathBuf::from(settings.require("data")?);
    let format = event_format(settings, &path)?;
    load_events(&path, format).map_err(|e| CliError::Data(e.to_string()))
}

fn load_params(path: &Path, model: PhysicsModel) -> Result<ModelParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let params: ModelParams = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a parameter file: {e}", path.display())))?;
    if params.model() != model {
        return Err(CliError::Usage(format!(
            "{} holds {} parameters, expected {model}",
            path.display(),
            params.model()
        )));
    }
    Ok(params)
}

fn cmd_calibrate(settings: &Settings) -> Result<(), CliError> {
    let model: PhysicsModel = settings.require("model")?.parse().map_err(CliError::Usage)?;
    let defaults = GaConfig::default();
    let ga = GaConfig {
        population: settings.parsed_or("population", defaults.population)?,
        generations: settings.parsed_or("generations", defaults.generations)?,
        crossover_rate: settings.parsed_or("crossover_rate", defaults.crossover_rate)?,
        mutation_rate: settings.parsed_or("mutation_rate", defaults.mutation_rate)?,
        mutation_sigma: settings.parsed_or("mutation_sigma", defaults.mutation_sigma)?,
        seed: seed(settings)?,
        ..defaults
    };
    ga.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let warmup = settings.parsed_or("warmup", DEFAULT_WARMUP)?;
    let stride: Option<f64> = settings.parsed("stride")?;
    let per_event = settings.flag("per_event")?;

    let events = load_data(settings)?;
    let out = out_dir(settings)?;
    let rollout_config = RolloutConfig::new(warmup, stride.unwrap_or(events[0].dt()));
    let limits = AccelLimits::default();
    let calib_err = |e: CalibrateError| match e {
        CalibrateError::InvalidConfig(_) | CalibrateError::InvalidArgument(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    };

    let history_path = out.join("fitness_history.csv");
    if per_event {
        let results = calibrate_per_event(model, &events, &ga, rollout_config, &limits).map_err(calib_err)?;
        #[derive(Serialize)]
        struct PerEvent<'a> {
            event_id: &'a str,
            best_fitness: f64,
            best_params: ModelParams,
        }
        let rows: Vec<PerEvent> = events
            .iter()
            .zip(&results)
            .map(|(ev, r)| PerEvent {
                event_id: ev.event_id(),
                best_fitness: r.best_fitness,
                best_params: r.best_params,
            })
            .collect();
        write_json(&out.join(format!("params_{model}_per_event.json")), &rows)?;
        let mut w = csv::Writer::from_writer(create_file(&history_path)?);
        let csv_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", history_path.display()));
        w.write_record(["event_id", "generation", "best_fitness"]).map_err(csv_err)?;
        for (ev, r) in events.iter().zip(&results) {
            for (g, f) in r.history.iter().enumerate() {
                w.write_record([ev.event_id().to_string(), g.to_string(), f.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| io_err(&history_path, e))?;
        println!("calibrated {model} on {} event(s) separately", results.len());
    } else {
        let result = calibrate_ga(model, &events, &ga, rollout_config, &limits).map_err(calib_err)?;
        write_json(&out.join(format!("params_{model}.json")), &result.best_params)?;
        write_history(&history_path, &result)?;
        println!(
            "calibrated {model} on {} event(s): best fitness {:.6} m² after {} evaluations",
            events.len(),
            result.best_fitness,
            result.evaluations
        );
        println!("{}", serde_json::to_string(&result.best_params).expect("serializable"));
    }
    Manifest::new("calibrate", settings)?.write(&out.join(super::MANIFEST_FILE))
}

fn write_history(path: &Path, result: &CalibrationResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let csv_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    w.write_record(["generation", "best_fitness"]).map_err(csv_err)?;
    for (g, f) in result.history.iter().enumerate() {
        w.write_record([g.to_string(), f.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ModelSpec {
    Physics(ModelParams),
    GenFollower,
    Constant,
    Playback,
}

impl ModelSpec {
    fn resolve(name: &str, settings: &Settings) -> Result<Self, CliError> {
        match name {
            "idm" | "ghr" => {
                let model: PhysicsModel = name.parse().map_err(CliError::Usage)?;
                let params = match settings.path(&format!("params_{name}")) {
                    Some(path) => load_params(&path, model)?,
                    None => model.default_params(),
                };
                Ok(ModelSpec::Physics(params))
            }
            "genfollower" => Ok(ModelSpec::GenFollower),
            "constant" => Ok(ModelSpec::Constant),
            "playback" => Ok(ModelSpec::Playback),
            other => Err(CliError::Usage(format!("unsupported model `{other}`"))),
        }
    }
}

type EventRun = (Result<SimulatedTrajectory, String>, Vec<(f64, PredictionOutcome)>);

struct Rollouts {
    results: Vec<Result<SimulatedTrajectory, String>>,
    outcomes: Vec<(String, f64, PredictionOutcome)>,
}

struct BenchContext {
    warmup: f64,
    stride: Option<f64>,
    task: TaskConfig,
    backend: Option<Arc<dyn ChatBackend>>,
    cache: Arc<ReplyCache>,
}

fn run_model(spec: ModelSpec, events: &[CarFollowingEvent], ctx: &BenchContext) -> Rollouts {
    let per_event: Vec<EventRun> = events
        .par_iter()
        .map(|ev| {
            let physics = RolloutConfig::new(ctx.warmup, ctx.stride.unwrap_or(ev.dt()));
            let result = match spec {
                ModelSpec::Physics(params) => {
                    rollout(ev, &mut PhysicsPredictor::new(params), physics).map(|t| (t, Vec::new()))
                }
                ModelSpec::Constant => {
                    rollout(ev, &mut ConstantSpeedPredictor::hold(), physics).map(|t| (t, Vec::new()))
                }
                ModelSpec::Playback => {
                    rollout(ev, &mut PlaybackPredictor::new(ev.clone()), physics).map(|t| (t, Vec::new()))
                }
                ModelSpec::GenFollower => {
                    let backend = ctx.backend.clone().expect("backend built for genfollower");
                    let config = GenFollowerConfig {
                        task: ctx.task,
                        ..GenFollowerConfig::default()
                    };
                    let mut gf = GenFollower::with_cache(backend, config, ctx.cache.clone());
                    let cfg = RolloutConfig::new(ctx.warmup, ctx.stride.unwrap_or(ctx.task.horizon));
                    rollout(ev, &mut gf, cfg).map(|t| (t, gf.outcomes().to_vec()))
                }
            };
            match result {
                Ok((t, o)) => (Ok(t), o),
                Err(e) => (Err(e.to_string()), Vec::new()),
            }
        })
        .collect();
    let mut results = Vec::with_capacity(events.len());
    let mut outcomes = Vec::new();
    for (ev, (r, o)) in events.iter().zip(per_event) {
        results.push(r);
        outcomes.extend(o.into_iter().map(|(t, out)| (ev.event_id().to_string(), t, out)));
    }
    Rollouts { results, outcomes }
}

fn build_backend(settings: &Settings, out: &Path) -> Result<Arc<dyn ChatBackend>, CliError> {
    let defaults = BackendConfig::default();
    let kind = match settings.get("backend").unwrap_or("mock") {
        "mock" => BackendKind::Mock,
        "remote" => BackendKind::Remote,
        other => return Err(CliError::Usage(format!("unknown backend `{other}` (expected mock or remote)"))),
    };
    let config = BackendConfig {
        kind,
        base_url: match kind {
            BackendKind::Remote => Some(settings.require("base_url")?.to_string()),
            BackendKind::Mock => None,
        },
        model_name: settings.get("llm_model").unwrap_or(&defaults.model_name).to_string(),
        api_key_env: settings.get("api_key_env").unwrap_or(DEFAULT_API_KEY_ENV).to_string(),
        timeout_s: settings.parsed_or("timeout_s", defaults.timeout_s)?,
        max_retries: settings.parsed_or("max_retries", defaults.max_retries)?,
        rate_limit_per_min: settings.parsed_or("rate_limit_per_min", defaults.rate_limit_per_min)?,
        log_dir: (kind == BackendKind::Remote).then(|| out.join("llm_logs")),
        ..defaults
    };
    config
        .build()
        .map(Arc::from)
        .map_err(|e| CliError::Backend(e.to_string()))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_outcomes(path: &Path, rows: &[(String, f64, PredictionOutcome)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let csv_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    w.write_record(["event_id", "t", "speed", "source", "filtered", "filter_reason", "explanation"])
        .map_err(csv_err)?;
    for (id, t, o) in rows {
        let source = match o.parse_method {
            Some(m) => serde_json::to_value(m).expect("serializable").as_str().unwrap_or("").to_string(),
            None => "idm_fallback".to_string(),
        };
        w.write_record([
            id.clone(),
            format!("{t:.2}"),
            o.speed.to_string(),
            source,
            o.filtered.to_string(),
            o.filter_reason.clone().unwrap_or_default(),
            o.explanation.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_benchmark(command: &str, settings: &Settings) -> Result<(), CliError> {
    let names = if command == "simulate" {
        vec![settings.require("model")?.to_ascii_lowercase()]
    } else {
        settings.list("models").iter().map(|m| m.to_ascii_lowercase()).collect()
    };
    if names.is_empty() {
        return Err(CliError::Usage("at least one model is required".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(CliError::Usage(format!("model `{n}` listed twice")));
        }
    }
    let specs: Vec<ModelSpec> = names
        .iter()
        .map(|n| ModelSpec::resolve(n, settings))
        .collect::<Result<_, _>>()?;
    let agg: TtcAggregation = settings.parsed_or("ttc_agg", TtcAggregation::Mean)?;
    let task_defaults = TaskConfig::default();
    let task = TaskConfig {
        history_window: settings.parsed_or("history_window", task_defaults.history_window)?,
        horizon: settings.parsed_or("horizon", task_defaults.horizon)?,
    };
    let ctx_warmup = settings.parsed_or("warmup", DEFAULT_WARMUP)?;
    let stride: Option<f64> = settings.parsed("stride")?;
    seed(settings)?;

    let events = load_data(settings)?;
    let out = out_dir(settings)?;
    let backend = if specs.contains(&ModelSpec::GenFollower) {
        Some(build_backend(settings, &out)?)
    } else {
        None
    };
    let ctx = BenchContext {
        warmup: ctx_warmup,
        stride,
        task,
        backend,
        cache: Arc::new(ReplyCache::new()),
    };

    let mut reports = Vec::with_capacity(specs.len());
    for (name, spec) in names.iter().zip(&specs) {
        let runs = run_model(*spec, &events, &ctx);
        let mut ok_events = Vec::new();
        let mut trajectories = Vec::new();
        let mut failures = Vec::new();
        for (ev, r) in events.iter().zip(runs.results) {
            match r {
                Ok(t) => {
                    ok_events.push(ev);
                    trajectories.push(t);
                }
                Err(error) => failures.push(FailedEvent {
                    event_id: ev.event_id().to_string(),
                    error,
                }),
            }
        }
        let dir = out.join("trajectories").join(name);
        for traj in &trajectories {
            let path = dir.join(format!("{}.csv", file_stem(&traj.event_id)));
            write_trajectory_csv(std::slice::from_ref(traj), create_file(&path)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        if *spec == ModelSpec::GenFollower {
            write_outcomes(&out.join(format!("llm_outcomes_{name}.csv")), &runs.outcomes)?;
        }
        let report = if trajectories.is_empty() {
            EvalReport::all_failed(name, agg, failures)
        } else {
            let mut r = evaluate(name, &ok_events, &trajectories, agg).map_err(|e| CliError::Data(e.to_string()))?;
            r.n_failed = failures.len();
            r.failures = failures;
            r
        };
        reports.push(report);
    }

    write_json(&out.join("report.json"), &reports)?;
    let csv_path = out.join("report.csv");
    write_report_csv(&reports, create_file(&csv_path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", csv_path.display())))?;
    let table = render_table(&reports);
    fs::write(out.join("table.txt"), &table).map_err(|e| io_err(&out.join("table.txt"), e))?;
    print!("{table}");
    Manifest::new(command, settings)?.write(&out.join(super::MANIFEST_FILE))
}

fn sidecar_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn positive_count(settings: &Settings, default: usize) -> Result<usize, CliError> {
    let n = match settings.get("n") {
        None => default,
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `n`: expected a positive integer")))?,
    };
    if n == 0 {
        return Err(CliError::Usage("`n` must be at least 1".into()));
    }
    Ok(n)
}

fn cmd_export_finetune(settings: &Settings) -> Result<(), CliError> {
    let n = positive_count(settings, DEFAULT_INSTANCES)?;
    let seed = seed(settings)?;
    let out = settings.path("out").unwrap_or_else(|| PathBuf::from("finetune.jsonl"));
    let events = load_data(settings)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let examples = export_finetune_dataset(&events, n, seed, &TaskConfig::default(), &out).map_err(|e| match e {
        FinetuneError::InsufficientData(_) => CliError::Usage(e.to_string()),
        FinetuneError::Prompt(_) => CliError::Data(e.to_string()),
        FinetuneError::Io { .. } => CliError::Usage(e.to_string()),
    })?;
    println!("wrote {} examples to {}", examples.len(), out.display());
    Manifest::new("export-finetune", settings)?.write(&sidecar_manifest(&out))
}

fn profile(name: &str) -> Result<LeaderProfile, CliError> {
    Ok(match name.replace('_', "-").as_str() {
        "constant" => LeaderProfile::Constant { speed: 10.0 },
        "sinusoid" => LeaderProfile::Sinusoid {
            mean: 10.0,
            amplitude: 3.0,
            period: 10.0,
        },
        "stop-and-go" => LeaderProfile::StopAndGo {
            cruise: 10.0,
            decel: 2.0,
            accel: 1.5,
            stop_time: 2.0,
        },
        "random-accel" => LeaderProfile::RandomAccel {
            mean: 10.0,
            accel_sd: 0.8,
        },
        other => {
            return Err(CliError::Usage(format!(
                "unknown profile `{other}` (expected constant, sinusoid, stop-and-go or random-accel)"
            )))
        }
    })
}

fn cmd_synth(settings: &Settings) -> Result<(), CliError> {
    let profile = profile(settings.get("profile").unwrap_or("stop-and-go"))?;
    let n = positive_count(settings, 10)?;
    let seed = seed(settings)?;
    let params = match settings.path("params") {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: not a parameter file: {e}", path.display())))?
        }
        None => ModelParams::Idm(IdmParams::default()),
    };
    let out = PathBuf::from(settings.require("out")?);
    let format = event_format(settings, &out)?;
    let events = synth_events(&profile, &params, n, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_events(&events, &out, format).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("wrote {} events to {}", events.len(), out.display());
    Manifest::new("synth", settings)?.write(&sidecar_manifest(&out))
}
