//! Car-following events: the data model, CSV/JSON ingestion, validation,
//! history windowing and a synthetic event factory.
//!
//! Relative speed is always `lv_speed - fv_speed` (positive means the gap is
//! opening). All quantities are SI: metres, metres per second, seconds.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{AccelLimits, ModelParams, PhysicsPredictor};
use crate::kinematics::{step_spacing, Predictor};

/// Tolerance on the sampling grid, in seconds.
pub const GRID_TOL: f64 = 1e-9;
/// Maximum accepted deviation of a provided `rel_speed` from `lv - fv`.
pub const REL_SPEED_TOL: f64 = 0.01;
/// Sampling interval of the extracted event datasets.
pub const DEFAULT_DT: f64 = 0.1;
/// Duration of one extracted event.
pub const EVENT_DURATION: f64 = 15.0;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("{path}: file contains no events")]
    EmptyFile { path: String },
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("event {event_id}, row {row}: timestamp {t} is off the uniform grid")]
    NonUniformTimestep { event_id: String, row: usize, t: f64 },
    #[error("event {event_id}, row {row}: negative speed ({field} = {value})")]
    NegativeSpeed {
        event_id: String,
        row: usize,
        field: &'static str,
        value: f64,
    },
    #[error("event {event_id}, row {row}: non-positive spacing {spacing}")]
    NonPositiveSpacing {
        event_id: String,
        row: usize,
        spacing: f64,
    },
    #[error("event {event_id}, row {row}: non-finite value in `{field}`")]
    NonFinite {
        event_id: String,
        row: usize,
        field: &'static str,
    },
    #[error("event {event_id}, row {row}: rel_speed {given} deviates from lv - fv = {expected}")]
    InconsistentRelSpeed {
        event_id: String,
        row: usize,
        given: f64,
        expected: f64,
    },
    #[error("event {event_id}: needs at least 2 steps, found {len}")]
    TooShort { event_id: String, len: usize },
    #[error("event {event_id}: history window [{start}, {end}] s is outside the event")]
    OutOfRange {
        event_id: String,
        start: f64,
        end: f64,
    },
    #[error("event {event_id}: t = {t} s is not aligned to the dt = {dt} s grid")]
    OffGrid { event_id: String, t: f64, dt: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EventError> = std::result::Result<T, E>;

/// One sample of a car-following pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub t: f64,
    pub spacing: f64,
    pub lv_speed: f64,
    pub fv_speed: f64,
    pub rel_speed: f64,
}

impl StepState {
    pub fn new(t: f64, spacing: f64, lv_speed: f64, fv_speed: f64) -> Self {
        Self {
            t,
            spacing,
            lv_speed,
            fv_speed,
            rel_speed: lv_speed - fv_speed,
        }
    }
}

/// A step as read from a file, before validation. `rel_speed` may be absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawStep {
    pub t: f64,
    pub spacing: f64,
    pub lv_speed: f64,
    pub fv_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_speed: Option<f64>,
}

impl From<StepState> for RawStep {
    fn from(s: StepState) -> Self {
        Self {
            t: s.t,
            spacing: s.spacing,
            lv_speed: s.lv_speed,
            fv_speed: s.fv_speed,
            rel_speed: Some(s.rel_speed),
        }
    }
}

/// An unvalidated event. `dt` is inferred from the timestamps when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub event_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub steps: Vec<RawStep>,
    #[serde(default, skip_serializing)]
    pub source: String,
}

/// A validated, immutable car-following event on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CarFollowingEvent {
    event_id: String,
    dt: f64,
    steps: Vec<StepState>,
    source: String,
}

impl CarFollowingEvent {
    pub fn event_id(&self) -> &str {
        &self.event_id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> &[StepState] {
        &self.steps
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.steps[0].t
    }

    pub fn duration(&self) -> f64 {
        (self.steps.len() - 1) as f64 * self.dt
    }

    /// Index of the grid point at `t` (seconds on the event's own clock).
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let offset = (t - self.start_time()) / self.dt;
        let idx = offset.round();
        if (offset - idx).abs() * self.dt > GRID_TOL.max(1e-6 * self.dt) {
            return Err(EventError::OffGrid {
                event_id: self.event_id.clone(),
                t,
                dt: self.dt,
            });
        }
        if idx < 0.0 || idx as usize >= self.steps.len() {
            return Err(EventError::OutOfRange {
                event_id: self.event_id.clone(),
                start: t,
                end: t,
            });
        }
        Ok(idx as usize)
    }

    pub fn to_raw(&self) -> RawEvent {
        RawEvent {
            event_id: self.event_id.clone(),
            dt: Some(self.dt),
            steps: self.steps.iter().copied().map(RawStep::from).collect(),
            source: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Json,
}

impl EventFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

impl FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown event format `{other}` (expected csv or json)")),
        }
    }
}

impl fmt::Display for EventFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

/// Load and validate every event in `path`, preserving file order.
pub fn load_events(path: &Path, format: EventFormat) -> Result<Vec<CarFollowingEvent>> {
    let text = fs::read_to_string(path).map_err(|source| EventError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let source = path.display().to_string();
    let raw = match format {
        EventFormat::Csv => parse_csv(&text)?,
        EventFormat::Json => parse_json(&text)?,
    };
    if raw.is_empty() {
        return Err(EventError::EmptyFile { path: source });
    }
    raw.into_iter()
        .map(|mut ev| {
            ev.source = source.clone();
            validate_event(ev)
        })
        .collect()
}

const CSV_COLUMNS: [&str; 5] = ["event_id", "t", "spacing", "lv_speed", "fv_speed"];

/// Parse the CSV layout. Rows of one event must be contiguous.
pub fn parse_csv(text: &str) -> Result<Vec<RawEvent>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(CSV_COLUMNS) {
        *slot = column(name).ok_or_else(|| EventError::MissingColumn {
            column: name.to_string(),
        })?;
    }
    let rel_idx = column("rel_speed");

    let mut events: Vec<RawEvent> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record?;
        let field = |j: usize, name: &str| -> Result<f64> {
            let cell = record.get(j).unwrap_or("");
            cell.parse::<f64>().map_err(|_| EventError::Malformed {
                row,
                message: format!("`{name}` = {cell:?} is not a number"),
            })
        };
        let event_id = record.get(idx[0]).unwrap_or("").to_string();
        let step = RawStep {
            t: field(idx[1], "t")?,
            spacing: field(idx[2], "spacing")?,
            lv_speed: field(idx[3], "lv_speed")?,
            fv_speed: field(idx[4], "fv_speed")?,
            rel_speed: match rel_idx.and_then(|j| record.get(j)) {
                Some(cell) if !cell.is_empty() => Some(field(rel_idx.unwrap(), "rel_speed")?),
                _ => None,
            },
        };
        if step.lv_speed < 0.0 || step.fv_speed < 0.0 {
            let (field, value) = if step.fv_speed < 0.0 {
                ("fv_speed", step.fv_speed)
            } else {
                ("lv_speed", step.lv_speed)
            };
            return Err(EventError::NegativeSpeed {
                event_id,
                row,
                field,
                value,
            });
        }
        match events.last_mut() {
            Some(ev) if ev.event_id == event_id => ev.steps.push(step),
            _ => {
                if seen.contains_key(&event_id) {
                    return Err(EventError::Malformed {
                        row,
                        message: format!("rows of event {event_id} are not contiguous"),
                    });
                }
                seen.insert(event_id.clone(), events.len());
                events.push(RawEvent {
                    event_id,
                    dt: None,
                    steps: vec![step],
                    source: String::new(),
                });
            }
        }
    }
    Ok(events)
}

/// Parse the JSON layout: an array of `{event_id, dt, steps}` objects.
pub fn parse_json(text: &str) -> Result<Vec<RawEvent>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(text)?)
}

/// Check every invariant of an event and fill in missing relative speeds.
///
/// Values are kept at full precision.
pub fn validate_event(raw: RawEvent) -> Result<CarFollowingEvent> {
    let RawEvent {
        event_id,
        dt,
        steps,
        source,
    } = raw;
    if steps.len() < 2 {
        return Err(EventError::TooShort {
            event_id,
            len: steps.len(),
        });
    }
    let t0 = steps[0].t;
    let dt = dt.unwrap_or_else(|| (steps[steps.len() - 1].t - t0) / (steps.len() - 1) as f64);
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EventError::NonUniformTimestep {
            event_id,
            row: 1,
            t: steps[1].t,
        });
    }

    let mut out = Vec::with_capacity(steps.len());
    for (row, s) in steps.iter().enumerate() {
        for (field, v) in [
            ("t", s.t),
            ("spacing", s.spacing),
            ("lv_speed", s.lv_speed),
            ("fv_speed", s.fv_speed),
            ("rel_speed", s.rel_speed.unwrap_or(0.0)),
        ] {
            if !v.is_finite() {
                return Err(EventError::NonFinite {
                    event_id,
                    row,
                    field,
                });
            }
        }
        if (s.t - (t0 + row as f64 * dt)).abs() > GRID_TOL {
            return Err(EventError::NonUniformTimestep {
                event_id,
                row,
                t: s.t,
            });
        }
        if s.fv_speed < 0.0 || s.lv_speed < 0.0 {
            let (field, value) = if s.fv_speed < 0.0 {
                ("fv_speed", s.fv_speed)
            } else {
                ("lv_speed", s.lv_speed)
            };
            return Err(EventError::NegativeSpeed {
                event_id,
                row,
                field,
                value,
            });
        }
        if s.spacing <= 0.0 {
            return Err(EventError::NonPositiveSpacing {
                event_id,
                row,
                spacing: s.spacing,
            });
        }
        let expected = s.lv_speed - s.fv_speed;
        if let Some(given) = s.rel_speed {
            if (given - expected).abs() > REL_SPEED_TOL {
                return Err(EventError::InconsistentRelSpeed {
                    event_id,
                    row,
                    given,
                    expected,
                });
            }
        }
        out.push(StepState {
            t: s.t,
            spacing: s.spacing,
            lv_speed: s.lv_speed,
            fv_speed: s.fv_speed,
            rel_speed: expected,
        });
    }
    Ok(CarFollowingEvent {
        event_id,
        dt,
        steps: out,
        source,
    })
}

/// The inclusive samples covering `[t_now - window, t_now]`.
pub fn slice_history(event: &CarFollowingEvent, t_now: f64, window: f64) -> Result<&[StepState]> {
    if !(window >= 0.0) || !t_now.is_finite() {
        return Err(EventError::InvalidArgument(format!(
            "window must be non-negative, got {window}"
        )));
    }
    let out_of_range = || EventError::OutOfRange {
        event_id: event.event_id.clone(),
        start: t_now - window,
        end: t_now,
    };
    let start = t_now - window;
    if start < event.start_time() - GRID_TOL || t_now > event.start_time() + event.duration() + GRID_TOL
    {
        return Err(out_of_range());
    }
    let end = event.index_at(t_now)?;
    let span = window / event.dt;
    let k = span.round();
    if (span - k).abs() * event.dt > GRID_TOL.max(1e-6 * event.dt) {
        return Err(EventError::OffGrid {
            event_id: event.event_id.clone(),
            t: start,
            dt: event.dt,
        });
    }
    let k = k as usize;
    if k > end {
        return Err(out_of_range());
    }
    Ok(&event.steps[end - k..=end])
}

/// Write events in the CSV layout (with `rel_speed`).
pub fn write_events_csv<W: Write>(events: &[CarFollowingEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["event_id", "t", "spacing", "lv_speed", "fv_speed", "rel_speed"])?;
    for ev in events {
        for s in &ev.steps {
            w.write_record([
                ev.event_id.clone(),
                s.t.to_string(),
                s.spacing.to_string(),
                s.lv_speed.to_string(),
                s.fv_speed.to_string(),
                s.rel_speed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| EventError::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

/// Serialize events in the JSON layout.
pub fn events_to_json(events: &[CarFollowingEvent]) -> Result<String> {
    let raw: Vec<RawEvent> = events.iter().map(CarFollowingEvent::to_raw).collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn save_events(events: &[CarFollowingEvent], path: &Path, format: EventFormat) -> Result<()> {
    let io_err = |source| EventError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        EventFormat::Csv => {
            let file = fs::File::create(path).map_err(io_err)?;
            write_events_csv(events, std::io::BufWriter::new(file))
        }
        EventFormat::Json => fs::write(path, events_to_json(events)?).map_err(io_err),
    }
}

/// Lead-vehicle speed profile families for synthetic events.
///
/// Each event draws its own phase and amplitude jitter from the seeded
/// generator, so a profile describes a family rather than one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeaderProfile {
    /// Leader holds one speed for the whole event.
    Constant { speed: f64 },
    /// Smooth oscillation around `mean`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
    },
    /// Cruise, brake to a standstill, wait, pull away again.
    StopAndGo {
        cruise: f64,
        decel: f64,
        accel: f64,
        stop_time: f64,
    },
    /// Piecewise-constant random accelerations, reverting toward `mean`.
    RandomAccel { mean: f64, accel_sd: f64 },
}

impl LeaderProfile {
    fn speeds(&self, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            LeaderProfile::Constant { speed } => vec![speed.max(0.0); n],
            LeaderProfile::Sinusoid {
                mean,
                amplitude,
                period,
            } => {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = amplitude * rng.random_range(0.7..1.3);
                let period = period * rng.random_range(0.8..1.2);
                (0..n)
                    .map(|i| {
                        let t = i as f64 * dt;
                        (mean + amp * (std::f64::consts::TAU * t / period + phase).sin()).max(0.0)
                    })
                    .collect()
            }
            LeaderProfile::StopAndGo {
                cruise,
                decel,
                accel,
                stop_time,
            } => {
                let cruise = cruise * rng.random_range(0.8..1.2);
                let brake_at = rng.random_range(1.0..5.0);
                let stop_time = stop_time * rng.random_range(0.5..1.5);
                let mut v = cruise;
                let mut stopped_for = 0.0;
                let mut phase = 0u8;
                (0..n)
                    .map(|i| {
                        let t = i as f64 * dt;
                        let out = v;
                        match phase {
                            0 if t >= brake_at => phase = 1,
                            1 if v <= 0.0 => phase = 2,
                            2 if stopped_for >= stop_time => phase = 3,
                            _ => {}
                        }
                        match phase {
                            1 => v = (v - decel * dt).max(0.0),
                            2 => stopped_for += dt,
                            3 => v = (v + accel * dt).min(cruise),
                            _ => {}
                        }
                        out
                    })
                    .collect()
            }
            LeaderProfile::RandomAccel { mean, accel_sd } => {
                let mut v = mean * rng.random_range(0.8..1.2);
                let mut a = 0.0;
                (0..n)
                    .map(|i| {
                        let out = v;
                        // new acceleration every second
                        if i % ((1.0 / dt).round().max(1.0) as usize) == 0 {
                            let noise: f64 = rng.random_range(-1.0..1.0);
                            a = (accel_sd * 1.7 * noise + 0.3 * (mean - v)).clamp(-3.0, 2.0);
                        }
                        v = (v + a * dt).max(0.0);
                        out
                    })
                    .collect()
            }
        }
    }
}

/// Knobs for [`synth_events`] beyond the leader profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub dt: f64,
    pub duration: f64,
    pub limits: AccelLimits,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            duration: EVENT_DURATION,
            limits: AccelLimits::default(),
        }
    }
}

/// Generate `n` events whose follower is driven by a known physics model.
///
/// The follower speed at each step is produced by the same predictor and
/// spacing integrator used by closed-loop rollout, so a rollout with the
/// generating parameters reproduces the recorded trajectory.
pub fn synth_events(
    profile: &LeaderProfile,
    params: &ModelParams,
    n: usize,
    seed: u64,
) -> Result<Vec<CarFollowingEvent>> {
    synth_events_with(profile, params, n, seed, &SynthConfig::default())
}

pub fn synth_events_with(
    profile: &LeaderProfile,
    params: &ModelParams,
    n: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<Vec<CarFollowingEvent>> {
    if n == 0 {
        return Err(EventError::InvalidArgument("n must be at least 1".into()));
    }
    if !(config.dt > 0.0 && config.duration > config.dt) {
        return Err(EventError::InvalidArgument(format!(
            "dt = {} and duration = {} do not describe a grid",
            config.dt, config.duration
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (config.duration / config.dt).round() as usize + 1;
    let mut predictor = PhysicsPredictor::with_limits(*params, config.limits);
    let delay = predictor.delay_steps(config.dt);

    (0..n)
        .map(|i| {
            let lv = profile.speeds(steps, config.dt, &mut rng);
            let fv0 = (lv[0] * rng.random_range(0.7..1.1)).max(0.0);
            // headway of roughly 1.2-2.5 s plus a standstill buffer
            let s0 = 3.0 + fv0 * rng.random_range(1.2..2.5);

            let mut states = Vec::with_capacity(steps);
            states.push(StepState::new(0.0, s0, lv[0], fv0));
            for k in 1..steps {
                let prev = states[k - 1];
                let fv = if k - 1 < delay {
                    prev.fv_speed
                } else {
                    predictor
                        .predict(&states, config.dt)
                        .expect("physics predictor on synthetic history")
                };
                let t = k as f64 * config.dt;
                let dv = lv[k] - fv;
                let s = step_spacing(prev.spacing, prev.rel_speed, dv, config.dt)
                    .expect("finite synthetic state");
                states.push(StepState::new(t, s, lv[k], fv));
            }
            validate_event(RawEvent {
                event_id: format!("synth-{seed}-{i:04}"),
                dt: Some(config.dt),
                steps: states.into_iter().map(RawStep::from).collect(),
                source: format!("synthetic:{seed}"),
            })
        })
        .collect()
}
