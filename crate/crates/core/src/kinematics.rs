//! Closed-loop state update and rollout of a speed predictor against the
//! recorded lead-vehicle speeds of an event.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::events::{CarFollowingEvent, StepState, GRID_TOL};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("non-finite input to the spacing update")]
    NonFiniteInput,
    #[error("stride {stride} s is not a positive multiple of dt = {dt} s")]
    InvalidStride { stride: f64, dt: f64 },
    #[error("invalid warmup {warmup} s: {reason}")]
    InvalidWarmup { warmup: f64, reason: String },
    #[error("predictor `{predictor}` failed at t = {t} s: {message}")]
    PredictorFailure {
        predictor: String,
        t: f64,
        message: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Error returned by a [`Predictor`].
#[derive(Debug, Error)]
#[error("{0}")]
pub struct PredictError(pub String);

impl PredictError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

/// Anything that can predict the follower's speed `horizon` seconds ahead.
///
/// `history` is the simulated state from the start of the event up to and
/// including the current step, on the event's uniform grid.
pub trait Predictor {
    fn name(&self) -> &str;

    /// Seconds of history required before the first prediction.
    fn requires_warmup(&self) -> f64 {
        0.0
    }

    fn predict(&mut self, history: &[StepState], horizon: f64) -> Result<f64, PredictError>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn requires_warmup(&self) -> f64 {
        (**self).requires_warmup()
    }

    fn predict(&mut self, history: &[StepState], horizon: f64) -> Result<f64, PredictError> {
        (**self).predict(history, horizon)
    }
}

/// Trapezoidal spacing update over one interval of length `dt`.
pub fn step_spacing(s_t: f64, dv_t: f64, dv_t1: f64, dt: f64) -> Result<f64, KinematicsError> {
    if !(s_t.is_finite() && dv_t.is_finite() && dv_t1.is_finite() && dt.is_finite()) || dt <= 0.0
    {
        return Err(KinematicsError::NonFiniteInput);
    }
    Ok(s_t + (dv_t + dv_t1) / 2.0 * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimStep {
    pub t: f64,
    pub spacing_sim: f64,
    pub fv_speed_sim: f64,
    pub lv_speed: f64,
    pub rel_speed_sim: f64,
}

impl From<&StepState> for SimStep {
    fn from(s: &StepState) -> Self {
        Self {
            t: s.t,
            spacing_sim: s.spacing,
            fv_speed_sim: s.fv_speed,
            lv_speed: s.lv_speed,
            rel_speed_sim: s.rel_speed,
        }
    }
}

/// Result of one closed-loop rollout. `sim_steps` covers the whole event,
/// warmup included; steps with `t <= warmup_end` equal the record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedTrajectory {
    pub event_id: String,
    pub dt: f64,
    pub warmup_end: f64,
    pub sim_steps: Vec<SimStep>,
    pub collided: bool,
    pub collision_t: Option<f64>,
}

impl SimulatedTrajectory {
    /// Index of the first step after warmup.
    pub fn eval_start(&self) -> usize {
        self.sim_steps
            .iter()
            .position(|s| s.t > self.warmup_end + GRID_TOL)
            .unwrap_or(self.sim_steps.len())
    }

    /// The simulated steps that are scored (post-warmup).
    pub fn eval_steps(&self) -> &[SimStep] {
        &self.sim_steps[self.eval_start()..]
    }

    pub fn eval_spacing(&self) -> Vec<f64> {
        self.eval_steps().iter().map(|s| s.spacing_sim).collect()
    }
}

/// Timing of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct RolloutConfig {
    /// Seconds pinned to the record before the predictor takes over.
    pub warmup: f64,
    /// Seconds between predictor calls; must be a multiple of the event dt.
    pub stride: f64,
}

pub const DEFAULT_WARMUP: f64 = 4.0;
pub const LLM_STRIDE: f64 = 0.5;

impl RolloutConfig {
    pub fn new(warmup: f64, stride: f64) -> Self {
        Self { warmup, stride }
    }

    /// Warmup of 4 s and a predictor call every grid step.
    pub fn physics(dt: f64) -> Self {
        Self::new(DEFAULT_WARMUP, dt)
    }

    /// Warmup of 4 s and a 0.5 s prediction horizon.
    pub fn llm() -> Self {
        Self::new(DEFAULT_WARMUP, LLM_STRIDE)
    }
}

fn grid_steps(value: f64, dt: f64) -> Option<usize> {
    let k = (value / dt).round();
    ((value - k * dt).abs() <= GRID_TOL.max(1e-6 * dt) && k >= 0.0).then_some(k as usize)
}

/// Roll `predictor` out over `event` in closed loop.
///
/// Up to `warmup` the state is copied from the record. Afterwards the
/// predictor is called every `stride` seconds on the simulated history, the
/// follower speed is linearly interpolated between consecutive predictions,
/// the leader speed is taken from the record and spacing is integrated at
/// every grid step. A negative spacing marks a collision but the rollout
/// carries on to the end of the event.
pub fn rollout<P: Predictor + ?Sized>(
    event: &CarFollowingEvent,
    predictor: &mut P,
    config: RolloutConfig,
) -> Result<SimulatedTrajectory, KinematicsError> {
    let dt = event.dt();
    let rec = event.steps();
    let stride = match grid_steps(config.stride, dt) {
        Some(m) if m >= 1 => m,
        _ => {
            return Err(KinematicsError::InvalidStride {
                stride: config.stride,
                dt,
            })
        }
    };
    let warmup = grid_steps(config.warmup, dt).ok_or_else(|| KinematicsError::InvalidWarmup {
        warmup: config.warmup,
        reason: format!("not on the dt = {dt} s grid"),
    })?;
    if config.warmup + GRID_TOL < predictor.requires_warmup() {
        return Err(KinematicsError::InvalidWarmup {
            warmup: config.warmup,
            reason: format!(
                "predictor `{}` needs {} s of history",
                predictor.name(),
                predictor.requires_warmup()
            ),
        });
    }
    if warmup >= rec.len() - 1 {
        return Err(KinematicsError::InvalidWarmup {
            warmup: config.warmup,
            reason: format!("event {} lasts only {} s", event.event_id(), event.duration()),
        });
    }

    let mut history: Vec<StepState> = Vec::with_capacity(rec.len());
    history.extend_from_slice(&rec[..=warmup]);

    let mut k = warmup;
    while k < rec.len() - 1 {
        let target = (k + stride).min(rec.len() - 1);
        let n = target - k;
        let horizon = n as f64 * dt;
        let now = history[k];
        let predicted =
            predictor
                .predict(&history, horizon)
                .map_err(|e| KinematicsError::PredictorFailure {
                    predictor: predictor.name().to_string(),
                    t: now.t,
                    message: e.to_string(),
                })?;
        if !predicted.is_finite() || predicted < 0.0 {
            return Err(KinematicsError::PredictorFailure {
                predictor: predictor.name().to_string(),
                t: now.t,
                message: format!("returned invalid speed {predicted}"),
            });
        }
        for j in 1..=n {
            let fv = if j == n {
                predicted
            } else {
                now.fv_speed + (predicted - now.fv_speed) * (j as f64 / n as f64)
            };
            let prev = history[k + j - 1];
            let lv = rec[k + j].lv_speed;
            let dv = lv - fv;
            let spacing = step_spacing(prev.spacing, prev.rel_speed, dv, dt)?;
            history.push(StepState {
                t: rec[k + j].t,
                spacing,
                lv_speed: lv,
                fv_speed: fv,
                rel_speed: dv,
            });
        }
        k = target;
    }

    let sim_steps: Vec<SimStep> = history.iter().map(SimStep::from).collect();
    let collision_t = sim_steps.iter().find(|s| s.spacing_sim < 0.0).map(|s| s.t);
    Ok(SimulatedTrajectory {
        event_id: event.event_id().to_string(),
        dt,
        warmup_end: rec[warmup].t,
        sim_steps,
        collided: collision_t.is_some(),
        collision_t,
    })
}

/// Replays the recorded follower speed. Reproduces the record exactly on
/// events whose spacing obeys the trapezoidal update.
#[derive(Debug, Clone)]
pub struct PlaybackPredictor {
    event: CarFollowingEvent,
}

impl PlaybackPredictor {
    pub fn new(event: CarFollowingEvent) -> Self {
        Self { event }
    }
}

impl Predictor for PlaybackPredictor {
    fn name(&self) -> &str {
        "playback"
    }

    fn predict(&mut self, history: &[StepState], horizon: f64) -> Result<f64, PredictError> {
        let now = history.last().ok_or_else(|| PredictError::new("empty history"))?;
        let idx = self
            .event
            .index_at(now.t + horizon)
            .map_err(|e| PredictError::new(e.to_string()))?;
        Ok(self.event.steps()[idx].fv_speed)
    }
}

/// Holds the follower at a fixed speed.
#[derive(Debug, Clone)]
pub struct ConstantSpeedPredictor {
    speed: Option<f64>,
}

impl ConstantSpeedPredictor {
    /// Keeps whatever speed the follower has when prediction starts.
    pub fn hold() -> Self {
        Self { speed: None }
    }

    pub fn fixed(speed: f64) -> Self {
        Self { speed: Some(speed) }
    }
}

impl Predictor for ConstantSpeedPredictor {
    fn name(&self) -> &str {
        "constant"
    }

    fn predict(&mut self, history: &[StepState], _horizon: f64) -> Result<f64, PredictError> {
        match self.speed {
            Some(v) => Ok(v),
            None => history
                .last()
                .map(|s| s.fv_speed)
                .ok_or_else(|| PredictError::new("empty history")),
        }
    }
}

/// Write trajectories as `event_id,t,spacing_sim,fv_speed_sim,lv_speed,rel_speed_sim,collided`.
///
/// `collided` is true on the first negative-spacing step and every step after it.
pub fn write_trajectory_csv<W: Write>(
    trajectories: &[SimulatedTrajectory],
    out: W,
) -> Result<(), KinematicsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "event_id",
        "t",
        "spacing_sim",
        "fv_speed_sim",
        "lv_speed",
        "rel_speed_sim",
        "collided",
    ])?;
    for traj in trajectories {
        for s in &traj.sim_steps {
            let collided = traj.collision_t.is_some_and(|tc| s.t >= tc);
            w.write_record([
                traj.event_id.clone(),
                s.t.to_string(),
                s.spacing_sim.to_string(),
                s.fv_speed_sim.to_string(),
                s.lv_speed.to_string(),
                s.rel_speed_sim.to_string(),
                collided.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
