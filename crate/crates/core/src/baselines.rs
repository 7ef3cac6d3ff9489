//! Physics car-following baselines: the Intelligent Driver Model and the
//! Gazis-Herman-Rothery stimulus-response model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::StepState;
use crate::kinematics::{PredictError, Predictor};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("GHR delay of {delay_steps} steps needs more than the {available} samples of history")]
    InsufficientHistory {
        delay_steps: usize,
        available: usize,
    },
    #[error("empty history")]
    EmptyHistory,
    #[error("parameter `{name}` = {value} is outside [{lo}, {hi}]")]
    OutOfBounds {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

/// Bounds on one calibratable parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBound {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

const fn bound(name: &'static str, lo: f64, hi: f64) -> ParamBound {
    ParamBound { name, lo, hi }
}

pub const IDM_BOUNDS: [ParamBound; 6] = [
    bound("v0", 1.0, 40.0),
    bound("t_headway", 0.1, 5.0),
    bound("a_max", 0.1, 5.0),
    bound("b", 0.1, 5.0),
    bound("delta", 1.0, 10.0),
    bound("s0", 0.1, 10.0),
];

pub const GHR_BOUNDS: [ParamBound; 4] = [
    bound("c", 1e-4, 100.0),
    bound("m_exp", -2.0, 2.0),
    bound("l_exp", -1.0, 4.0),
    bound("tau", 0.0, 2.0),
];

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub t_headway: f64,
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Acceleration exponent.
    pub delta: f64,
    /// Jam spacing, m.
    pub s0: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 20.0,
            t_headway: 1.5,
            a_max: 1.0,
            b: 2.0,
            delta: 4.0,
            s0: 2.0,
        }
    }
}

/// Gazis-Herman-Rothery parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhrParams {
    /// Sensitivity coefficient; absorbs the units of the exponents.
    pub c: f64,
    /// Exponent on the follower's current speed.
    pub m_exp: f64,
    /// Exponent on the delayed spacing.
    pub l_exp: f64,
    /// Reaction delay, s. Quantized to the sampling grid when used.
    pub tau: f64,
}

impl Default for GhrParams {
    fn default() -> Self {
        Self {
            c: 1.5,
            m_exp: 0.0,
            l_exp: 1.0,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsModel {
    Idm,
    Ghr,
}

impl PhysicsModel {
    pub fn bounds(self) -> &'static [ParamBound] {
        match self {
            PhysicsModel::Idm => &IDM_BOUNDS,
            PhysicsModel::Ghr => &GHR_BOUNDS,
        }
    }

    pub fn default_params(self) -> ModelParams {
        match self {
            PhysicsModel::Idm => ModelParams::Idm(IdmParams::default()),
            PhysicsModel::Ghr => ModelParams::Ghr(GhrParams::default()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhysicsModel::Idm => "idm",
            PhysicsModel::Ghr => "ghr",
        }
    }
}

impl fmt::Display for PhysicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhysicsModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idm" => Ok(Self::Idm),
            "ghr" => Ok(Self::Ghr),
            other => Err(format!("unsupported model `{other}`")),
        }
    }
}

/// A parameter set for one of the physics models. Serialized as a flat JSON
/// object with a `model` discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelParams {
    Idm(IdmParams),
    Ghr(GhrParams),
}

impl ModelParams {
    pub fn model(&self) -> PhysicsModel {
        match self {
            ModelParams::Idm(_) => PhysicsModel::Idm,
            ModelParams::Ghr(_) => PhysicsModel::Ghr,
        }
    }

    /// Flatten to the gene order of [`PhysicsModel::bounds`].
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            ModelParams::Idm(p) => vec![p.v0, p.t_headway, p.a_max, p.b, p.delta, p.s0],
            ModelParams::Ghr(p) => vec![p.c, p.m_exp, p.l_exp, p.tau],
        }
    }

    /// Inverse of [`ModelParams::to_vec`]. Panics on a length mismatch.
    pub fn from_slice(model: PhysicsModel, genes: &[f64]) -> Self {
        assert_eq!(genes.len(), model.bounds().len(), "gene count for {model}");
        match model {
            PhysicsModel::Idm => ModelParams::Idm(IdmParams {
                v0: genes[0],
                t_headway: genes[1],
                a_max: genes[2],
                b: genes[3],
                delta: genes[4],
                s0: genes[5],
            }),
            PhysicsModel::Ghr => ModelParams::Ghr(GhrParams {
                c: genes[0],
                m_exp: genes[1],
                l_exp: genes[2],
                tau: genes[3],
            }),
        }
    }

    pub fn check_bounds(&self) -> Result<(), BaselineError> {
        for (value, b) in self.to_vec().into_iter().zip(self.model().bounds()) {
            if !(value >= b.lo && value <= b.hi) {
                return Err(BaselineError::OutOfBounds {
                    name: b.name,
                    value,
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
        Ok(())
    }
}

/// Hard acceleration limits applied to every physics prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelLimits {
    /// Emergency deceleration magnitude, m/s².
    pub b_emergency: f64,
    pub a_max_global: f64,
}

impl Default for AccelLimits {
    fn default() -> Self {
        Self {
            b_emergency: 8.0,
            a_max_global: 5.0,
        }
    }
}

/// IDM acceleration. `dv_closing = v_fv - v_lv` is the approach rate,
/// i.e. the negation of the relative speed stored in [`StepState`].
pub fn idm_accel(p: &IdmParams, v: f64, dv_closing: f64, s: f64) -> Result<f64, BaselineError> {
    if !(s > 0.0) {
        return Err(BaselineError::NonPositiveSpacing(s));
    }
    let s_star = p.s0 + v * p.t_headway + v * dv_closing / (2.0 * (p.a_max * p.b).sqrt());
    Ok(p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / s).powi(2)))
}

/// Speed floor used for the GHR speed term when its exponent is negative.
const GHR_MIN_SPEED: f64 = 0.1;

/// GHR acceleration `c * v^m * dv / s^l` with `dv = v_lv - v_fv` and `s`
/// taken `tau` seconds in the past.
pub fn ghr_accel(
    p: &GhrParams,
    v_fv_now: f64,
    dv_delayed: f64,
    s_delayed: f64,
) -> Result<f64, BaselineError> {
    if !(s_delayed > 0.0) {
        return Err(BaselineError::NonPositiveSpacing(s_delayed));
    }
    let v = if p.m_exp < 0.0 {
        v_fv_now.max(GHR_MIN_SPEED)
    } else {
        v_fv_now.max(0.0)
    };
    Ok(p.c * v.powf(p.m_exp) * dv_delayed / s_delayed.powf(p.l_exp))
}

/// Number of grid steps the GHR delay spans.
pub fn ghr_delay_steps(tau: f64, dt: f64) -> usize {
    (tau / dt).round().max(0.0) as usize
}

/// One explicit step of a physics model: `max(0, v + a * dt)` with `a`
/// clamped to `[-b_emergency, a_max_global]`.
///
/// A non-positive current (or delayed) spacing means the vehicles overlap;
/// the follower then brakes at the emergency limit.
pub fn physics_predict(
    params: &ModelParams,
    history: &[StepState],
    dt: f64,
    limits: &AccelLimits,
) -> Result<f64, BaselineError> {
    let now = history.last().ok_or(BaselineError::EmptyHistory)?;
    let accel = match params {
        ModelParams::Idm(p) => {
            // stored relative speed is lv - fv; IDM wants the closing rate
            let dv_closing = -now.rel_speed;
            match idm_accel(p, now.fv_speed, dv_closing, now.spacing) {
                Ok(a) => a,
                Err(BaselineError::NonPositiveSpacing(_)) => -limits.b_emergency,
                Err(e) => return Err(e),
            }
        }
        ModelParams::Ghr(p) => {
            let grid_dt = grid_dt(history).unwrap_or(dt);
            let delay = ghr_delay_steps(p.tau, grid_dt);
            if history.len() <= delay {
                return Err(BaselineError::InsufficientHistory {
                    delay_steps: delay,
                    available: history.len(),
                });
            }
            let past = history[history.len() - 1 - delay];
            if now.spacing <= 0.0 {
                -limits.b_emergency
            } else {
                match ghr_accel(p, now.fv_speed, past.rel_speed, past.spacing) {
                    Ok(a) => a,
                    Err(BaselineError::NonPositiveSpacing(_)) => -limits.b_emergency,
                    Err(e) => return Err(e),
                }
            }
        }
    };
    let accel = if accel.is_nan() {
        -limits.b_emergency
    } else {
        accel.clamp(-limits.b_emergency, limits.a_max_global)
    };
    Ok((now.fv_speed + accel * dt).max(0.0))
}

fn grid_dt(history: &[StepState]) -> Option<f64> {
    match history {
        [.., a, b] => Some(b.t - a.t),
        _ => None,
    }
}

/// [`Predictor`] adapter for the physics models.
#[derive(Debug, Clone)]
pub struct PhysicsPredictor {
    params: ModelParams,
    limits: AccelLimits,
}

impl PhysicsPredictor {
    pub fn new(params: ModelParams) -> Self {
        Self::with_limits(params, AccelLimits::default())
    }

    pub fn with_limits(params: ModelParams, limits: AccelLimits) -> Self {
        Self { params, limits }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Steps of history that must exist before the first prediction.
    pub fn delay_steps(&self, dt: f64) -> usize {
        match self.params {
            ModelParams::Ghr(p) => ghr_delay_steps(p.tau, dt),
            ModelParams::Idm(_) => 0,
        }
    }
}

impl Predictor for PhysicsPredictor {
    fn name(&self) -> &str {
        self.params.model().as_str()
    }

    fn requires_warmup(&self) -> f64 {
        match self.params {
            ModelParams::Ghr(p) => p.tau,
            ModelParams::Idm(_) => 0.0,
        }
    }

    fn predict(&mut self, history: &[StepState], horizon: f64) -> Result<f64, PredictError> {
        physics_predict(&self.params, history, horizon, &self.limits)
            .map_err(|e| PredictError::new(e.to_string()))
    }
}
