//! Closed-loop car-following simulation and benchmarking.
//!
//! Speed predictors (physics baselines, an LLM-prompted predictor, simple
//! reference predictors) are rolled out against the recorded lead-vehicle
//! speeds of car-following events and scored by spacing error, collision
//! rate and time to collision.

pub mod baselines;
pub mod calibrate;
pub mod cli;
pub mod events;
pub mod kinematics;
pub mod llm;
pub mod metrics;

pub use baselines::{AccelLimits, GhrParams, IdmParams, ModelParams, PhysicsModel, PhysicsPredictor};
pub use events::{CarFollowingEvent, StepState};
pub use kinematics::{rollout, Predictor, RolloutConfig, SimulatedTrajectory};
pub use metrics::EvalReport;
