//! The LLM-prompted speed predictor.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{physics_predict, AccelLimits, IdmParams, ModelParams};
use crate::events::StepState;
use crate::kinematics::{PredictError, Predictor};

use super::backend::{BackendError, ChatBackend, ChatMessage};
use super::filter::{safety_filter, SafetyLimits};
use super::parse::{parse_response, ParseError, ParseMethod};
use super::prompt::{build_system_message, build_user_message, PromptError, TaskConfig};

pub const REASK_MESSAGE: &str = "Your previous reply could not be parsed. Answer again and finish \
with exactly these two lines:\nPredicted speed: <number> m/s\nExplanation: <one short paragraph>";

#[derive(Debug, Error)]
pub enum GenFollowerError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(BackendError),
    #[error("reply could not be parsed: {0}")]
    Unparseable(ParseError),
    #[error("fallback prediction failed: {0}")]
    Fallback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionOutcome {
    /// Predicted follower speed after the safety filter, m/s.
    pub speed: f64,
    pub explanation: String,
    pub raw_reply: String,
    /// `None` when the IDM fallback produced the speed.
    pub parse_method: Option<ParseMethod>,
    pub filtered: bool,
    pub filter_reason: Option<String>,
    pub from_cache: bool,
}

/// Replies keyed by a hash of the request messages. Shared by all
/// predictor instances of a run.
#[derive(Debug, Default)]
pub struct ReplyCache {
    entries: Mutex<HashMap<[u8; 32], String>>,
}

impl ReplyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(messages: &[ChatMessage]) -> [u8; 32] {
        let mut h = Sha256::new();
        for m in messages {
            h.update(serde_json::to_vec(m).expect("messages serialize"));
            h.update([0u8]);
        }
        h.finalize().into()
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<String> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: [u8; 32], reply: String) {
        self.entries.lock().unwrap().insert(key, reply);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenFollowerConfig {
    pub task: TaskConfig,
    pub limits: SafetyLimits,
    /// IDM parameters used when the reply cannot be used; `None` disables the fallback.
    pub fallback: Option<IdmParams>,
}

impl Default for GenFollowerConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            limits: SafetyLimits::default(),
            fallback: Some(IdmParams::default()),
        }
    }
}

/// Prompts a chat model for the follower speed, parses and filters the
/// answer, and falls back to IDM when the model does not give a usable one.
pub struct GenFollower {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ReplyCache>,
    config: GenFollowerConfig,
    system_message: String,
    outcomes: Vec<(f64, PredictionOutcome)>,
    backend_calls: usize,
}

impl GenFollower {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GenFollowerConfig) -> Self {
        Self::with_cache(backend, config, Arc::new(ReplyCache::new()))
    }

    pub fn with_cache(
        backend: Arc<dyn ChatBackend>,
        config: GenFollowerConfig,
        cache: Arc<ReplyCache>,
    ) -> Self {
        let system_message = build_system_message(&config.task);
        Self {
            backend,
            cache,
            config,
            system_message,
            outcomes: Vec::new(),
            backend_calls: 0,
        }
    }

    pub fn system_message(&self) -> &str {
        &self.system_message
    }

    /// Every outcome so far, tagged with the time of the state it was made from.
    pub fn outcomes(&self) -> &[(f64, PredictionOutcome)] {
        &self.outcomes
    }

    /// Requests actually sent to the backend (cache hits excluded).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls
    }

    pub fn messages(&self, history: &[StepState], horizon: f64) -> Result<Vec<ChatMessage>, PromptError> {
        let dt = match history {
            [.., a, b] => b.t - a.t,
            _ => 0.0,
        };
        let task = TaskConfig {
            horizon,
            ..self.config.task
        };
        Ok(vec![
            ChatMessage::system(self.system_message.clone()),
            ChatMessage::user(build_user_message(history, dt, &task)?),
        ])
    }

    fn ask(&mut self, messages: &[ChatMessage]) -> Result<(String, bool), BackendError> {
        let key = ReplyCache::key(messages);
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit, true));
        }
        self.backend_calls += 1;
        let reply = self.backend.chat(messages)?;
        self.cache.insert(key, reply.clone());
        Ok((reply, false))
    }

    /// Predict the follower speed `horizon` seconds after the last state.
    pub fn predict_outcome(
        &mut self,
        history: &[StepState],
        horizon: f64,
    ) -> Result<PredictionOutcome, GenFollowerError> {
        let now = *history.last().ok_or(PromptError::ShortHistory {
            span: 0.0,
            required: self.config.task.history_window,
        })?;
        let messages = self.messages(history, horizon)?;

        let mut raw_reply = String::new();
        let mut from_cache = false;
        let failure;
        match self.ask(&messages) {
            Ok((reply, cached)) => {
                from_cache = cached;
                match parse_response(&reply) {
                    Ok(parsed) => {
                        return Ok(self.finish(now, horizon, parsed, reply, cached));
                    }
                    Err(_) => {
                        let mut retry = messages.clone();
                        retry.push(ChatMessage::assistant(reply.clone()));
                        retry.push(ChatMessage::user(REASK_MESSAGE));
                        raw_reply = reply;
                        match self.ask(&retry) {
                            Ok((second, cached)) => match parse_response(&second) {
                                Ok(parsed) => {
                                    return Ok(self.finish(now, horizon, parsed, second, cached));
                                }
                                Err(e) => {
                                    raw_reply = second;
                                    failure = GenFollowerError::Unparseable(e);
                                }
                            },
                            Err(e) => failure = GenFollowerError::BackendUnavailable(e),
                        }
                    }
                }
            }
            Err(e) => failure = GenFollowerError::BackendUnavailable(e),
        }

        let Some(idm) = self.config.fallback else {
            return Err(failure);
        };
        let accel_limits = AccelLimits {
            b_emergency: self.config.limits.b_max_f,
            a_max_global: self.config.limits.a_max_f,
        };
        let speed = physics_predict(&ModelParams::Idm(idm), history, horizon, &accel_limits)
            .map_err(|e| GenFollowerError::Fallback(e.to_string()))?;
        let filtered = safety_filter(speed, now.fv_speed, horizon, &self.config.limits);
        let outcome = PredictionOutcome {
            speed: filtered.speed,
            explanation: format!(
                "IDM fallback after an unusable model reply ({failure})"
            ),
            raw_reply,
            parse_method: None,
            filtered: true,
            filter_reason: Some("llm fallback".into()),
            from_cache,
        };
        self.outcomes.push((now.t, outcome.clone()));
        Ok(outcome)
    }

    fn finish(
        &mut self,
        now: StepState,
        horizon: f64,
        parsed: super::parse::ParsedReply,
        raw_reply: String,
        from_cache: bool,
    ) -> PredictionOutcome {
        let f = safety_filter(parsed.speed, now.fv_speed, horizon, &self.config.limits);
        let outcome = PredictionOutcome {
            speed: f.speed,
            explanation: parsed.explanation,
            raw_reply,
            parse_method: Some(parsed.method),
            filtered: f.filtered,
            filter_reason: f.reason,
            from_cache,
        };
        self.outcomes.push((now.t, outcome.clone()));
        outcome
    }
}

impl Predictor for GenFollower {
    fn name(&self) -> &str {
        "genfollower"
    }

    fn requires_warmup(&self) -> f64 {
        self.config.task.history_window
    }

    fn predict(&mut self, history: &[StepState], horizon: f64) -> Result<f64, PredictError> {
        self.predict_outcome(history, horizon)
            .map(|o| o.speed)
            .map_err(|e| PredictError::new(e.to_string()))
    }
}
