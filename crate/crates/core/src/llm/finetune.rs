//! Chat fine-tuning dataset built from recorded events.
//!
//! Each example pairs the system message and a user message rendered from the
//! recorded history with an assistant answer whose speed is the recorded
//! follower speed `horizon` seconds later.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{slice_history, CarFollowingEvent, StepState};

use super::backend::{ChatMessage, Role};
use super::prompt::{build_system_message, build_user_message, fmt_num, PromptError, TaskConfig};

pub const DEFAULT_INSTANCES: usize = 50;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLine {
    pub messages: Vec<ChatMessage>,
}

/// An exported example together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    pub event_id: String,
    /// Time of the last history sample, on the event clock.
    pub t: f64,
    pub target_speed: f64,
    pub line: FinetuneLine,
}

/// Assistant answer in the structured reply format.
pub fn assistant_answer(now: &StepState, future: &StepState, horizon: f64) -> String {
    let change = future.fv_speed - now.fv_speed;
    let action = if change > 0.05 {
        "speeds up"
    } else if change < -0.05 {
        "slows down"
    } else {
        "holds its speed"
    };
    format!(
        "Predicted speed: {:.2} m/s\nExplanation: With a gap of {} m and a relative speed of {} m/s \
to a lead vehicle at {} m/s, the following vehicle {action} from {} m/s to {} m/s over the next {} s.",
        future.fv_speed,
        fmt_num(now.spacing),
        fmt_num(now.rel_speed),
        fmt_num(now.lv_speed),
        fmt_num(now.fv_speed),
        fmt_num(future.fv_speed),
        fmt_num(horizon)
    )
}

/// Every `(event index, step index)` with a full history window behind it and
/// a recorded sample `horizon` seconds ahead.
pub fn prediction_points(events: &[CarFollowingEvent], task: &TaskConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ev) in events.iter().enumerate() {
        let dt = ev.dt();
        let first = (task.history_window / dt).round() as usize;
        let ahead = (task.horizon / dt).round() as usize;
        if ahead == 0 {
            continue;
        }
        for k in first..ev.len().saturating_sub(ahead) {
            out.push((e, k));
        }
    }
    out
}

/// Draw `n` distinct prediction points with a seeded generator and build
/// one example for each, in event/time order.
pub fn build_finetune_examples(
    events: &[CarFollowingEvent],
    n: usize,
    seed: u64,
    task: &TaskConfig,
) -> Result<Vec<FinetuneExample>, FinetuneError> {
    if n == 0 {
        return Err(FinetuneError::InsufficientData("n_instances must be at least 1".into()));
    }
    let points = prediction_points(events, task);
    if points.len() < n {
        return Err(FinetuneError::InsufficientData(format!(
            "{n} instances requested, only {} prediction points available",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = sample(&mut rng, points.len(), n)
        .into_iter()
        .map(|i| points[i])
        .collect();
    chosen.sort_unstable();

    let system = build_system_message(task);
    chosen
        .into_iter()
        .map(|(e, k)| {
            let ev = &events[e];
            let steps = ev.steps();
            let now = steps[k];
            let ahead = (task.horizon / ev.dt()).round() as usize;
            let future = steps[k + ahead];
            let history = slice_history(ev, now.t, task.history_window)
                .map_err(|err| FinetuneError::InsufficientData(err.to_string()))?;
            let user = build_user_message(history, ev.dt(), task)?;
            Ok(FinetuneExample {
                event_id: ev.event_id().to_string(),
                t: now.t,
                target_speed: future.fv_speed,
                line: FinetuneLine {
                    messages: vec![
                        ChatMessage::system(system.clone()),
                        ChatMessage::user(user),
                        ChatMessage::assistant(assistant_answer(&now, &future, task.horizon)),
                    ],
                },
            })
        })
        .collect()
}

/// Write examples as JSONL, one chat example per line.
pub fn export_finetune_dataset(
    events: &[CarFollowingEvent],
    n_instances: usize,
    seed: u64,
    task: &TaskConfig,
    out_path: &Path,
) -> Result<Vec<FinetuneExample>, FinetuneError> {
    let examples = build_finetune_examples(events, n_instances, seed, task)?;
    let io_err = |source| FinetuneError::Io {
        path: out_path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(out_path).map_err(io_err)?);
    for ex in &examples {
        let line = serde_json::to_string(&ex.line).expect("chat example serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(examples)
}

/// Check the role sequence of a parsed line.
pub fn is_chat_example(line: &FinetuneLine) -> bool {
    let roles: Vec<Role> = line.messages.iter().map(|m| m.role).collect();
    roles == [Role::System, Role::User, Role::Assistant]
        && line.messages.iter().all(|m| !m.content.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{IdmParams, ModelParams};
    use crate::events::{synth_events, LeaderProfile};
    use crate::llm::parse::parse_response;

    fn events(n: usize) -> Vec<CarFollowingEvent> {
        synth_events(
            &LeaderProfile::StopAndGo {
                cruise: 9.0,
                decel: 2.0,
                accel: 1.0,
                stop_time: 2.0,
            },
            &ModelParams::Idm(IdmParams::default()),
            n,
            21,
        )
        .unwrap()
    }

    #[test]
    fn exports_fifty_lines() {
        let evs = events(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ft.jsonl");
        let task = TaskConfig::default();
        let examples = export_finetune_dataset(&evs, DEFAULT_INSTANCES, 3, &task, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 50);
        for (line, ex) in lines.iter().zip(&examples) {
            let parsed: FinetuneLine = serde_json::from_str(line).unwrap();
            assert!(is_chat_example(&parsed));
            let ev = evs.iter().find(|e| e.event_id() == ex.event_id).unwrap();
            let k = ev.index_at(ex.t).unwrap();
            let recorded = ev.steps()[k + 5].fv_speed;
            let speed = parse_response(&parsed.messages[2].content).unwrap().speed;
            assert_eq!(format!("{speed:.2}"), format!("{recorded:.2}"));
            // the user message re-renders identically from the source event
            let h = slice_history(ev, ex.t, 4.0).unwrap();
            assert_eq!(parsed.messages[1].content, build_user_message(h, ev.dt(), &task).unwrap());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let evs = events(3);
        let task = TaskConfig::default();
        let a = build_finetune_examples(&evs, 20, 1, &task).unwrap();
        let b = build_finetune_examples(&evs, 20, 1, &task).unwrap();
        let c = build_finetune_examples(&evs, 20, 2, &task).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // distinct points
        let mut keys: Vec<(String, i64)> = a.iter().map(|e| (e.event_id.clone(), (e.t * 10.0).round() as i64)).collect();
        keys.dedup();
        assert_eq!(keys.len(), 20);
    }

    #[test]
    fn rejects_zero_and_too_many() {
        let evs = events(1);
        let task = TaskConfig::default();
        assert!(matches!(
            build_finetune_examples(&evs, 0, 1, &task),
            Err(FinetuneError::InsufficientData(_))
        ));
        // one 15 s event has 106 points: t = 4.0 ..= 14.5
        assert_eq!(prediction_points(&evs, &task).len(), 106);
        assert!(matches!(
            build_finetune_examples(&evs, 107, 1, &task),
            Err(FinetuneError::InsufficientData(_))
        ));
    }
}
