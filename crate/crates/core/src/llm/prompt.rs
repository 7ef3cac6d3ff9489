//! System and user message templates.
//!
//! The user message embeds a delimiter-framed history table that the mock
//! backend and the tests read back, so the layout here is a contract:
//! `### <Name> ###` headers, each followed by a triple-backtick block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{StepState, GRID_TOL};

/// Bumped whenever the wording of either template changes.
pub const TEMPLATE_VERSION: &str = "v1";

pub const HISTORY_HEADER: &str = "### History ###";
pub const STATE_HEADER: &str = "### Current state ###";
pub const RULE_HEADER: &str = "### Spacing update rule ###";
pub const TASK_HEADER: &str = "### Task ###";
pub const FENCE: &str = "```";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("history spans {span:.2} s, {required:.2} s required")]
    ShortHistory { span: f64, required: f64 },
    #[error("invalid sampling interval {0}")]
    InvalidDt(f64),
}

/// Settings shared by every prompt of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Seconds of history shown to the model.
    pub history_window: f64,
    /// Seconds ahead the model predicts.
    pub horizon: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            history_window: 4.0,
            horizon: 0.5,
        }
    }
}

/// Round to 2 decimals and drop trailing zeros: `5.0 -> "5"`, `4.2 -> "4.2"`.
pub fn fmt_num(x: f64) -> String {
    let s = format!("{:.2}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    match s {
        "-0" | "" => "0".to_string(),
        _ => s.to_string(),
    }
}

/// The fixed instructions sent with every request.
pub fn build_system_message(task: &TaskConfig) -> String {
    let window = fmt_num(task.history_window);
    let horizon = fmt_num(task.horizon);
    format!(
        "You are a car-following speed predictor for an automated vehicle. You decide the \
speed of the following vehicle (FV), which drives directly behind a lead vehicle (LV) in the \
same lane.

Input: the user gives you the car-following states of the past {window} seconds: the spacing \
between the two vehicles in meters, the LV speed in m/s, the FV speed in m/s and the relative \
speed in m/s (LV speed minus FV speed; negative means the FV is closing in). The current state \
is also described in one sentence.

Task: predict the FV speed {horizon} seconds after the last sample.

Safety: safety is the top priority during car-following. Keep a safe gap to the LV at every \
moment, and accept a less smooth ride whenever that is what keeping the gap requires. Extreme \
car-following situations, such as very small following distances or closing in fast on the LV, \
must be avoided: in those cases slow down early. Never predict a negative speed.

Delimiters: distinct parts of the input are marked with a header line of the form ### Name ### \
followed by a block fenced with triple backticks. Only use the data inside the blocks.

Output format: reason step by step first, then finish with exactly these two lines:
Predicted speed: <number> m/s
Explanation: <one short paragraph explaining the predicted speed>
"
    )
}

/// One-sentence description of a state, numbers rounded to 2 decimals.
pub fn describe_state(s: &StepState) -> String {
    format!(
        "The lead vehicle is traveling at {} m/s, the following vehicle is traveling at {} m/s, \
the distance between them is {} meters, and the relative speed is {} m/s.",
        fmt_num(s.lv_speed),
        fmt_num(s.fv_speed),
        fmt_num(s.spacing),
        fmt_num(s.rel_speed)
    )
}

/// Number of samples covering `window` seconds at `dt`, inclusive.
pub fn window_len(window: f64, dt: f64) -> usize {
    (window / dt).round() as usize + 1
}

/// The per-call message: current state, history table, update rule, and a
/// step-by-step instruction ending with the output format reminder.
///
/// Only the last `history_window` seconds of `history` are rendered.
pub fn build_user_message(
    history: &[StepState],
    dt: f64,
    task: &TaskConfig,
) -> Result<String, PromptError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PromptError::InvalidDt(dt));
    }
    let span = match history {
        [first, .., last] => last.t - first.t,
        _ => 0.0,
    };
    if span + GRID_TOL < task.history_window {
        return Err(PromptError::ShortHistory {
            span,
            required: task.history_window,
        });
    }
    let n = window_len(task.history_window, dt).min(history.len());
    let window = &history[history.len() - n..];
    let now = window[window.len() - 1];
    let horizon = fmt_num(task.horizon);

    let mut msg = String::new();
    msg.push_str(STATE_HEADER);
    msg.push('\n');
    msg.push_str(FENCE);
    msg.push('\n');
    msg.push_str(&describe_state(&now));
    msg.push('\n');
    msg.push_str(FENCE);
    msg.push_str("\n\n");

    msg.push_str(HISTORY_HEADER);
    msg.push('\n');
    msg.push_str(&format!(
        "Sampling interval: {} s. Prediction horizon: {horizon} s. Columns: time relative to now (s), \
spacing (m), LV speed (m/s), FV speed (m/s), relative speed (m/s).\n",
        fmt_num(dt)
    ));
    msg.push_str(FENCE);
    msg.push('\n');
    for s in window {
        msg.push_str(&format!(
            "{:.2}, {:.2}, {:.2}, {:.2}, {:.2}\n",
            s.t - now.t + 0.0,
            s.spacing,
            s.lv_speed,
            s.fv_speed,
            s.rel_speed
        ));
    }
    msg.push_str(FENCE);
    msg.push_str("\n\n");

    msg.push_str(RULE_HEADER);
    msg.push('\n');
    msg.push_str(FENCE);
    msg.push('\n');
    msg.push_str(
        "The spacing evolves by the trapezoid of relative speeds: over one sampling interval dT, \
S(t+1) = S(t) + (dV(t) + dV(t+1)) / 2 * dT, where dV = LV speed - FV speed. A FV speed above the \
LV speed shrinks the spacing.\n",
    );
    msg.push_str(FENCE);
    msg.push_str("\n\n");

    msg.push_str(TASK_HEADER);
    msg.push('\n');
    msg.push_str(FENCE);
    msg.push('\n');
    msg.push_str(&format!(
        "Predict the FV speed {horizon} s after the last sample. Let's think step by step:\n\
1. Describe how the LV speed has changed over the history.\n\
2. Describe how the spacing and the relative speed have changed.\n\
3. Decide whether the FV should speed up, hold its speed or slow down.\n\
4. Use the update rule to check that the spacing stays safe after {horizon} s.\n\
Then finish with exactly these two lines:\n\
Predicted speed: <number> m/s\n\
Explanation: <one short paragraph>\n"
    ));
    msg.push_str(FENCE);
    msg.push('\n');
    Ok(msg)
}

/// A history table read back from a user message.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHistory {
    pub dt: f64,
    pub horizon: f64,
    /// `t` is relative to the last row (0 at the current state).
    pub rows: Vec<StepState>,
}

/// Parse the history block of a message produced by [`build_user_message`].
pub fn parse_history_block(message: &str) -> Option<RenderedHistory> {
    let start = message.find(HISTORY_HEADER)? + HISTORY_HEADER.len();
    let rest = &message[start..];
    let meta_end = rest.find(FENCE)?;
    let meta = &rest[..meta_end];
    let dt = number_after(meta, "Sampling interval:")?;
    let horizon = number_after(meta, "Prediction horizon:")?;
    let body_start = meta_end + FENCE.len();
    let body_len = rest[body_start..].find(FENCE)?;
    let body = &rest[body_start..body_start + body_len];
    let rows = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .ok()?;
            (v.len() == 5).then(|| StepState {
                t: v[0],
                spacing: v[1],
                lv_speed: v[2],
                fv_speed: v[3],
                rel_speed: v[4],
            })
        })
        .collect::<Option<Vec<_>>>()?;
    (!rows.is_empty()).then_some(RenderedHistory { dt, horizon, rows })
}

fn number_after(text: &str, key: &str) -> Option<f64> {
    let at = text.find(key)? + key.len();
    text[at..]
        .split_whitespace()
        .next()?
        .trim_end_matches(['s', '.', ','])
        .parse()
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(n: usize, dt: f64) -> Vec<StepState> {
        (0..n)
            .map(|i| StepState::new(i as f64 * dt, 10.0 + 0.01 * i as f64, 5.0, 4.0))
            .collect()
    }

    #[test]
    fn fmt_num_trims() {
        assert_eq!(fmt_num(5.0), "5");
        assert_eq!(fmt_num(4.2), "4.2");
        assert_eq!(fmt_num(4.256), "4.26");
        assert_eq!(fmt_num(-0.001), "0");
        assert_eq!(fmt_num(-1.5), "-1.5");
        assert_eq!(fmt_num(10.0), "10");
        assert_eq!(fmt_num(0.5), "0.5");
    }

    #[test]
    fn system_message_contract() {
        let task = TaskConfig::default();
        let s = build_system_message(&task);
        assert!(s.contains("safety is the top priority"));
        assert!(s.contains("0.5 seconds"));
        assert!(s.contains("past 4 seconds"));
        assert!(s.contains("Predicted speed: <number> m/s"));
        assert!(s.contains("Explanation:"));
        assert!(s.contains("very small following distances"));
        assert!(s.contains("triple backticks"));
        assert_eq!(s, build_system_message(&task));
        let other = build_system_message(&TaskConfig {
            horizon: 1.0,
            ..task
        });
        assert!(other.contains("1 seconds after"));
    }

    #[test]
    fn example_state_sentence() {
        let s = StepState::new(4.0, 10.0, 5.0, 4.0);
        assert_eq!(
            describe_state(&s),
            "The lead vehicle is traveling at 5 m/s, the following vehicle is traveling at 4 m/s, \
the distance between them is 10 meters, and the relative speed is 1 m/s."
        );
    }

    #[test]
    fn user_message_has_41_rows() {
        let h = history(41, 0.1);
        let msg = build_user_message(&h, 0.1, &TaskConfig::default()).unwrap();
        let parsed = parse_history_block(&msg).unwrap();
        assert_eq!(parsed.rows.len(), 41);
        assert_eq!(parsed.dt, 0.1);
        assert_eq!(parsed.horizon, 0.5);
        assert_eq!(parsed.rows[0].t, -4.0);
        assert_eq!(parsed.rows[40].t, 0.0);
        assert!(msg.contains("step by step"));
        assert!(msg.contains("trapezoid of relative speeds"));
        assert!(msg.trim_end().ends_with(FENCE));
        let reminder = msg.rfind("Predicted speed: <number> m/s").unwrap();
        assert!(reminder > msg.find("step by step").unwrap());
    }

    #[test]
    fn longer_history_is_windowed() {
        let h = history(120, 0.1);
        let msg = build_user_message(&h, 0.1, &TaskConfig::default()).unwrap();
        let parsed = parse_history_block(&msg).unwrap();
        assert_eq!(parsed.rows.len(), 41);
        assert_eq!(parsed.rows[40].spacing, 11.19);
    }

    #[test]
    fn short_history_rejected() {
        let h = history(21, 0.1);
        assert!(matches!(
            build_user_message(&h, 0.1, &TaskConfig::default()),
            Err(PromptError::ShortHistory { .. })
        ));
    }
}
