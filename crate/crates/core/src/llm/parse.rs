//! Extract the predicted speed and its explanation from a model reply.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Replies below this are treated as garbage rather than clamped.
pub const MIN_ACCEPTED_SPEED: f64 = -60.0;
pub const MAX_ACCEPTED_SPEED: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    Structured,
    RegexFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReply {
    pub speed: f64,
    pub explanation: String,
    pub method: ParseMethod,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no usable speed in reply: {0}")]
    UnparseableReply(String),
}

static STRUCTURED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?im)(?:^|[.!?;]\s+)[\s>*#_`-]*predicted[\s_]+speed[\s*_`]*(?:\([^)]*\))?[\s*_`]*[:=][\s*_`]*(-?\d+(?:\.\d+)?)\s*(?:m/s|mps|meters? per second|m s-1)?",
    )
    .unwrap()
});

static EXPLANATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)(?:^|[.!?;]\s+)[\s>*#_`-]*explanation[\s*_`]*[:=][\s*_`]*").unwrap());

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(-?\d+(?:\.\d+)?)(\s*(?:m/s|mps|meters? per second|metres? per second|m s-1|m·s⁻¹))?")
        .unwrap()
});

/// Words that, shortly before a number, suggest it is the predicted speed.
const PREDICTION_CUES: [&str; 10] = [
    "predict", "speed", "will", "should", "travel", "target", "answer", "around", "about", "final",
];

/// Words that, shortly before a number, suggest it is an input quantity.
const CONTEXT_CUES: [&str; 7] = [
    "lead vehicle", "leader", "lv", "spacing", "distance", "gap", "currently",
];

/// Parse a reply: first the `Predicted speed: <n> m/s` / `Explanation:`
/// contract, then a scan for the number most likely to be the answer.
pub fn parse_response(raw: &str) -> Result<ParsedReply, ParseError> {
    if let Some(found) = parse_structured(raw) {
        return Ok(found);
    }
    parse_fallback(raw)
}

fn accept(speed: f64) -> bool {
    speed.is_finite() && (MIN_ACCEPTED_SPEED..=MAX_ACCEPTED_SPEED).contains(&speed)
}

fn parse_structured(raw: &str) -> Option<ParsedReply> {
    // the last occurrence wins: chain-of-thought text may restate the format
    let caps = STRUCTURED.captures_iter(raw).last()?;
    let speed: f64 = caps[1].parse().ok()?;
    if !accept(speed) {
        return None;
    }
    let end = caps.get(0).unwrap().end();
    let explanation = EXPLANATION
        .find_iter(raw)
        .filter(|m| m.start() >= caps.get(0).unwrap().start())
        .last()
        .or_else(|| EXPLANATION.find_iter(raw).last())
        .map(|m| clean(&raw[m.end()..]))
        .filter(|e| !e.is_empty())
        .unwrap_or_else(|| {
            let after = clean(&raw[end..]);
            if after.is_empty() {
                clean(raw)
            } else {
                after
            }
        });
    Some(ParsedReply {
        speed,
        explanation,
        method: ParseMethod::Structured,
    })
}

fn parse_fallback(raw: &str) -> Result<ParsedReply, ParseError> {
    let lower = raw.to_lowercase();
    let mut best: Option<(i32, usize, f64, usize)> = None;
    for caps in NUMBER.captures_iter(raw) {
        let m = caps.get(0).unwrap();
        let Ok(value) = caps[1].parse::<f64>() else {
            continue;
        };
        if !accept(value) {
            continue;
        }
        // skip digits glued to letters, e.g. "GPT4" or "step2"
        if raw[..m.start()].chars().next_back().is_some_and(|c| c.is_alphanumeric()) {
            continue;
        }
        let unit = caps.get(2).is_some();
        let before_start = floor_char_boundary(&lower, m.start().saturating_sub(40));
        let before = &lower[before_start..m.start()];
        let mut score = 0;
        if unit {
            score += 4;
        }
        if PREDICTION_CUES.iter().any(|c| before.contains(c)) {
            score += 2;
        }
        let near_start = floor_char_boundary(&lower, m.start().saturating_sub(20));
        if CONTEXT_CUES.iter().any(|c| lower[near_start..m.start()].contains(c)) {
            score -= 3;
        }
        if !unit && !PREDICTION_CUES.iter().any(|c| before.contains(c)) {
            continue;
        }
        // highest score wins; ties go to the earliest mention
        if best.is_none_or(|(s, ..)| score > s) {
            best = Some((score, m.start(), value, m.end()));
        }
    }
    let Some((_, _, speed, end)) = best else {
        return Err(ParseError::UnparseableReply(truncate(raw, 80)));
    };
    let trailing = clean(&raw[end..]);
    let explanation = if trailing.len() >= 3 { trailing } else { clean(raw) };
    Ok(ParsedReply {
        speed,
        explanation,
        method: ParseMethod::RegexFallback,
    })
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn clean(s: &str) -> String {
    s.trim()
        .trim_start_matches([',', '.', ';', ':', ')'])
        .trim()
        .trim_matches('`')
        .trim()
        .to_string()
}

fn truncate(s: &str, n: usize) -> String {
    let mut out: String = s.chars().take(n).collect();
    if s.chars().count() > n {
        out.push('…');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_reply() {
        let r = parse_response("Predicted speed: 4.20 m/s\nExplanation: closing slowly, ease off.").unwrap();
        assert_eq!(r.speed, 4.2);
        assert_eq!(r.explanation, "closing slowly, ease off.");
        assert_eq!(r.method, ParseMethod::Structured);
    }

    #[test]
    fn structured_after_reasoning() {
        let raw = "Step 1: the leader slows from 6 m/s to 5 m/s.\nStep 2: spacing shrinks.\n\
**Predicted speed:** 3.75 m/s\n**Explanation:** the gap is shrinking so the follower brakes.";
        let r = parse_response(raw).unwrap();
        assert_eq!(r.speed, 3.75);
        assert_eq!(r.explanation, "the gap is shrinking so the follower brakes.");
    }

    #[test]
    fn structured_inline_after_sentence() {
        let r = parse_response(
            "The lead vehicle travels at 9 m/s. Predicted speed: 9.40 m/s. Explanation: close the gap.",
        )
        .unwrap();
        assert_eq!(r.speed, 9.4);
        assert_eq!(r.method, ParseMethod::Structured);
        assert_eq!(r.explanation, "close the gap.");
    }

    #[test]
    fn fallback_reply() {
        let r = parse_response(
            "I think the following vehicle will travel at about 3.9 m/s because the gap is steady.",
        )
        .unwrap();
        assert_eq!(r.speed, 3.9);
        assert_eq!(r.method, ParseMethod::RegexFallback);
        assert_eq!(r.explanation, "because the gap is steady.");
    }

    #[test]
    fn fallback_prefers_prediction_over_context() {
        let r = parse_response(
            "The lead vehicle is at 5 m/s and the spacing is 10 m, so the follower should go 4.4 m/s next.",
        )
        .unwrap();
        assert_eq!(r.speed, 4.4);
    }

    #[test]
    fn unparseable() {
        assert!(matches!(
            parse_response("I cannot determine the speed."),
            Err(ParseError::UnparseableReply(_))
        ));
        assert!(parse_response("Predicted speed: NaN m/s").is_err());
        assert!(parse_response("").is_err());
    }

    #[test]
    fn negative_within_range_is_kept_for_the_filter() {
        let r = parse_response("Predicted speed: -1.0 m/s\nExplanation: stop").unwrap();
        assert_eq!(r.speed, -1.0);
        assert!(parse_response("Predicted speed: -500 m/s").is_err());
    }
}
