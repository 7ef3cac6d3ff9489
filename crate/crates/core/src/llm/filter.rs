//! Post-processing clamp on predicted speeds.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyLimits {
    /// Largest acceleration a prediction may imply, m/s².
    pub a_max_f: f64,
    /// Largest deceleration magnitude a prediction may imply, m/s².
    pub b_max_f: f64,
    /// Absolute speed cap, m/s.
    pub v_cap: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            a_max_f: 5.0,
            b_max_f: 8.0,
            v_cap: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub speed: f64,
    pub filtered: bool,
    pub reason: Option<String>,
}

/// Admissible speed range after `horizon` seconds starting from `v_now`.
pub fn speed_bracket(v_now: f64, horizon: f64, limits: &SafetyLimits) -> (f64, f64) {
    let hi = limits.v_cap.min(v_now + limits.a_max_f * horizon).max(0.0);
    let lo = (v_now - limits.b_max_f * horizon).max(0.0).min(hi);
    (lo, hi)
}

/// Clamp `predicted` into the bracket reachable from `v_now` within the
/// acceleration and deceleration limits, never below zero or above `v_cap`.
pub fn safety_filter(
    predicted: f64,
    v_now: f64,
    horizon: f64,
    limits: &SafetyLimits,
) -> FilterOutcome {
    let (lo, hi) = speed_bracket(v_now, horizon, limits);
    let (speed, reason) = if predicted.is_nan() {
        (v_now.clamp(lo, hi), Some("non-finite speed"))
    } else if predicted < lo {
        if predicted < 0.0 && lo == 0.0 {
            (lo, Some("non-negative speed"))
        } else {
            (lo, Some("deceleration cap"))
        }
    } else if predicted > hi {
        if hi == limits.v_cap {
            (hi, Some("speed cap"))
        } else {
            (hi, Some("acceleration cap"))
        }
    } else {
        (predicted, None)
    };
    FilterOutcome {
        speed,
        filtered: reason.is_some(),
        reason: reason.map(str::to_string),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let l = SafetyLimits::default();
        assert_eq!(speed_bracket(4.0, 0.5, &l), (0.0, 6.5));
        let r = safety_filter(4.2, 4.0, 0.5, &l);
        assert_eq!((r.speed, r.filtered, r.reason), (4.2, false, None));

        let r = safety_filter(-1.0, 0.3, 0.5, &l);
        assert_eq!(r.speed, 0.0);
        assert!(r.filtered);
        assert_eq!(r.reason.as_deref(), Some("non-negative speed"));

        let r = safety_filter(30.0, 4.0, 0.5, &l);
        assert_eq!(r.speed, 6.5);
        assert_eq!(r.reason.as_deref(), Some("acceleration cap"));

        let r = safety_filter(2.0, 20.0, 0.5, &l);
        assert_eq!(r.speed, 16.0);
        assert_eq!(r.reason.as_deref(), Some("deceleration cap"));

        let r = safety_filter(70.0, 59.0, 0.5, &l);
        assert_eq!(r.speed, 60.0);
        assert_eq!(r.reason.as_deref(), Some("speed cap"));

        let r = safety_filter(f64::NAN, 3.0, 0.5, &l);
        assert_eq!(r.speed, 3.0);
        assert!(r.filtered);
    }

    proptest! {
        #[test]
        fn idempotent_and_bracketed(
            p in -100.0..100.0f64, v in 0.0..80.0f64, h in 0.01..2.0f64,
            a in 0.1..10.0f64, b in 0.1..10.0f64, cap in 1.0..80.0f64,
        ) {
            let l = SafetyLimits { a_max_f: a, b_max_f: b, v_cap: cap };
            let (lo, hi) = speed_bracket(v, h, &l);
            let once = safety_filter(p, v, h, &l);
            prop_assert!(once.speed >= lo && once.speed <= hi);
            prop_assert!(once.speed >= 0.0 && once.speed <= cap);
            let twice = safety_filter(once.speed, v, h, &l);
            prop_assert_eq!(twice.speed, once.speed);
            prop_assert!(!twice.filtered);
        }
    }
}
