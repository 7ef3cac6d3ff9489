//! Spacing MSE, collision rate and time-to-collision, plus report assembly.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::CarFollowingEvent;
use crate::kinematics::SimulatedTrajectory;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("series length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no trajectories to score")]
    EmptyInput,
}

/// Mean over events of the per-event mean squared spacing error.
pub fn mse_spacing(observed: &[Vec<f64>], simulated: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if observed.len() != simulated.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} observed events vs {} simulated",
            observed.len(),
            simulated.len()
        )));
    }
    if observed.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut total = 0.0;
    for (i, (obs, sim)) in observed.iter().zip(simulated).enumerate() {
        total += event_mse(obs, sim).map_err(|e| match e {
            MetricsError::LengthMismatch(m) => MetricsError::LengthMismatch(format!("event {i}: {m}")),
            other => other,
        })?;
    }
    Ok(total / observed.len() as f64)
}

/// Mean squared error of one aligned pair of spacing series.
pub fn event_mse(observed: &[f64], simulated: &[f64]) -> Result<f64, MetricsError> {
    if observed.len() != simulated.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} observed samples vs {} simulated",
            observed.len(),
            simulated.len()
        )));
    }
    if observed.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = observed
        .iter()
        .zip(simulated)
        .map(|(y, y_hat)| (y - y_hat).powi(2))
        .sum();
    Ok(sum / observed.len() as f64)
}

/// Percentage of trajectories whose simulated spacing ever went negative.
pub fn collision_rate(trajectories: &[SimulatedTrajectory]) -> Result<f64, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let collided = trajectories.iter().filter(|t| t.collided).count();
    Ok(100.0 * collided as f64 / trajectories.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TtcSample {
    pub t: f64,
    /// Seconds, or `+inf` when the follower is not closing in.
    pub ttc: f64,
}

/// Time to collision `-S / dV` at each post-warmup step before any collision.
pub fn ttc_series(trajectory: &SimulatedTrajectory) -> Vec<TtcSample> {
    trajectory
        .eval_steps()
        .iter()
        .take_while(|s| s.spacing_sim > 0.0)
        .map(|s| TtcSample {
            t: s.t,
            ttc: ttc(s.spacing_sim, s.lv_speed - s.fv_speed_sim),
        })
        .collect()
}

/// `-spacing / rel_speed` when closing (`rel_speed < 0`), else `+inf`.
pub fn ttc(spacing: f64, rel_speed: f64) -> f64 {
    if rel_speed < 0.0 {
        -spacing / rel_speed
    } else {
        f64::INFINITY
    }
}

/// Smallest finite TTC of a trajectory, if it ever closes in.
pub fn min_ttc(trajectory: &SimulatedTrajectory) -> Option<f64> {
    ttc_series(trajectory)
        .into_iter()
        .map(|s| s.ttc)
        .filter(|v| v.is_finite())
        .min_by(f64::total_cmp)
}

/// How per-event minimum TTCs are combined into one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtcAggregation {
    #[default]
    Mean,
    Median,
    GlobalMin,
}

impl FromStr for TtcAggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            "global-min" => Ok(Self::GlobalMin),
            other => Err(format!(
                "unknown TTC aggregation `{other}` (expected mean, median or global-min)"
            )),
        }
    }
}

impl fmt::Display for TtcAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Median => "median",
            Self::GlobalMin => "global-min",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtcAggregate {
    /// `+inf` when no event ever closes in.
    pub value: f64,
    /// Events without any finite TTC; they do not contribute to `value`.
    pub n_no_closing: usize,
}

/// Aggregate per-event minimum TTCs.
pub fn min_ttc_aggregate(
    trajectories: &[SimulatedTrajectory],
    agg: TtcAggregation,
) -> Result<TtcAggregate, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let minima: Vec<Option<f64>> = trajectories.iter().map(min_ttc).collect();
    Ok(aggregate_minima(&minima, agg))
}

fn aggregate_minima(minima: &[Option<f64>], agg: TtcAggregation) -> TtcAggregate {
    let mut finite: Vec<f64> = minima.iter().flatten().copied().collect();
    let n_no_closing = minima.len() - finite.len();
    let value = if finite.is_empty() {
        f64::INFINITY
    } else {
        match agg {
            TtcAggregation::Mean => finite.iter().sum::<f64>() / finite.len() as f64,
            TtcAggregation::Median => {
                finite.sort_by(f64::total_cmp);
                let mid = finite.len() / 2;
                if finite.len().is_multiple_of(2) {
                    (finite[mid - 1] + finite[mid]) / 2.0
                } else {
                    finite[mid]
                }
            }
            TtcAggregation::GlobalMin => finite.iter().copied().fold(f64::INFINITY, f64::min),
        }
    };
    TtcAggregate {
        value,
        n_no_closing,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event_id: String,
    pub mse: f64,
    pub collided: bool,
    /// `None` when the follower never closes in on the leader.
    pub min_ttc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEvent {
    pub event_id: String,
    pub error: String,
}

/// Scores of one model over a set of events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub n_events: usize,
    pub mse_spacing: f64,
    pub collision_rate: f64,
    /// `None` when no event has a finite TTC.
    pub min_ttc_aggregate: Option<f64>,
    pub ttc_aggregation: TtcAggregation,
    pub n_no_closing: usize,
    pub n_failed: usize,
    pub failures: Vec<FailedEvent>,
    pub per_event: Vec<EventScore>,
}

/// Build a report from paired recorded events and trajectories (same order).
pub fn evaluate(
    model_name: &str,
    events: &[&CarFollowingEvent],
    trajectories: &[SimulatedTrajectory],
    agg: TtcAggregation,
) -> Result<EvalReport, MetricsError> {
    if events.len() != trajectories.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} events vs {} trajectories",
            events.len(),
            trajectories.len()
        )));
    }
    if trajectories.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut observed = Vec::with_capacity(events.len());
    let mut simulated = Vec::with_capacity(events.len());
    let mut per_event = Vec::with_capacity(events.len());
    for (ev, traj) in events.iter().zip(trajectories) {
        let start = traj.eval_start();
        let obs: Vec<f64> = ev.steps()[start..].iter().map(|s| s.spacing).collect();
        let sim = traj.eval_spacing();
        let mse = event_mse(&obs, &sim)?;
        per_event.push(EventScore {
            event_id: traj.event_id.clone(),
            mse,
            collided: traj.collided,
            min_ttc: min_ttc(traj),
        });
        observed.push(obs);
        simulated.push(sim);
    }
    let ttc = min_ttc_aggregate(trajectories, agg)?;
    Ok(EvalReport {
        model_name: model_name.to_string(),
        n_events: trajectories.len(),
        mse_spacing: mse_spacing(&observed, &simulated)?,
        collision_rate: collision_rate(trajectories)?,
        min_ttc_aggregate: ttc.value.is_finite().then_some(ttc.value),
        ttc_aggregation: agg,
        n_no_closing: ttc.n_no_closing,
        n_failed: 0,
        failures: Vec::new(),
        per_event,
    })
}

impl EvalReport {
    /// Report for a model that failed on every event.
    pub fn all_failed(model_name: &str, agg: TtcAggregation, failures: Vec<FailedEvent>) -> Self {
        Self {
            model_name: model_name.to_string(),
            n_events: 0,
            mse_spacing: f64::NAN,
            collision_rate: f64::NAN,
            min_ttc_aggregate: None,
            ttc_aggregation: agg,
            n_no_closing: 0,
            n_failed: failures.len(),
            failures,
            per_event: Vec::new(),
        }
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "n/a".to_string()
    } else {
        format!("{v:.2}")
    }
}

fn fmt_ttc(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".to_string(), |v| format!("{v:.2}"))
}

/// Aligned text table: Model | MSE of Spacing ↓ | Collision Rate % ↓ | Minimum TTC ↑.
pub fn render_table(reports: &[EvalReport]) -> String {
    let headers = [
        "Model".to_string(),
        "MSE of Spacing ↓".to_string(),
        "Collision Rate % ↓".to_string(),
        "Minimum TTC ↑".to_string(),
    ];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.model_name.clone(),
                fmt_metric(r.mse_spacing),
                fmt_metric(r.collision_rate),
                fmt_ttc(r.min_ttc_aggregate),
            ]
        })
        .collect();
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([headers[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..4).map(width).collect();
    let line = |cells: &[String; 4]| {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate() {
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(" | ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.push('\n');
        out
    };
    let mut table = line(&headers);
    let total: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
    table.push_str(&"-".repeat(total));
    table.push('\n');
    for r in &rows {
        table.push_str(&line(r));
    }
    let mut notes = Vec::new();
    for r in reports {
        if r.n_failed > 0 {
            notes.push(format!("{}: {} event(s) failed and were excluded", r.model_name, r.n_failed));
        }
        if r.n_no_closing > 0 {
            notes.push(format!(
                "{}: {} event(s) never closed in and carry no TTC",
                r.model_name, r.n_no_closing
            ));
        }
    }
    if let Some(r) = reports.first() {
        notes.push(format!("Minimum TTC aggregation: {}", r.ttc_aggregation));
    }
    for n in notes {
        table.push_str(&n);
        table.push('\n');
    }
    table
}

/// One summary row per model.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "n_events",
        "n_failed",
        "mse_spacing",
        "collision_rate",
        "min_ttc",
        "ttc_aggregation",
        "n_no_closing",
    ])?;
    for r in reports {
        w.write_record([
            r.model_name.clone(),
            r.n_events.to_string(),
            r.n_failed.to_string(),
            r.mse_spacing.to_string(),
            r.collision_rate.to_string(),
            r.min_ttc_aggregate.map_or_else(|| "inf".into(), |v| v.to_string()),
            r.ttc_aggregation.to_string(),
            r.n_no_closing.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::SimStep;
    use proptest::prelude::*;

    fn traj(id: &str, rows: &[(f64, f64, f64)]) -> SimulatedTrajectory {
        // rows: (spacing, lv, fv) on a 0.1 s grid, no warmup
        let sim_steps: Vec<SimStep> = rows
            .iter()
            .enumerate()
            .map(|(i, &(s, lv, fv))| SimStep {
                t: i as f64 * 0.1,
                spacing_sim: s,
                fv_speed_sim: fv,
                lv_speed: lv,
                rel_speed_sim: lv - fv,
            })
            .collect();
        let collision_t = sim_steps.iter().find(|s| s.spacing_sim < 0.0).map(|s| s.t);
        SimulatedTrajectory {
            event_id: id.into(),
            dt: 0.1,
            warmup_end: -1.0,
            sim_steps,
            collided: collision_t.is_some(),
            collision_t,
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_spacing(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_spacing(&[vec![10.0, 12.0]], &[vec![11.0, 10.0]]).unwrap(), 2.5);
        // per-event 2.5 and 0.5
        let obs = vec![vec![10.0, 12.0], vec![1.0, 1.0]];
        let sim = vec![vec![11.0, 10.0], vec![2.0, 1.0]];
        assert_eq!(mse_spacing(&obs, &sim).unwrap(), 1.5);
        assert!(matches!(
            mse_spacing(&[vec![1.0]], &[vec![1.0, 2.0]]),
            Err(MetricsError::LengthMismatch(_))
        ));
        assert!(matches!(
            mse_spacing(&[vec![1.0]], &[]),
            Err(MetricsError::LengthMismatch(_))
        ));
    }

    #[test]
    fn collision_rate_examples() {
        let safe = traj("s", &[(5.0, 1.0, 1.0)]);
        let hit = traj("h", &[(5.0, 1.0, 1.0), (-0.1, 0.0, 1.0)]);
        let none: Vec<_> = (0..100).map(|_| safe.clone()).collect();
        assert_eq!(collision_rate(&none).unwrap(), 0.0);
        let mut two = none.clone();
        two[3] = hit.clone();
        two[70] = hit.clone();
        assert_eq!(collision_rate(&two).unwrap(), 2.0);
        let four = vec![safe.clone(), hit, safe.clone(), safe];
        assert_eq!(collision_rate(&four).unwrap(), 25.0);
        assert_eq!(collision_rate(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn ttc_examples() {
        assert_eq!(ttc(20.0, 4.0 - 6.0), 10.0);
        assert_eq!(ttc(20.0, 0.0), f64::INFINITY);
        assert_eq!(ttc(5.0, 10.0 - 2.0), f64::INFINITY);
    }

    #[test]
    fn ttc_series_stops_at_collision() {
        let t = traj("c", &[(2.0, 0.0, 10.0), (1.0, 0.0, 10.0), (-0.5, 0.0, 10.0), (3.0, 0.0, 10.0)]);
        let series = ttc_series(&t);
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].ttc, 0.2);
        assert_eq!(series[1].ttc, 0.1);
    }

    #[test]
    fn ttc_aggregate_examples() {
        let a = traj("a", &[(20.0, 4.0, 6.0), (40.0, 4.0, 6.0)]);
        let b = traj("b", &[(60.0, 4.0, 6.0), (80.0, 4.0, 6.0)]);
        let agg = min_ttc_aggregate(&[a.clone(), b.clone()], TtcAggregation::Mean).unwrap();
        assert_eq!(agg.value, 20.0);
        assert_eq!(agg.n_no_closing, 0);

        let open = traj("o", &[(10.0, 5.0, 4.0)]);
        let agg = min_ttc_aggregate(std::slice::from_ref(&open), TtcAggregation::Mean).unwrap();
        assert_eq!(agg.value, f64::INFINITY);
        assert_eq!(agg.n_no_closing, 1);

        let single = traj("g", &[(143.0, 4.0, 6.0)]);
        let agg = min_ttc_aggregate(&[single], TtcAggregation::Mean).unwrap();
        assert_eq!(agg.value, 71.50);

        let agg = min_ttc_aggregate(&[a.clone(), b.clone(), open], TtcAggregation::GlobalMin).unwrap();
        assert_eq!((agg.value, agg.n_no_closing), (10.0, 1));
        let agg = min_ttc_aggregate(&[a, b], TtcAggregation::Median).unwrap();
        assert_eq!(agg.value, 20.0);
        assert_eq!(min_ttc_aggregate(&[], TtcAggregation::Mean), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn table_has_direction_markers() {
        let r = EvalReport {
            model_name: "IDM".into(),
            n_events: 1,
            mse_spacing: 37.25,
            collision_rate: 0.0,
            min_ttc_aggregate: Some(60.36),
            ttc_aggregation: TtcAggregation::Mean,
            n_no_closing: 0,
            n_failed: 0,
            failures: vec![],
            per_event: vec![],
        };
        let table = render_table(&[r]);
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        assert!(header.contains("MSE of Spacing ↓"));
        assert!(header.contains("Collision Rate % ↓"));
        assert!(header.contains("Minimum TTC ↑"));
        let row = lines.nth(1).unwrap();
        assert!(row.starts_with("IDM"));
        assert!(row.contains("37.25") && row.contains("0.00") && row.contains("60.36"));
        assert_eq!(header.chars().count(), row.chars().count());
    }

    proptest! {
        #[test]
        fn mse_symmetric_permutation_invariant(
            data in prop::collection::vec(prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..20), 1..8),
            rot in 0usize..8,
        ) {
            let obs: Vec<Vec<f64>> = data.iter().map(|e| e.iter().map(|p| p.0).collect()).collect();
            let sim: Vec<Vec<f64>> = data.iter().map(|e| e.iter().map(|p| p.1).collect()).collect();
            let m = mse_spacing(&obs, &sim).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m, mse_spacing(&sim, &obs).unwrap());
            let k = rot % obs.len();
            let mut obs_r = obs.clone();
            let mut sim_r = sim.clone();
            obs_r.rotate_left(k);
            sim_r.rotate_left(k);
            prop_assert!((m - mse_spacing(&obs_r, &sim_r).unwrap()).abs() <= 1e-9 * m.max(1.0));
            prop_assert_eq!(mse_spacing(&obs, &obs).unwrap(), 0.0);
        }

        #[test]
        fn ttc_scale_invariant(s in 0.1..200.0f64, dv in -20.0..-0.01f64, k in 0.01..100.0f64) {
            let a = ttc(s, dv);
            prop_assert!(a > 0.0 && a.is_finite());
            let b = ttc(k * s, k * dv);
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
