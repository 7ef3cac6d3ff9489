//! Genetic-algorithm calibration of physics-model parameters against
//! closed-loop spacing error.
//!
//! Real-coded chromosomes (one gene per parameter, in the order of
//! [`PhysicsModel::bounds`]), tournament selection, uniform crossover and
//! Gaussian mutation scaled to each bound range. Offspring are clipped to the
//! bounds and the best `elitism` individuals survive unchanged, so the best
//! fitness per generation never increases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{AccelLimits, ModelParams, PhysicsModel, PhysicsPredictor};
use crate::events::CarFollowingEvent;
use crate::kinematics::{rollout, KinematicsError, RolloutConfig};
use crate::metrics::{mse_spacing, MetricsError};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid GA config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rollout(#[from] KinematicsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each bound range.
    pub mutation_sigma: f64,
    pub elitism: usize,
    pub seed: u64,
    pub tournament_k: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_sigma: 0.1,
            elitism: 2,
            seed: 0,
            tournament_k: 3,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), CalibrateError> {
        let fail = |m: String| Err(CalibrateError::InvalidConfig(m));
        if self.population < 2 {
            return fail(format!("population must be at least 2, got {}", self.population));
        }
        if self.elitism == 0 || self.elitism >= self.population {
            return fail(format!(
                "elitism must be in [1, population), got {}",
                self.elitism
            ));
        }
        if self.generations == 0 {
            return fail("generations must be at least 1".into());
        }
        if self.tournament_k == 0 {
            return fail("tournament_k must be at least 1".into());
        }
        for (name, v) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.mutation_sigma >= 0.0 && self.mutation_sigma.is_finite()) {
            return fail(format!("mutation_sigma must be non-negative, got {}", self.mutation_sigma));
        }
        Ok(())
    }
}

/// Closed-loop spacing MSE of `params` over `events`.
///
/// Rollouts run in parallel; the per-event results are reduced in event
/// order so the value does not depend on scheduling.
pub fn fitness(
    params: &ModelParams,
    events: &[CarFollowingEvent],
    rollout_config: RolloutConfig,
    limits: &AccelLimits,
) -> Result<f64, CalibrateError> {
    if events.is_empty() {
        return Err(CalibrateError::InvalidArgument("no events to fit".into()));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = events
        .par_iter()
        .map(|ev| {
            let mut predictor = PhysicsPredictor::with_limits(*params, *limits);
            let traj = rollout(ev, &mut predictor, rollout_config)?;
            let start = traj.eval_start();
            let obs = ev.steps()[start..].iter().map(|s| s.spacing).collect();
            Ok((obs, traj.eval_spacing()))
        })
        .collect::<Result<_, KinematicsError>>()?;
    let (observed, simulated): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(mse_spacing(&observed, &simulated)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub best_params: ModelParams,
    pub best_fitness: f64,
    /// Best fitness of each generation; generation 0 is the random population.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
struct Individual {
    genes: Vec<f64>,
    fitness: f64,
}

/// Run the GA over `events` for one physics model.
pub fn calibrate_ga(
    model: PhysicsModel,
    events: &[CarFollowingEvent],
    config: &GaConfig,
    rollout_config: RolloutConfig,
    limits: &AccelLimits,
) -> Result<CalibrationResult, CalibrateError> {
    calibrate_ga_with(model, config, |params| {
        fitness(params, events, rollout_config, limits)
    })
}

/// GA driver over an arbitrary fitness function (lower is better).
///
/// NaN fitness values are treated as `+inf`.
pub fn calibrate_ga_with<F>(
    model: PhysicsModel,
    config: &GaConfig,
    eval: F,
) -> Result<CalibrationResult, CalibrateError>
where
    F: Fn(&ModelParams) -> Result<f64, CalibrateError>,
{
    config.validate()?;
    let bounds = model.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut evaluations = 0usize;
    let mut evaluate = |genes: Vec<f64>| -> Result<Individual, CalibrateError> {
        evaluations += 1;
        let f = eval(&ModelParams::from_slice(model, &genes))?;
        Ok(Individual {
            genes,
            fitness: if f.is_nan() { f64::INFINITY } else { f },
        })
    };

    let mut population = Vec::with_capacity(config.population);
    for _ in 0..config.population {
        let genes: Vec<f64> = bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect();
        population.push(evaluate(genes)?);
    }
    sort_by_fitness(&mut population);
    let mut history = vec![population[0].fitness];

    for _ in 1..config.generations {
        let mut next: Vec<Individual> = population[..config.elitism].to_vec();
        while next.len() < config.population {
            let a = tournament(&population, config.tournament_k, &mut rng);
            let b = tournament(&population, config.tournament_k, &mut rng);
            let mut child: Vec<f64> = if rng.random_bool(config.crossover_rate) {
                a.genes
                    .iter()
                    .zip(&b.genes)
                    .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                    .collect()
            } else {
                a.genes.clone()
            };
            for (gene, b) in child.iter_mut().zip(bounds) {
                if rng.random_bool(config.mutation_rate) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *gene += z * config.mutation_sigma * (b.hi - b.lo);
                }
                *gene = gene.clamp(b.lo, b.hi);
            }
            next.push(evaluate(child)?);
        }
        population = next;
        sort_by_fitness(&mut population);
        history.push(population[0].fitness);
    }

    let best = &population[0];
    Ok(CalibrationResult {
        best_params: ModelParams::from_slice(model, &best.genes),
        best_fitness: best.fitness,
        history,
        evaluations,
    })
}

fn sort_by_fitness(population: &mut [Individual]) {
    // stable, so ties keep their insertion order
    population.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
}

fn tournament<'a>(population: &'a [Individual], k: usize, rng: &mut ChaCha8Rng) -> &'a Individual {
    let mut best = &population[rng.random_range(0..population.len())];
    for _ in 1..k {
        let challenger = &population[rng.random_range(0..population.len())];
        if challenger.fitness < best.fitness {
            best = challenger;
        }
    }
    best
}

/// Calibrate each event on its own. Returns one result per event, in order.
pub fn calibrate_per_event(
    model: PhysicsModel,
    events: &[CarFollowingEvent],
    config: &GaConfig,
    rollout_config: RolloutConfig,
    limits: &AccelLimits,
) -> Result<Vec<CalibrationResult>, CalibrateError> {
    if events.is_empty() {
        return Err(CalibrateError::InvalidArgument("no events to fit".into()));
    }
    events
        .iter()
        .map(|ev| calibrate_ga(model, std::slice::from_ref(ev), config, rollout_config, limits))
        .collect()
}
