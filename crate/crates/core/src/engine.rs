//! Episode engine: run seeded attacker–defender episodes and aggregate
//! Monte Carlo statistics.
//!
//! Each episode `e` owns four independent random streams derived from the
//! scenario's master seed — world, defender, attacker, engine — so episodes
//! can run on any number of workers and still produce bit-identical
//! results. By default all episodes share one world (built from the
//! episode-0 world stream), so run-to-run variance reflects the attack
//! process rather than world resampling; `fresh_world_per_episode` opts
//! into resampling for sensitivity checks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attackers::{Attacker, AttackerError, AttackerSpec, Feedback};
use crate::defenders::{Defender, DefenderError, DefenderSpec};
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::seed::{SeedSpec, StreamRole};
use crate::types::{Response, Transcript, TranscriptRecord};
use crate::world::{build_world, WorldError, WorldModel, WorldSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario config `{key}`: {message}")]
    InvalidConfig { key: String, message: String },
    #[error("failed to build worker pool: {0}")]
    WorkerPool(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Defender(#[from] DefenderError),
    #[error(transparent)]
    Attacker(#[from] AttackerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Complete description of an experiment: world, defender, attacker, the
/// episode length and count, and the master seed. This is the scenario
/// file's schema; unknown keys are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Display name used in reports and default output paths.
    #[serde(default)]
    pub name: String,
    pub world: WorldSpec,
    pub defender: DefenderSpec,
    pub attacker: AttackerSpec,
    /// Queries per episode.
    pub m_test: usize,
    /// Episodes per run.
    pub episodes: usize,
    pub seed: SeedSpec,
    /// Rebuild the world from each episode's own world stream instead of
    /// sharing the episode-0 world.
    #[serde(default)]
    pub fresh_world_per_episode: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.world.validate()?;
        self.defender.validate()?;
        self.attacker.validate()?;
        if self.m_test == 0 {
            return Err(EngineError::InvalidConfig {
                key: "m_test".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.episodes == 0 {
            return Err(EngineError::InvalidConfig {
                key: "episodes".into(),
                message: "must be at least 1".into(),
            });
        }
        if let AttackerSpec::TestSet { target: Some(t) } = &self.attacker {
            if t.0 >= self.world.classes {
                return Err(EngineError::InvalidConfig {
                    key: "attacker.test_set.target".into(),
                    message: format!(
                        "class {} does not exist in a {}-class world",
                        t.0, self.world.classes
                    ),
                });
            }
        }
        Ok(())
    }

    /// Build the world an episode uses: the shared episode-0 world unless
    /// `fresh_world_per_episode` is set.
    pub fn build_scenario_world(&self, episode: usize) -> Result<WorldModel, EngineError> {
        let world_episode = if self.fresh_world_per_episode {
            episode as u64
        } else {
            0
        };
        let mut rng = self.seed.stream(world_episode, StreamRole::World);
        Ok(build_world(&self.world, &mut rng)?)
    }
}

/// Run one episode end to end, building the world it needs.
pub fn run_episode(config: &ScenarioConfig, episode: usize) -> Result<Transcript, EngineError> {
    config.validate()?;
    let world = config.build_scenario_world(episode)?;
    run_episode_in(&world, config, episode)
}

/// Run one episode against an already-built world.
///
/// Protocol: fresh defender and attacker, the white-box screening phase (on
/// a defender clone, driven by the engine stream) when configured, then
/// `m_test` strictly sequential rounds of query → response → record →
/// feedback.
pub fn run_episode_in(
    world: &WorldModel,
    config: &ScenarioConfig,
    episode: usize,
) -> Result<Transcript, EngineError> {
    let mut defender = Defender::build(&config.defender)?;
    let mut attacker = Attacker::build(&config.attacker)?;
    let episode_idx = episode as u64;
    let mut defender_rng = config.seed.stream(episode_idx, StreamRole::Defender);
    let mut attacker_rng = config.seed.stream(episode_idx, StreamRole::Attacker);

    if matches!(config.attacker, AttackerSpec::WhiteBox { .. }) {
        let mut engine_rng = config.seed.stream(episode_idx, StreamRole::Engine);
        let mut copy = defender.clone_for_screening();
        attacker.screen_offline(&mut copy, world, &mut engine_rng)?;
    }

    let target = attacker.target();
    let mut transcript = Transcript::with_capacity(config.m_test);
    let mut seen = HashSet::with_capacity(config.m_test.min(world.len()));
    for index in 0..config.m_test {
        let query = attacker.next_query(world, &mut attacker_rng)?;
        let point = world
            .point(query.point_id)
            .ok_or(DefenderError::UnknownPoint(query.point_id))?;
        let true_label = point.true_label;
        let response = defender.respond(&query, world, &mut defender_rng)?;
        let is_error = response.is_error_against(true_label);
        let is_targeted_hit =
            target.is_some_and(|t| response == Response::Class(t) && true_label != t);
        let is_repeat = !seen.insert(query.point_id);
        transcript.records.push(TranscriptRecord {
            index,
            query,
            response,
            true_label,
            is_error,
            is_targeted_hit,
            is_repeat,
        });
        attacker.observe(&Feedback {
            query,
            response,
            true_label,
            was_error: is_error,
            was_targeted_hit: is_targeted_hit,
        })?;
    }
    Ok(transcript)
}

/// Map a function over every episode's transcript, in episode order.
///
/// `workers` selects the execution mode: 1 runs strictly sequentially, 0
/// uses all available parallelism, any other value uses that many threads.
/// Results are identical in all modes because each episode derives its own
/// random streams and results are collected in episode order. Without the
/// `parallel` feature every mode runs sequentially.
pub fn map_episodes<T, F>(
    config: &ScenarioConfig,
    workers: usize,
    f: F,
) -> Result<Vec<T>, EngineError>
where
    T: Send,
    F: Fn(usize, &Transcript) -> Result<T, EngineError> + Sync,
{
    config.validate()?;
    let shared_world = if config.fresh_world_per_episode {
        None
    } else {
        Some(config.build_scenario_world(0)?)
    };
    let run_one = |episode: usize| -> Result<T, EngineError> {
        let transcript = match &shared_world {
            Some(world) => run_episode_in(world, config, episode)?,
            None => {
                let world = config.build_scenario_world(episode)?;
                run_episode_in(&world, config, episode)?
            }
        };
        f(episode, &transcript)
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers != 1 {
            let results: Result<Vec<T>, EngineError> = if workers == 0 {
                (0..config.episodes).into_par_iter().map(run_one).collect()
            } else {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| EngineError::WorkerPool(e.to_string()))?;
                pool.install(|| (0..config.episodes).into_par_iter().map(run_one).collect())
            };
            return results;
        }
    }
    #[cfg(not(feature = "parallel"))]
    if workers != 1 {
        log::warn!("built without the `parallel` feature; running episodes sequentially");
    }
    (0..config.episodes).map(run_one).collect()
}

/// Mean, sample standard deviation, and normal-approximation 95% interval
/// half-width of one summary quantity over `n` episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 when n = 1.
    pub std_dev: f64,
    /// 1.96 · std_dev / sqrt(n).
    pub ci95_half_width: f64,
    pub n: usize,
}

impl SummaryStat {
    /// Summarize a sample; `None` for an empty one.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_dev = if n == 1 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        let ci95_half_width = 1.96 * std_dev / (n as f64).sqrt();
        Some(SummaryStat {
            mean,
            std_dev,
            ci95_half_width,
            n,
        })
    }
}

/// Aggregated results of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub episodes: usize,
    pub error_rate: SummaryStat,
    pub abstention_rate: SummaryStat,
    pub targeted_rate: SummaryStat,
    /// Over episodes that contain at least one error; `None` if no episode
    /// does. The index is 0-based, so the average number of queries needed
    /// to reach the first error is `mean + 1`.
    pub first_mistake_index: Option<SummaryStat>,
    pub episodes_without_mistake: usize,
    pub per_episode: Vec<Metrics>,
}

impl MonteCarloSummary {
    pub fn from_metrics(per_episode: Vec<Metrics>) -> Self {
        let collect = |f: fn(&Metrics) -> f64| -> Vec<f64> { per_episode.iter().map(f).collect() };
        let error_rate =
            SummaryStat::from_values(&collect(|m| m.error_rate)).expect("at least one episode");
        let abstention_rate = SummaryStat::from_values(&collect(|m| m.abstention_rate))
            .expect("at least one episode");
        let targeted_rate =
            SummaryStat::from_values(&collect(|m| m.targeted_rate)).expect("at least one episode");
        let first_mistakes: Vec<f64> = per_episode
            .iter()
            .filter_map(|m| m.first_mistake_index.map(|i| i as f64))
            .collect();
        let episodes_without_mistake = per_episode.len() - first_mistakes.len();
        MonteCarloSummary {
            episodes: per_episode.len(),
            error_rate,
            abstention_rate,
            targeted_rate,
            first_mistake_index: SummaryStat::from_values(&first_mistakes),
            episodes_without_mistake,
            per_episode,
        }
    }
}

/// Run every episode and aggregate, using all available parallelism.
pub fn monte_carlo(config: &ScenarioConfig) -> Result<MonteCarloSummary, EngineError> {
    monte_carlo_with_workers(config, 0)
}

/// Run every episode and aggregate on a fixed worker count (see
/// [`map_episodes`] for the worker semantics).
pub fn monte_carlo_with_workers(
    config: &ScenarioConfig,
    workers: usize,
) -> Result<MonteCarloSummary, EngineError> {
    let per_episode = map_episodes(config, workers, |_, t| {
        compute_metrics(t).map_err(Into::into)
    })?;
    Ok(MonteCarloSummary::from_metrics(per_episode))
}
