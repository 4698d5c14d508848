//! Defender stack: a base classifier plus zero or more defense wrappers.
//!
//! The base is either the deterministic argmax of each point's profile or a
//! fresh sample from it per query. Wrappers compose around the base in the
//! order given in `DefenderSpec::wrappers` (first wrapper outermost), each
//! able to
//! short-circuit a query before it reaches the layers below:
//!
//! * `confidence_abstain` — abstain when the model's top-class probability
//!   on the queried point is below a threshold;
//! * `memorization` — remember every answered point and refuse to commit on
//!   repeats, either by abstaining or by answering a uniformly random class;
//! * `rate_limit` — reject all traffic beyond a fixed budget of answered
//!   queries.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Label, PointId, Query, Response};
use crate::world::WorldModel;

#[derive(Debug, Error, PartialEq)]
pub enum DefenderError {
    #[error("defender config `{key}`: {message}")]
    InvalidSpec { key: String, message: String },
    #[error("defender queried unknown point {0:?}")]
    UnknownPoint(PointId),
}

/// The classifier at the bottom of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDefender {
    /// Always answer the argmax class of the point's profile.
    FixedDeterministic,
    /// Sample a response from the point's profile on every query.
    FixedStochastic,
}

/// What a memorization wrapper does when it sees a repeated point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorizationMode {
    /// Abstain on repeats.
    Abstain,
    /// Answer a class drawn uniformly at random on repeats, hiding which
    /// class the model would have committed to.
    UniformRandom,
}

/// One defense layer, as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WrapperSpec {
    ConfidenceAbstain { threshold: f64 },
    Memorization { mode: MemorizationMode },
    RateLimit { budget: usize },
}

/// Declarative description of a defender stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenderSpec {
    pub base: BaseDefender,
    /// Defense layers, outermost first.
    #[serde(default)]
    pub wrappers: Vec<WrapperSpec>,
}

impl DefenderSpec {
    pub fn validate(&self) -> Result<(), DefenderError> {
        for (i, wrapper) in self.wrappers.iter().enumerate() {
            if let WrapperSpec::ConfidenceAbstain { threshold } = wrapper {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(DefenderError::InvalidSpec {
                        key: format!("defender.wrappers[{i}].threshold"),
                        message: format!("{threshold} is outside [0, 1]"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A live defender with per-episode mutable state.
#[derive(Debug, Clone)]
pub enum Defender {
    FixedDeterministic,
    FixedStochastic,
    ConfidenceAbstain {
        threshold: f64,
        inner: Box<Defender>,
    },
    Memorization {
        mode: MemorizationMode,
        seen: HashSet<PointId>,
        inner: Box<Defender>,
    },
    RateLimit {
        budget: usize,
        answered: usize,
        inner: Box<Defender>,
    },
}

impl Defender {
    /// Build the runtime stack from a spec: the first wrapper in the list
    /// becomes the outermost layer.
    pub fn build(spec: &DefenderSpec) -> Result<Self, DefenderError> {
        spec.validate()?;
        let mut defender = match spec.base {
            BaseDefender::FixedDeterministic => Defender::FixedDeterministic,
            BaseDefender::FixedStochastic => Defender::FixedStochastic,
        };
        for wrapper in spec.wrappers.iter().rev() {
            defender = match *wrapper {
                WrapperSpec::ConfidenceAbstain { threshold } => Defender::ConfidenceAbstain {
                    threshold,
                    inner: Box::new(defender),
                },
                WrapperSpec::Memorization { mode } => Defender::Memorization {
                    mode,
                    seen: HashSet::new(),
                    inner: Box::new(defender),
                },
                WrapperSpec::RateLimit { budget } => Defender::RateLimit {
                    budget,
                    answered: 0,
                    inner: Box::new(defender),
                },
            };
        }
        Ok(defender)
    }

    /// Answer one query. `rng` is the defender's private stream; only
    /// randomized layers consume from it.
    pub fn respond<R: Rng + ?Sized>(
        &mut self,
        query: &Query,
        world: &WorldModel,
        rng: &mut R,
    ) -> Result<Response, DefenderError> {
        match self {
            Defender::FixedDeterministic => {
                let point = world
                    .point(query.point_id)
                    .ok_or(DefenderError::UnknownPoint(query.point_id))?;
                Ok(Response::Class(point.profile.argmax()))
            }
            Defender::FixedStochastic => {
                let point = world
                    .point(query.point_id)
                    .ok_or(DefenderError::UnknownPoint(query.point_id))?;
                Ok(point.profile.sample(rng))
            }
            Defender::ConfidenceAbstain { threshold, inner } => {
                let point = world
                    .point(query.point_id)
                    .ok_or(DefenderError::UnknownPoint(query.point_id))?;
                if point.profile.max_class_prob() < *threshold {
                    Ok(Response::Abstain)
                } else {
                    inner.respond(query, world, rng)
                }
            }
            Defender::Memorization { mode, seen, inner } => {
                if seen.insert(query.point_id) {
                    inner.respond(query, world, rng)
                } else {
                    match mode {
                        MemorizationMode::Abstain => Ok(Response::Abstain),
                        MemorizationMode::UniformRandom => {
                            let class = rng.random_range(0..world.class_count());
                            Ok(Response::Class(Label(class)))
                        }
                    }
                }
            }
            Defender::RateLimit {
                budget,
                answered,
                inner,
            } => {
                if *answered >= *budget {
                    Ok(Response::Rejected)
                } else {
                    *answered += 1;
                    inner.respond(query, world, rng)
                }
            }
        }
    }

    /// Clear all per-episode state (memorized points, spent budget).
    pub fn reset(&mut self) {
        match self {
            Defender::FixedDeterministic | Defender::FixedStochastic => {}
            Defender::ConfidenceAbstain { inner, .. } => inner.reset(),
            Defender::Memorization { seen, inner, .. } => {
                seen.clear();
                inner.reset();
            }
            Defender::RateLimit {
                answered, inner, ..
            } => {
                *answered = 0;
                inner.reset();
            }
        }
    }

    /// Deep copy for offline probing: the copy starts from this defender's
    /// current state and evolves independently, so nothing the attacker does
    /// to the copy is visible to the live system.
    pub fn clone_for_screening(&self) -> Self {
        self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{SeedSpec, StreamRole};
    use crate::types::QueryOrigin;
    use crate::world::{build_world, ProfileKind, Stratum, WorldSpec, WrongMass};

    fn fresh(point: usize) -> Query {
        Query {
            point_id: PointId(point),
            origin: QueryOrigin::FreshProbe,
        }
    }

    fn det_world(classes: usize, points: usize, error_rate: f64) -> WorldModel {
        let spec = WorldSpec {
            classes,
            points,
            error_rate: Some(error_rate),
            profile: ProfileKind::Deterministic,
            duplicate_rate: 0.0,
        };
        let mut rng = SeedSpec(100).stream(0, StreamRole::World);
        build_world(&spec, &mut rng).unwrap()
    }

    fn soft_world(true_prob: f64) -> WorldModel {
        let spec = WorldSpec {
            classes: 4,
            points: 20,
            error_rate: None,
            profile: ProfileKind::Stochastic {
                strata: vec![Stratum {
                    fraction: 1.0,
                    true_prob,
                    abstain_prob: 0.0,
                    wrong_mass: WrongMass::Uniform,
                }],
            },
            duplicate_rate: 0.0,
        };
        let mut rng = SeedSpec(101).stream(0, StreamRole::World);
        build_world(&spec, &mut rng).unwrap()
    }

    #[test]
    fn deterministic_base_answers_argmax() {
        let world = det_world(10, 100, 0.1);
        let mut defender = Defender::FixedDeterministic;
        let mut rng = SeedSpec(1).stream(0, StreamRole::Defender);
        for point in world.points() {
            let response = defender
                .respond(&fresh(point.id.0), &world, &mut rng)
                .unwrap();
            assert_eq!(response, Response::Class(point.profile.argmax()));
        }
    }

    #[test]
    fn stochastic_base_tracks_profile_rates() {
        let world = soft_world(0.7);
        let mut defender = Defender::FixedStochastic;
        let mut rng = SeedSpec(2).stream(0, StreamRole::Defender);
        let trials = 100_000;
        let mut correct = 0usize;
        for i in 0..trials {
            let query = fresh(i % world.len());
            let point = world.point(query.point_id).unwrap();
            if defender.respond(&query, &world, &mut rng).unwrap()
                == Response::Class(point.true_label)
            {
                correct += 1;
            }
        }
        let rate = correct as f64 / trials as f64;
        assert!((rate - 0.7).abs() < 0.01, "true-class rate {rate}");
    }

    #[test]
    fn confidence_abstain_gates_on_top_class_probability() {
        let world = soft_world(0.7);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::ConfidenceAbstain { threshold: 0.8 }],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(3).stream(0, StreamRole::Defender);
        // Every point has confidence 0.7 < 0.8: all abstain.
        assert_eq!(
            defender.respond(&fresh(0), &world, &mut rng).unwrap(),
            Response::Abstain
        );

        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::ConfidenceAbstain { threshold: 0.6 }],
        };
        let mut defender = Defender::build(&spec).unwrap();
        // Confidence 0.7 >= 0.6: the base answers.
        assert!(matches!(
            defender.respond(&fresh(0), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
    }

    #[test]
    fn memorization_abstains_on_repeats_only() {
        let world = det_world(10, 100, 0.1);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::Memorization {
                mode: MemorizationMode::Abstain,
            }],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(4).stream(0, StreamRole::Defender);
        assert!(matches!(
            defender.respond(&fresh(7), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
        for _ in 0..5 {
            assert_eq!(
                defender.respond(&fresh(7), &world, &mut rng).unwrap(),
                Response::Abstain
            );
        }
        // A different point is still answered.
        assert!(matches!(
            defender.respond(&fresh(8), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
    }

    #[test]
    fn memorization_uniform_random_covers_all_classes() {
        let world = det_world(4, 100, 0.0);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::Memorization {
                mode: MemorizationMode::UniformRandom,
            }],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(5).stream(0, StreamRole::Defender);
        defender.respond(&fresh(0), &world, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        let repeats = 40_000;
        for _ in 0..repeats {
            match defender.respond(&fresh(0), &world, &mut rng).unwrap() {
                Response::Class(Label(c)) => counts[c] += 1,
                other => panic!("uniform_random repeat answered {other:?}"),
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            let freq = count as f64 / repeats as f64;
            assert!((freq - 0.25).abs() < 0.01, "class {c} frequency {freq}");
        }
    }

    #[test]
    fn rate_limit_rejects_beyond_budget() {
        let world = det_world(10, 100, 0.0);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::RateLimit { budget: 3 }],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(6).stream(0, StreamRole::Defender);
        let mut answered = 0usize;
        let mut rejected = 0usize;
        for i in 0..10 {
            match defender.respond(&fresh(i), &world, &mut rng).unwrap() {
                Response::Rejected => rejected += 1,
                _ => answered += 1,
            }
        }
        assert_eq!(answered, 3);
        assert_eq!(rejected, 7);
    }

    #[test]
    fn wrapper_order_controls_what_inner_layers_see() {
        let world = det_world(10, 100, 0.0);
        // Memorization outermost: repeats abstain without spending budget.
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![
                WrapperSpec::Memorization {
                    mode: MemorizationMode::Abstain,
                },
                WrapperSpec::RateLimit { budget: 2 },
            ],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(7).stream(0, StreamRole::Defender);
        defender.respond(&fresh(0), &world, &mut rng).unwrap();
        for _ in 0..10 {
            // Repeats never reach the rate limiter.
            assert_eq!(
                defender.respond(&fresh(0), &world, &mut rng).unwrap(),
                Response::Abstain
            );
        }
        // Budget still has one answer left.
        assert!(matches!(
            defender.respond(&fresh(1), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
        assert_eq!(
            defender.respond(&fresh(2), &world, &mut rng).unwrap(),
            Response::Rejected
        );

        // Rate limit outermost: repeats burn budget before memorization.
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![
                WrapperSpec::RateLimit { budget: 2 },
                WrapperSpec::Memorization {
                    mode: MemorizationMode::Abstain,
                },
            ],
        };
        let mut defender = Defender::build(&spec).unwrap();
        defender.respond(&fresh(0), &world, &mut rng).unwrap();
        assert_eq!(
            defender.respond(&fresh(0), &world, &mut rng).unwrap(),
            Response::Abstain
        );
        assert_eq!(
            defender.respond(&fresh(1), &world, &mut rng).unwrap(),
            Response::Rejected
        );
    }

    #[test]
    fn reset_clears_memory_and_budget() {
        let world = det_world(10, 100, 0.0);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![
                WrapperSpec::Memorization {
                    mode: MemorizationMode::Abstain,
                },
                WrapperSpec::RateLimit { budget: 1 },
            ],
        };
        let mut defender = Defender::build(&spec).unwrap();
        let mut rng = SeedSpec(8).stream(0, StreamRole::Defender);
        defender.respond(&fresh(0), &world, &mut rng).unwrap();
        assert_eq!(
            defender.respond(&fresh(1), &world, &mut rng).unwrap(),
            Response::Rejected
        );
        defender.reset();
        assert!(matches!(
            defender.respond(&fresh(0), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
    }

    #[test]
    fn screening_clone_is_independent() {
        let world = det_world(10, 100, 0.0);
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::Memorization {
                mode: MemorizationMode::Abstain,
            }],
        };
        let mut live = Defender::build(&spec).unwrap();
        let mut copy = live.clone_for_screening();
        let mut rng = SeedSpec(9).stream(0, StreamRole::Defender);
        copy.respond(&fresh(0), &world, &mut rng).unwrap();
        copy.respond(&fresh(0), &world, &mut rng).unwrap();
        // The live defender never saw point 0.
        assert!(matches!(
            live.respond(&fresh(0), &world, &mut rng).unwrap(),
            Response::Class(_)
        ));
    }

    #[test]
    fn unknown_point_is_an_error() {
        let world = det_world(10, 10, 0.0);
        let mut defender = Defender::FixedDeterministic;
        let mut rng = SeedSpec(10).stream(0, StreamRole::Defender);
        let err = defender.respond(&fresh(999), &world, &mut rng).unwrap_err();
        assert_eq!(err, DefenderError::UnknownPoint(PointId(999)));
    }

    #[test]
    fn threshold_outside_unit_interval_names_the_key() {
        let spec = DefenderSpec {
            base: BaseDefender::FixedDeterministic,
            wrappers: vec![WrapperSpec::ConfidenceAbstain { threshold: 1.5 }],
        };
        let err = spec.validate().unwrap_err();
        match err {
            DefenderError::InvalidSpec { key, .. } => {
                assert_eq!(key, "defender.wrappers[0].threshold");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_defender_keys_are_rejected_by_name() {
        let json = r#"{ "base": "fixed_deterministic", "wrapper": [] }"#;
        let err = serde_json::from_str::<DefenderSpec>(json).unwrap_err();
        assert!(err.to_string().contains("wrapper"), "got: {err}");
    }
}
