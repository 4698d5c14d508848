//! Attacker policies: the natural-user baseline and the correlated query
//! attacks.
//!
//! All attackers speak the same protocol with the engine: `next_query`
//! produces exactly one query, whose outcome must come back through
//! `observe` before the next query is issued. Policies:
//!
//! * `natural_user` — draws from the world's natural traffic process and
//!   never adapts;
//! * `test_set` — probes naturally until it observes a mistake (or, when
//!   targeted, a mistake as the target class), then replays that point for
//!   the rest of the episode regardless of what the defender does;
//! * `rate_tracking` — a UCB1 bandit over every point it has tried plus a
//!   pseudo-arm meaning "probe a fresh point", rewarding observed errors,
//!   so it converges on the point with the highest per-query error rate;
//! * `white_box` — screens an offline copy of the defender before the
//!   episode, collecting unique points observed to err, then submits that
//!   list live one point at a time (never repeating, which keeps
//!   memorization defenses from ever firing), falling back to fresh probes
//!   when the list runs out.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defenders::{Defender, DefenderError};
use crate::types::{Label, PointId, Query, QueryOrigin, Response};
use crate::world::WorldModel;

#[derive(Debug, Error, PartialEq)]
pub enum AttackerError {
    #[error("attacker config `{key}`: {message}")]
    InvalidSpec { key: String, message: String },
    #[error("next_query called while query {pending:?} still awaits feedback")]
    QueryBeforeFeedback { pending: Query },
    #[error("feedback for {got:?} does not match the outstanding query {expected:?}")]
    OutOfOrderFeedback { expected: Option<Query>, got: Query },
    #[error("screening phase requires a white_box attacker")]
    ScreeningUnsupported,
    #[error(transparent)]
    Defender(#[from] DefenderError),
}

/// Attacker configuration, as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackerSpec {
    NaturalUser,
    TestSet {
        /// When set, only mistakes as this exact class count as the prize;
        /// plain mistakes are ignored during probing.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Label>,
    },
    RateTracking {
        /// UCB1 exploration constant; 1.0 is the canonical policy, larger
        /// explores more, 0 is pure greedy.
        #[serde(default = "default_exploration")]
        exploration: f64,
    },
    WhiteBox {
        /// Number of offline probes against the defender copy.
        screen_budget: usize,
    },
}

fn default_exploration() -> f64 {
    1.0
}

impl AttackerSpec {
    pub fn validate(&self) -> Result<(), AttackerError> {
        if let AttackerSpec::RateTracking { exploration } = self {
            if !exploration.is_finite() || *exploration < 0.0 {
                return Err(AttackerError::InvalidSpec {
                    key: "attacker.rate_tracking.exploration".into(),
                    message: format!("{exploration} must be a finite value ≥ 0"),
                });
            }
        }
        Ok(())
    }
}

/// What the engine reports back to the attacker after each query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub query: Query,
    pub response: Response,
    pub true_label: Label,
    /// Response was a class prediction differing from the true label.
    /// Abstentions and rejections are never errors.
    pub was_error: bool,
    /// Response was exactly the attacker's target class on a point whose
    /// true label differs from the target.
    pub was_targeted_hit: bool,
}

/// Empirical record for one bandit arm.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ArmStats {
    trials: u64,
    errors: u64,
}

impl ArmStats {
    fn record(&mut self, error: bool) {
        self.trials += 1;
        self.errors += u64::from(error);
    }

    fn mean(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.errors as f64 / self.trials as f64
        }
    }

    /// UCB1 score at round `t`: empirical mean plus the exploration bonus
    /// `c · sqrt(2 ln t / trials)`. An untried arm scores infinity so it is
    /// pulled before any tried arm.
    fn ucb_score(&self, t: u64, exploration: f64) -> f64 {
        if self.trials == 0 {
            f64::INFINITY
        } else {
            self.mean() + exploration * (2.0 * (t as f64).ln() / self.trials as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone)]
enum AttackerKind {
    NaturalUser,
    TestSet {
        target: Option<Label>,
        found_mistake: Option<PointId>,
    },
    RateTracking {
        exploration: f64,
        /// Per-point empirical error rates, keyed in point order so arm
        /// iteration (and therefore tie-breaking) is reproducible.
        arms: BTreeMap<PointId, ArmStats>,
        /// Pseudo-arm whose pulls are fresh natural probes.
        fresh_arm: ArmStats,
        /// Completed query/feedback rounds.
        rounds: u64,
    },
    WhiteBox {
        screen_budget: usize,
        screened_mistakes: Vec<PointId>,
        replay_cursor: usize,
    },
}

/// A live attacker with per-episode mutable state.
#[derive(Debug, Clone)]
pub struct Attacker {
    kind: AttackerKind,
    /// Last natural-traffic draw, feeding the world's duplicate gate.
    previous_draw: Option<PointId>,
    /// The query whose feedback is still outstanding.
    pending: Option<Query>,
}

impl Attacker {
    pub fn build(spec: &AttackerSpec) -> Result<Self, AttackerError> {
        spec.validate()?;
        let kind = match spec {
            AttackerSpec::NaturalUser => AttackerKind::NaturalUser,
            AttackerSpec::TestSet { target } => AttackerKind::TestSet {
                target: *target,
                found_mistake: None,
            },
            AttackerSpec::RateTracking { exploration } => AttackerKind::RateTracking {
                exploration: *exploration,
                arms: BTreeMap::new(),
                fresh_arm: ArmStats::default(),
                rounds: 0,
            },
            AttackerSpec::WhiteBox { screen_budget } => AttackerKind::WhiteBox {
                screen_budget: *screen_budget,
                screened_mistakes: Vec::new(),
                replay_cursor: 0,
            },
        };
        Ok(Attacker {
            kind,
            previous_draw: None,
            pending: None,
        })
    }

    /// The target class, when this is a targeted attacker.
    pub fn target(&self) -> Option<Label> {
        match &self.kind {
            AttackerKind::TestSet { target, .. } => *target,
            _ => None,
        }
    }

    /// Points collected during the screening phase, in discovery order.
    pub fn screened_mistakes(&self) -> &[PointId] {
        match &self.kind {
            AttackerKind::WhiteBox {
                screened_mistakes, ..
            } => screened_mistakes,
            _ => &[],
        }
    }

    /// Probe an offline copy of the defender with `screen_budget` natural
    /// draws, collecting the unique points observed to err. Only white-box
    /// attackers have a screening phase. The copy's responses and the draws
    /// both use `rng`, which must be a stream the live episode does not
    /// share.
    pub fn screen_offline<R: Rng + ?Sized>(
        &mut self,
        defender_copy: &mut Defender,
        world: &WorldModel,
        rng: &mut R,
    ) -> Result<(), AttackerError> {
        let AttackerKind::WhiteBox {
            screen_budget,
            screened_mistakes,
            ..
        } = &mut self.kind
        else {
            return Err(AttackerError::ScreeningUnsupported);
        };
        let mut collected: HashSet<PointId> = screened_mistakes.iter().copied().collect();
        let mut previous = None;
        for _ in 0..*screen_budget {
            let point_id = world.natural_draw(rng, previous);
            previous = Some(point_id);
            let query = Query {
                point_id,
                origin: QueryOrigin::FreshProbe,
            };
            let response = defender_copy.respond(&query, world, rng)?;
            let truth = world
                .point(point_id)
                .expect("drawn point exists")
                .true_label;
            if response.is_error_against(truth) && collected.insert(point_id) {
                screened_mistakes.push(point_id);
            }
        }
        Ok(())
    }

    /// Produce the next query. Errors if the previous query's feedback has
    /// not been observed yet.
    pub fn next_query<R: Rng + ?Sized>(
        &mut self,
        world: &WorldModel,
        rng: &mut R,
    ) -> Result<Query, AttackerError> {
        if let Some(pending) = self.pending {
            return Err(AttackerError::QueryBeforeFeedback { pending });
        }
        let query = match &mut self.kind {
            AttackerKind::NaturalUser => {
                let point_id = world.natural_draw(rng, self.previous_draw);
                self.previous_draw = Some(point_id);
                Query {
                    point_id,
                    origin: QueryOrigin::FreshProbe,
                }
            }
            AttackerKind::TestSet { found_mistake, .. } => match found_mistake {
                Some(point_id) => Query {
                    point_id: *point_id,
                    origin: QueryOrigin::Replay,
                },
                None => {
                    let point_id = world.natural_draw(rng, self.previous_draw);
                    self.previous_draw = Some(point_id);
                    Query {
                        point_id,
                        origin: QueryOrigin::FreshProbe,
                    }
                }
            },
            AttackerKind::RateTracking {
                exploration,
                arms,
                fresh_arm,
                rounds,
            } => {
                let t = *rounds + 1;
                // The fresh pseudo-arm wins exact ties, then lower point
                // ids: iteration order is fixed, comparison is strict.
                let mut best_score = fresh_arm.ucb_score(t, *exploration);
                let mut best_point = None;
                for (&point_id, stats) in arms.iter() {
                    let score = stats.ucb_score(t, *exploration);
                    if score > best_score {
                        best_score = score;
                        best_point = Some(point_id);
                    }
                }
                match best_point {
                    Some(point_id) => Query {
                        point_id,
                        origin: QueryOrigin::Replay,
                    },
                    None => {
                        let point_id = world.natural_draw(rng, self.previous_draw);
                        self.previous_draw = Some(point_id);
                        Query {
                            point_id,
                            origin: QueryOrigin::FreshProbe,
                        }
                    }
                }
            }
            AttackerKind::WhiteBox {
                screened_mistakes,
                replay_cursor,
                ..
            } => {
                if *replay_cursor < screened_mistakes.len() {
                    let point_id = screened_mistakes[*replay_cursor];
                    *replay_cursor += 1;
                    // First live submission of an offline discovery: the
                    // point has not been queried in this episode before.
                    Query {
                        point_id,
                        origin: QueryOrigin::FreshProbe,
                    }
                } else {
                    let point_id = world.natural_draw(rng, self.previous_draw);
                    self.previous_draw = Some(point_id);
                    Query {
                        point_id,
                        origin: QueryOrigin::FreshProbe,
                    }
                }
            }
        };
        self.pending = Some(query);
        Ok(query)
    }

    /// Consume feedback for the outstanding query.
    pub fn observe(&mut self, feedback: &Feedback) -> Result<(), AttackerError> {
        match self.pending {
            Some(expected) if expected == feedback.query => self.pending = None,
            other => {
                return Err(AttackerError::OutOfOrderFeedback {
                    expected: other,
                    got: feedback.query,
                })
            }
        }
        match &mut self.kind {
            AttackerKind::NaturalUser | AttackerKind::WhiteBox { .. } => {}
            AttackerKind::TestSet {
                target,
                found_mistake,
            } => {
                if found_mistake.is_none() {
                    let prize = match target {
                        Some(_) => feedback.was_targeted_hit,
                        None => feedback.was_error,
                    };
                    if prize {
                        *found_mistake = Some(feedback.query.point_id);
                    }
                }
            }
            AttackerKind::RateTracking {
                arms,
                fresh_arm,
                rounds,
                ..
            } => {
                arms.entry(feedback.query.point_id)
                    .or_default()
                    .record(feedback.was_error);
                if feedback.query.origin == QueryOrigin::FreshProbe {
                    fresh_arm.record(feedback.was_error);
                }
                *rounds += 1;
            }
        }
        Ok(())
    }
}
