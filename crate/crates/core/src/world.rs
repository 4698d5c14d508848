//! Finite world model: a population of labeled points together with the
//! model-under-attack's response distribution on each point.
//!
//! A world is the fixed object both sides of the game interact with. The
//! defender reads its base behavior from each point's profile (the argmax
//! class for a deterministic model, a sample from the profile for a
//! stochastic one); attackers and natural users draw points from the world.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Label, PointId, Response};

/// Tolerance for probability mass sums inside a single profile.
const MASS_EPSILON: f64 = 1e-12;
/// Tolerance for stratum fractions summing to one.
const FRACTION_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("world config `{key}`: {message}")]
    InvalidSpec { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> WorldError {
    WorldError::InvalidSpec {
        key: key.into(),
        message: message.into(),
    }
}

/// Conditional response distribution of the model on one point: one
/// probability per class plus an abstention probability, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseProfile {
    class_probs: Vec<f64>,
    abstain_prob: f64,
}

impl ResponseProfile {
    /// Build a profile, checking every entry lies in [0, 1] and the total
    /// mass is 1 within floating-point tolerance.
    pub fn new(class_probs: Vec<f64>, abstain_prob: f64) -> Result<Self, WorldError> {
        if class_probs.is_empty() {
            return Err(invalid("profile", "profile needs at least one class"));
        }
        for (c, &p) in class_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(invalid(
                    "profile",
                    format!("class {c} probability {p} outside [0, 1]"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&abstain_prob) || !abstain_prob.is_finite() {
            return Err(invalid(
                "profile",
                format!("abstain probability {abstain_prob} outside [0, 1]"),
            ));
        }
        let total: f64 = class_probs.iter().sum::<f64>() + abstain_prob;
        if (total - 1.0).abs() > MASS_EPSILON {
            return Err(invalid(
                "profile",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        Ok(ResponseProfile {
            class_probs,
            abstain_prob,
        })
    }

    /// Deterministic profile: all mass on a single class.
    pub fn one_hot(class_count: usize, label: Label) -> Self {
        let mut class_probs = vec![0.0; class_count];
        class_probs[label.0] = 1.0;
        ResponseProfile {
            class_probs,
            abstain_prob: 0.0,
        }
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn abstain_prob(&self) -> f64 {
        self.abstain_prob
    }

    /// The class with the highest probability; ties break toward the lowest
    /// class index so the result is order-independent and reproducible.
    pub fn argmax(&self) -> Label {
        let mut best = 0usize;
        for (c, &p) in self.class_probs.iter().enumerate().skip(1) {
            if p > self.class_probs[best] {
                best = c;
            }
        }
        Label(best)
    }

    pub fn max_class_prob(&self) -> f64 {
        self.class_probs[self.argmax().0]
    }

    /// Probability mass on classes other than `truth` — the per-query chance
    /// a sampling defender commits an error on this point.
    pub fn mistake_mass(&self, truth: Label) -> f64 {
        self.class_probs
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != truth.0)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Draw one response from the profile. Never produces `Rejected`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Response {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, &p) in self.class_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Response::Class(Label(c));
            }
        }
        // The residual tail is abstention mass; when there is none, the
        // draw fell into floating-point slack past the last class.
        if self.abstain_prob > 0.0 {
            Response::Abstain
        } else {
            Response::Class(self.argmax())
        }
    }
}

/// One point of the world: identity, ground truth, and model behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPoint {
    pub id: PointId,
    pub true_label: Label,
    pub profile: ResponseProfile,
}

/// A fully built world: every point with its label and profile, plus the
/// traffic parameters shared by all episodes run against it.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    class_count: usize,
    duplicate_rate: f64,
    /// Fraction of points whose argmax class differs from the true label —
    /// the error rate a deterministic defender shows to uniform traffic.
    natural_error_rate: f64,
    points: Vec<WorldPoint>,
}

impl WorldModel {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duplicate_rate(&self) -> f64 {
        self.duplicate_rate
    }

    pub fn natural_error_rate(&self) -> f64 {
        self.natural_error_rate
    }

    pub fn point(&self, id: PointId) -> Option<&WorldPoint> {
        self.points.get(id.0)
    }

    pub fn points(&self) -> impl Iterator<Item = &WorldPoint> {
        self.points.iter()
    }

    /// Number of points on which the argmax class is wrong.
    pub fn mistake_point_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| p.profile.argmax() != p.true_label)
            .count()
    }

    /// Largest per-point mistake mass — the best per-query error rate any
    /// replay attack can sustain against a profile-sampling defender.
    pub fn max_mistake_mass(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.profile.mistake_mass(p.true_label))
            .fold(0.0, f64::max)
    }

    /// Average per-point mistake mass — the error rate a profile-sampling
    /// defender shows to uniform traffic.
    pub fn mean_mistake_mass(&self) -> f64 {
        let total: f64 = self
            .points
            .iter()
            .map(|p| p.profile.mistake_mass(p.true_label))
            .sum();
        total / self.points.len() as f64
    }

    /// Uniform i.i.d. draw over the point population. This is the draw
    /// adversarial probing uses.
    pub fn uniform_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PointId {
        PointId(rng.random_range(0..self.points.len()))
    }

    /// One step of the natural traffic process: with probability
    /// `duplicate_rate` repeat the previous query (benign duplicates, e.g.
    /// the same e-mail delivered to two users), otherwise draw uniformly.
    /// The first query of an episode has no previous point and is always a
    /// uniform draw.
    pub fn natural_draw<R: Rng + ?Sized>(&self, rng: &mut R, previous: Option<PointId>) -> PointId {
        if let Some(prev) = previous {
            if self.duplicate_rate > 0.0 && rng.random::<f64>() < self.duplicate_rate {
                return prev;
            }
        }
        self.uniform_draw(rng)
    }
}

/// How point profiles are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileKind {
    /// Every point answers one fixed class: the true label, except on the
    /// configured fraction of mistake points, which answer a wrong class.
    Deterministic,
    /// Points are partitioned into strata, each defining a response
    /// distribution shape relative to the point's true label.
    Stochastic { strata: Vec<Stratum> },
}

/// Where a stratum's wrong-class probability mass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongMass {
    /// Spread evenly across all wrong classes.
    #[default]
    Uniform,
    /// All on a single wrong class, making that class the argmax whenever
    /// the wrong mass exceeds the true-class probability.
    Concentrated,
}

/// One stratum of a stochastic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stratum {
    /// Fraction of the point population in this stratum. Fractions across
    /// strata must sum to 1; the last stratum absorbs rounding remainders.
    pub fraction: f64,
    /// Probability the model answers the true label.
    pub true_prob: f64,
    /// Probability the model abstains.
    #[serde(default)]
    pub abstain_prob: f64,
    /// Placement of the remaining (wrong-class) mass.
    #[serde(default)]
    pub wrong_mass: WrongMass,
}

/// Declarative description of a world, as found in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    /// Number of classes (at least 2).
    pub classes: usize,
    /// Number of points in the population.
    pub points: usize,
    /// Fraction of mistake points. Required for the deterministic profile,
    /// rejected for stochastic profiles (their mistakes come from strata).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    pub profile: ProfileKind,
    /// Probability a natural-traffic query repeats the previous one.
    #[serde(default)]
    pub duplicate_rate: f64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.classes < 2 {
            return Err(invalid("world.classes", "need at least two classes"));
        }
        if self.points == 0 {
            return Err(invalid(
                "world.points",
                "world must contain at least one point",
            ));
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return Err(invalid(
                "world.duplicate_rate",
                format!("{} is outside [0, 1]", self.duplicate_rate),
            ));
        }
        match &self.profile {
            ProfileKind::Deterministic => match self.error_rate {
                None => Err(invalid(
                    "world.error_rate",
                    "required when profile is deterministic",
                )),
                Some(r) if !(0.0..=1.0).contains(&r) => Err(invalid(
                    "world.error_rate",
                    format!("{r} is outside [0, 1]"),
                )),
                Some(_) => Ok(()),
            },
            ProfileKind::Stochastic { strata } => {
                if self.error_rate.is_some() {
                    return Err(invalid(
                        "world.error_rate",
                        "not allowed with a stochastic profile; error mass comes from strata",
                    ));
                }
                if strata.is_empty() {
                    return Err(invalid(
                        "world.profile.strata",
                        "at least one stratum required",
                    ));
                }
                let mut total_fraction = 0.0;
                for (i, s) in strata.iter().enumerate() {
                    let key = |field: &str| format!("world.profile.strata[{i}].{field}");
                    if !(0.0..=1.0).contains(&s.fraction) {
                        return Err(invalid(
                            key("fraction"),
                            format!("{} is outside [0, 1]", s.fraction),
                        ));
                    }
                    if !(0.0..=1.0).contains(&s.true_prob) {
                        return Err(invalid(
                            key("true_prob"),
                            format!("{} is outside [0, 1]", s.true_prob),
                        ));
                    }
                    if !(0.0..=1.0).contains(&s.abstain_prob) {
                        return Err(invalid(
                            key("abstain_prob"),
                            format!("{} is outside [0, 1]", s.abstain_prob),
                        ));
                    }
                    if s.true_prob + s.abstain_prob > 1.0 + MASS_EPSILON {
                        return Err(invalid(
                            key("true_prob"),
                            format!(
                                "true_prob {} + abstain_prob {} exceeds 1",
                                s.true_prob, s.abstain_prob
                            ),
                        ));
                    }
                    total_fraction += s.fraction;
                }
                if (total_fraction - 1.0).abs() > FRACTION_EPSILON {
                    return Err(invalid(
                        "world.profile.strata",
                        format!("fractions sum to {total_fraction}, expected 1"),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Build a concrete world from its spec.
///
/// True labels cycle through the classes by point index. For deterministic
/// worlds the first `round(error_rate * points)` points are mistake points,
/// each answering a wrong class drawn uniformly from `rng`; stochastic
/// worlds consume no randomness (concentrated wrong mass goes on the class
/// after the true one, cyclically). Realized mistake fractions can differ
/// from the configured rate by rounding; the built world records what was
/// actually realized.
pub fn build_world<R: Rng + ?Sized>(
    spec: &WorldSpec,
    rng: &mut R,
) -> Result<WorldModel, WorldError> {
    spec.validate()?;
    let k = spec.classes;
    let n = spec.points;
    let mut points = Vec::with_capacity(n);
    match &spec.profile {
        ProfileKind::Deterministic => {
            let r = spec
                .error_rate
                .expect("validated: deterministic requires error_rate");
            let mistakes = (r * n as f64).round() as usize;
            if r > 0.0 && mistakes == 0 {
                log::warn!(
                    "error_rate {r} rounds to zero mistake points among {n}; \
                     building a world without mistakes"
                );
            }
            for id in 0..n {
                let truth = Label(id % k);
                let predicted = if id < mistakes {
                    let offset = rng.random_range(1..k);
                    Label((truth.0 + offset) % k)
                } else {
                    truth
                };
                points.push(WorldPoint {
                    id: PointId(id),
                    true_label: truth,
                    profile: ResponseProfile::one_hot(k, predicted),
                });
            }
        }
        ProfileKind::Stochastic { strata } => {
            let mut counts = Vec::with_capacity(strata.len());
            let mut assigned = 0usize;
            for (i, s) in strata.iter().enumerate() {
                let count = if i + 1 == strata.len() {
                    n.checked_sub(assigned).ok_or_else(|| {
                        invalid(
                            "world.profile.strata",
                            format!("fractions round to more than {n} points"),
                        )
                    })?
                } else {
                    (s.fraction * n as f64).round() as usize
                };
                if s.fraction > 0.0 && count == 0 {
                    log::warn!(
                        "stratum {i} fraction {} rounds to zero points among {n}",
                        s.fraction
                    );
                }
                counts.push(count);
                assigned += count;
            }
            let mut id = 0usize;
            for (s, &count) in strata.iter().zip(&counts) {
                for _ in 0..count {
                    let truth = Label(id % k);
                    points.push(WorldPoint {
                        id: PointId(id),
                        true_label: truth,
                        profile: stratum_profile(k, truth, s)?,
                    });
                    id += 1;
                }
            }
        }
    }
    let mismatches = points
        .iter()
        .filter(|p| p.profile.argmax() != p.true_label)
        .count();
    Ok(WorldModel {
        class_count: k,
        duplicate_rate: spec.duplicate_rate,
        natural_error_rate: mismatches as f64 / n as f64,
        points,
    })
}

fn stratum_profile(k: usize, truth: Label, s: &Stratum) -> Result<ResponseProfile, WorldError> {
    let wrong_total = (1.0 - s.true_prob - s.abstain_prob).max(0.0);
    let mut class_probs = vec![0.0; k];
    class_probs[truth.0] = s.true_prob;
    match s.wrong_mass {
        WrongMass::Concentrated => {
            class_probs[(truth.0 + 1) % k] = wrong_total;
        }
        WrongMass::Uniform => {
            let share = wrong_total / (k - 1) as f64;
            for (c, p) in class_probs.iter_mut().enumerate() {
                if c != truth.0 {
                    *p = share;
                }
            }
        }
    }
    ResponseProfile::new(class_probs, s.abstain_prob)
}
