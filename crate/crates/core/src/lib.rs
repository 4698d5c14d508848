//! Simulation framework for repeated-query attacks on classifiers.
//!
//! A *world* is a finite population of labeled points, each carrying a
//! response profile that describes how a fixed model answers queries on
//! it. A *defender* wraps that model with optional protective layers
//! (confidence thresholds, memorization of past queries, rate limits).
//! An *attacker* submits queries one at a time — some behave like
//! ordinary users, others hunt for a point the model gets wrong and
//! then replay it. The *engine* plays attacker against defender for a
//! fixed number of query steps per episode and records a transcript;
//! *metrics* summarizes transcripts, and *analytics* provides the
//! closed-form error-rate formulas those summaries are compared
//! against.
//!
//! Module map:
//!
//! - [`types`]: labels, point ids, queries, responses, transcripts.
//! - [`seed`]: deterministic per-episode, per-role RNG substreams.
//! - [`world`]: populations of points and their response profiles.
//! - [`defenders`]: base models plus composable defense wrappers.
//! - [`attackers`]: query strategies from natural traffic to replay.
//! - [`engine`]: episode loop, parallel Monte Carlo, summaries.
//! - [`metrics`]: per-transcript counting and trailing-window rates.
//! - [`analytics`]: closed-form predictions and simulation reports.

pub mod analytics;
pub mod attackers;
pub mod defenders;
pub mod engine;
pub mod metrics;
pub mod seed;
pub mod types;
pub mod world;

pub use analytics::{
    compare, compare_with_workers, exact_expected_error_rate, expected_trials,
    naive_attack_error_rate, naive_attack_error_rate_inclusive, required_r, targeted_rate_approx,
    AnalyticReport, AnalyticsError, ReportRow,
};
pub use attackers::{Attacker, AttackerError, AttackerSpec, Feedback};
pub use defenders::{
    BaseDefender, Defender, DefenderError, DefenderSpec, MemorizationMode, WrapperSpec,
};
pub use engine::{
    monte_carlo, monte_carlo_with_workers, run_episode, EngineError, MonteCarloSummary,
    ScenarioConfig, SummaryStat,
};
pub use metrics::{
    compute_metrics, trailing_abstention_rate, trailing_error_rate, Metrics, MetricsError,
};
pub use seed::{SeedSpec, StreamRole};
pub use types::{Label, PointId, Query, QueryOrigin, Response, Transcript, TranscriptRecord};
pub use world::{
    build_world, ProfileKind, ResponseProfile, Stratum, WorldError, WorldModel, WorldPoint,
    WorldSpec, WrongMass,
};
