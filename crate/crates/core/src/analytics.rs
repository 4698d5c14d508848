//! Closed-form calculators for the replay-attack error process, plus a
//! comparison harness that checks them against seeded Monte Carlo runs.
//!
//! The central quantity: an attacker probes i.i.d. until the first mistake
//! (a geometric number of trials T with success probability r, the
//! defender's natural error rate) and then replays that mistake for the
//! rest of its m_test queries. Three estimates of the resulting error rate
//! are provided, from crudest to exact:
//!
//! * naive: (m − 1/r)/m — plugs the expected trial count into the tail
//!   length, not counting the discovering probe itself;
//! * naive inclusive: (m − 1/r + 1)/m — same, counting the discovering
//!   probe as an error too;
//! * exact: E[(m − T + 1)⁺]/m by explicit summation — handles both the
//!   discovering probe and the truncation at episodes that never find a
//!   mistake.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attackers::AttackerSpec;
use crate::defenders::{BaseDefender, MemorizationMode, WrapperSpec};
use crate::engine::{map_episodes, EngineError, MonteCarloSummary, ScenarioConfig, SummaryStat};
use crate::metrics::{compute_metrics, trailing_error_rate};
use crate::types::{Label, QueryOrigin};
use crate::world::{ProfileKind, WorldModel};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("`{quantity}` = {value} is outside {domain}")]
    OutOfDomain {
        quantity: &'static str,
        value: f64,
        domain: &'static str,
    },
}

/// Expected number of i.i.d. probes to the first mistake: 1/r.
pub fn expected_trials(r: f64) -> Result<f64, AnalyticsError> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(AnalyticsError::OutOfDomain {
            quantity: "error_rate",
            value: r,
            domain: "(0, 1]",
        });
    }
    Ok(1.0 / r)
}

/// Replay-attack error rate by the plain plug-in argument: the attack
/// spends 1/r queries finding the mistake and errs on the remaining
/// m − 1/r, so the rate is (m − 1/r)/m, clamped below at zero. The
/// discovering probe itself is not counted.
pub fn naive_attack_error_rate(r: f64, m_test: usize) -> f64 {
    let m = m_test as f64;
    ((m - 1.0 / r) / m).max(0.0)
}

/// Same plug-in argument, but counting the discovering probe as an error:
/// (m − 1/r + 1)/m, clamped to [0, 1].
pub fn naive_attack_error_rate_inclusive(r: f64, m_test: usize) -> f64 {
    let m = m_test as f64;
    ((m - 1.0 / r + 1.0) / m).clamp(0.0, 1.0)
}

/// Exact expected error rate of the replay attack over m_test queries:
/// E[errors]/m where errors = m − T + 1 when the geometric first-mistake
/// trial T lands within the episode and 0 otherwise, computed by forward
/// summation Σ_{t=1..m} (1−r)^{t−1} · r · (m − t + 1)/m.
pub fn exact_expected_error_rate(r: f64, m_test: usize) -> f64 {
    debug_assert!((0.0..=1.0).contains(&r), "error rate {r} outside [0, 1]");
    let m = m_test as f64;
    let q = 1.0 - r;
    let mut weight = 1.0; // (1−r)^{t−1}
    let mut total = 0.0;
    for t in 1..=m_test {
        total += weight * r * (m - t as f64 + 1.0) / m;
        weight *= q;
        if weight < f64::MIN_POSITIVE {
            // Remaining terms are bounded by the remaining geometric tail
            // mass, which is below representable precision.
            break;
        }
    }
    total
}

/// The same summation evaluated in reverse term order. Exists to check the
/// forward evaluation's floating-point robustness; the two must agree to
/// ~1e−10 on any sane input.
pub fn exact_expected_error_rate_reverse_sum(r: f64, m_test: usize) -> f64 {
    debug_assert!((0.0..=1.0).contains(&r), "error rate {r} outside [0, 1]");
    let m = m_test as f64;
    let q = 1.0 - r;
    let mut total = 0.0;
    for t in (1..=m_test).rev() {
        let weight = q.powi((t - 1) as i32);
        if weight == 0.0 {
            continue;
        }
        total += weight * r * (m - t as f64 + 1.0) / m;
    }
    total
}

/// The natural error rate a model must reach so the replay attack's naive
/// error rate stays at `target`: inverts (m − 1/r)/m = target into
/// r = 1/(m·(1 − target)).
pub fn required_r(target_error_rate: f64, m_test: usize) -> Result<f64, AnalyticsError> {
    if !(0.0..1.0).contains(&target_error_rate) {
        return Err(AnalyticsError::OutOfDomain {
            quantity: "target_error_rate",
            value: target_error_rate,
            domain: "[0, 1)",
        });
    }
    Ok(1.0 / (m_test as f64 * (1.0 - target_error_rate)))
}

/// Rough model for the per-probe rate of mistakes as one specific target
/// class: r/k (divide the overall mistake rate evenly among classes).
pub fn targeted_rate_approx(r: f64, k: usize) -> f64 {
    r / k as f64
}

/// The realized per-probe targeted rate in a built world: the fraction of
/// points whose argmax answer is exactly `target` while their true label is
/// not. This is the ground truth the r/k model approximates.
pub fn measured_targeted_rate(world: &WorldModel, target: Label) -> f64 {
    let hits = world
        .points()
        .filter(|p| p.profile.argmax() == target && p.true_label != target)
        .count();
    hits as f64 / world.len() as f64
}

/// Best error rate any replay strategy can sustain against a
/// profile-sampling defender: the maximum per-point mistake mass.
pub fn stochastic_asymptote(world: &WorldModel) -> f64 {
    world.max_mistake_mass()
}

/// One comparison between a closed-form prediction and measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    /// Closed-form prediction, when one exists.
    pub closed_form: Option<f64>,
    /// Independent non-simulation value (exact summation, world census).
    pub oracle: Option<f64>,
    pub mc_estimate: Option<f64>,
    pub mc_ci95_half_width: Option<f64>,
    /// Human-readable statement of the agreement tolerance applied.
    pub tolerance: String,
    pub agrees: bool,
}

/// Closed-form vs Monte Carlo comparison for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReport {
    pub scenario: String,
    /// True when the scenario has no closed-form counterpart; rows then
    /// carry at most inequality checks.
    pub simulation_only: bool,
    pub rows: Vec<ReportRow>,
    pub summary: MonteCarloSummary,
}

impl AnalyticReport {
    pub fn all_agree(&self) -> bool {
        self.rows.iter().all(|row| row.agrees)
    }

    /// Plain-text table for terminal output and report files.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario);
        let _ = writeln!(
            out,
            "mode: {}",
            if self.simulation_only {
                "simulation-only"
            } else {
                "closed-form comparison"
            }
        );
        let _ = writeln!(
            out,
            "{:<38} {:>14} {:>14} {:>14} {:>12}  {:<6} tolerance",
            "quantity", "closed_form", "oracle", "mc_estimate", "mc_ci95", "agrees"
        );
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "-".to_string(),
        };
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<38} {:>14} {:>14} {:>14} {:>12}  {:<6} {}",
                row.quantity,
                fmt(row.closed_form),
                fmt(row.oracle),
                fmt(row.mc_estimate),
                fmt(row.mc_ci95_half_width),
                row.agrees,
                row.tolerance,
            );
        }
        let _ = writeln!(
            out,
            "episodes: {}   mean error_rate: {:.6}   mean abstention_rate: {:.6}",
            self.summary.episodes, self.summary.error_rate.mean, self.summary.abstention_rate.mean
        );
        out
    }
}

/// Agreement tolerance for the rate-tracking asymptote (matches the
/// convergence claim tested at m_test = 10⁵).
const ASYMPTOTE_TOLERANCE: f64 = 0.05;

/// Run the scenario's Monte Carlo and compare it against every closed form
/// the scenario has. Unrecognized scenario shapes come back marked
/// simulation-only with an empty comparison table. World-derived closed
/// forms use the shared (episode-0) world.
pub fn compare(config: &ScenarioConfig) -> Result<AnalyticReport, EngineError> {
    compare_with_workers(config, 0)
}

pub fn compare_with_workers(
    config: &ScenarioConfig,
    workers: usize,
) -> Result<AnalyticReport, EngineError> {
    config.validate()?;
    let world = config.build_scenario_world(0)?;
    // Trailing window for convergence rows: the final 10% of each episode.
    let window = (config.m_test / 10).max(1);
    let results = map_episodes(config, workers, |_, t| {
        let metrics = compute_metrics(t)?;
        let trailing = trailing_error_rate(t, window)?;
        let mut replays = 0u64;
        let mut replay_hits = 0u64;
        for record in &t.records {
            if record.query.origin == QueryOrigin::Replay {
                replays += 1;
                if record.is_targeted_hit {
                    replay_hits += 1;
                }
            }
        }
        Ok((metrics, trailing, replays, replay_hits))
    })?;
    let trailing: Vec<f64> = results.iter().map(|&(_, tr, _, _)| tr).collect();
    let total_replays: u64 = results.iter().map(|&(_, _, n, _)| n).sum();
    let total_replay_hits: u64 = results.iter().map(|&(_, _, _, h)| h).sum();
    let summary =
        MonteCarloSummary::from_metrics(results.into_iter().map(|(m, _, _, _)| m).collect());

    let mut rows = Vec::new();
    let mut simulation_only = false;
    let r = world.natural_error_rate();
    let m = config.m_test;
    let bare_deterministic = config.defender.base == BaseDefender::FixedDeterministic
        && config.defender.wrappers.is_empty();
    // Repeated queries are decided by the outermost memorization wrapper;
    // anything stacked inside it never sees them. Only the abstaining
    // variant caps the replay attack at the natural rate; randomized
    // replies keep erring on replays at (k-1)/k.
    let outermost_memorization = config.defender.wrappers.iter().find_map(|w| match w {
        WrapperSpec::Memorization { mode } => Some(*mode),
        _ => None,
    });
    let has_abstain_memorization = outermost_memorization == Some(MemorizationMode::Abstain);
    // A replay answered uniformly at random requires the randomizing
    // memorization to sit in front of every other wrapper.
    let leads_with_uniform_memorization = matches!(
        config.defender.wrappers.first(),
        Some(WrapperSpec::Memorization {
            mode: MemorizationMode::UniformRandom
        })
    );
    let no_rate_limit = !config
        .defender
        .wrappers
        .iter()
        .any(|w| matches!(w, WrapperSpec::RateLimit { .. }));
    let deterministic_world = matches!(config.world.profile, ProfileKind::Deterministic);

    match &config.attacker {
        AttackerSpec::NaturalUser if bare_deterministic && deterministic_world => {
            rows.push(ci_row("error_rate", r, &summary.error_rate));
        }
        AttackerSpec::TestSet { target: None } if bare_deterministic && deterministic_world => {
            if r > 0.0 {
                let trials = 1.0 / r;
                rows.push(trials_row(trials, &summary));
                let exact = exact_expected_error_rate(r, m);
                let naive = naive_attack_error_rate(r, m);
                let inclusive = naive_attack_error_rate_inclusive(r, m);
                let slack = 2.0 / (r * m as f64);
                rows.push(ReportRow {
                    quantity: "error_rate_naive".into(),
                    closed_form: Some(naive),
                    oracle: Some(exact),
                    mc_estimate: None,
                    mc_ci95_half_width: None,
                    tolerance: format!("relative {slack:.3e} vs exact"),
                    agrees: (naive - exact).abs() <= exact * slack,
                });
                rows.push(ReportRow {
                    quantity: "error_rate_naive_inclusive".into(),
                    closed_form: Some(inclusive),
                    oracle: Some(exact),
                    mc_estimate: None,
                    mc_ci95_half_width: None,
                    tolerance: format!("relative {slack:.3e} vs exact"),
                    agrees: (inclusive - exact).abs() <= exact * slack,
                });
                let mut row = ci_row("error_rate_exact", exact, &summary.error_rate);
                row.oracle = Some(exact_expected_error_rate_reverse_sum(r, m));
                rows.push(row);
            } else {
                simulation_only = true;
            }
        }
        AttackerSpec::TestSet { target: Some(t) } if bare_deterministic && deterministic_world => {
            let measured = measured_targeted_rate(&world, *t);
            let approx = targeted_rate_approx(r, world.class_count());
            // The rough model spreads r·N mistakes evenly over k classes;
            // the realized per-class count is binomial-ish around that, so
            // allow three standard deviations of the count plus one point.
            let n = world.len() as f64;
            let rough_band = (3.0 * (r * n).sqrt() + 1.0) / n;
            rows.push(ReportRow {
                quantity: "targeted_hit_rate_fresh_probe".into(),
                closed_form: Some(approx),
                oracle: Some(measured),
                mc_estimate: None,
                mc_ci95_half_width: None,
                tolerance: format!("rough r/k model, band {rough_band:.3e}"),
                agrees: (approx - measured).abs() <= rough_band,
            });
            if measured > 0.0 {
                let exact = exact_expected_error_rate(measured, m);
                rows.push(ci_row("targeted_rate", exact, &summary.targeted_rate));
            }
        }
        AttackerSpec::TestSet { target: Some(_) }
            if leads_with_uniform_memorization && total_replays >= 1_000 =>
        {
            // Once locked, every replay is answered by the memorization
            // wrapper with a uniform class draw, so targeted hits on
            // replays are a 1-in-k lottery whatever sits beneath it.
            let k = world.class_count() as f64;
            let p = 1.0 / k;
            let p_hat = total_replay_hits as f64 / total_replays as f64;
            let half_width = 1.96 * (p * (1.0 - p) / total_replays as f64).sqrt();
            rows.push(ReportRow {
                quantity: "targeted_hit_rate_on_replays".into(),
                closed_form: Some(p),
                oracle: None,
                mc_estimate: Some(p_hat),
                mc_ci95_half_width: Some(half_width),
                tolerance: "95% CI, binomial over pooled replays".into(),
                agrees: (p_hat - p).abs() <= half_width,
            });
        }
        AttackerSpec::TestSet { .. }
            if has_abstain_memorization
                && config.defender.base == BaseDefender::FixedDeterministic =>
        {
            // No closed form; the defense's guarantee is the inequality.
            simulation_only = true;
            rows.push(ReportRow {
                quantity: "error_rate_upper_bound".into(),
                closed_form: Some(r),
                oracle: None,
                mc_estimate: Some(summary.error_rate.mean),
                mc_ci95_half_width: Some(summary.error_rate.ci95_half_width),
                tolerance: "inequality: mean error rate ≤ natural rate".into(),
                agrees: summary.error_rate.mean <= r,
            });
        }
        AttackerSpec::RateTracking { .. }
            if config.defender.base == BaseDefender::FixedStochastic
                && config.defender.wrappers.is_empty() =>
        {
            let asymptote = stochastic_asymptote(&world);
            let trailing_stat = SummaryStat::from_values(&trailing).expect("at least one episode");
            rows.push(ReportRow {
                quantity: "trailing_error_rate".into(),
                closed_form: Some(asymptote),
                oracle: None,
                mc_estimate: Some(trailing_stat.mean),
                mc_ci95_half_width: Some(trailing_stat.ci95_half_width),
                tolerance: format!("absolute {ASYMPTOTE_TOLERANCE}"),
                agrees: (asymptote - trailing_stat.mean).abs() <= ASYMPTOTE_TOLERANCE,
            });
        }
        AttackerSpec::WhiteBox { screen_budget }
            if deterministic_world
                && no_rate_limit
                && world.mistake_point_count() >= m
                && screening_covers(
                    world.len(),
                    world.mistake_point_count(),
                    *screen_budget,
                    m,
                ) =>
        {
            rows.push(ReportRow {
                quantity: "error_rate".into(),
                closed_form: Some(1.0),
                oracle: None,
                mc_estimate: Some(summary.error_rate.mean),
                mc_ci95_half_width: Some(summary.error_rate.ci95_half_width),
                tolerance: "exact".into(),
                agrees: summary.error_rate.mean == 1.0,
            });
        }
        _ => {
            simulation_only = true;
        }
    }

    // The rate limiter's budget identity holds regardless of attacker.
    if let Some(WrapperSpec::RateLimit { budget }) = config
        .defender
        .wrappers
        .iter()
        .find(|w| matches!(w, WrapperSpec::RateLimit { .. }))
    {
        let expected = (*budget).min(m) as f64;
        let answered: Vec<f64> = summary
            .per_episode
            .iter()
            .map(|ep| (ep.m_test - ep.rejections) as f64)
            .collect();
        let stat = SummaryStat::from_values(&answered).expect("at least one episode");
        rows.push(ReportRow {
            quantity: "answered_queries".into(),
            closed_form: Some(expected),
            oracle: None,
            mc_estimate: Some(stat.mean),
            mc_ci95_half_width: Some(stat.ci95_half_width),
            tolerance: "exact".into(),
            agrees: stat.mean == expected && stat.std_dev == 0.0,
        });
    }

    Ok(AnalyticReport {
        scenario: config.name.clone(),
        simulation_only,
        rows,
        summary,
    })
}

/// Whether a screening budget is comfortably sufficient: the expected
/// number of mistake points the screen never draws must be at most 0.01,
/// so the walk over screened mistakes covers essentially every one.
fn screening_covers(
    population: usize,
    mistake_points: usize,
    screen_budget: usize,
    _m: usize,
) -> bool {
    let miss = (1.0 - 1.0 / population as f64).powf(screen_budget as f64);
    mistake_points as f64 * miss <= 0.01
}

/// Row comparing a closed form against an MC mean, agreeing when the
/// closed form lies within the 95% confidence half-width.
fn ci_row(quantity: &str, closed: f64, stat: &SummaryStat) -> ReportRow {
    ReportRow {
        quantity: quantity.into(),
        closed_form: Some(closed),
        oracle: None,
        mc_estimate: Some(stat.mean),
        mc_ci95_half_width: Some(stat.ci95_half_width),
        tolerance: "95% CI".into(),
        agrees: (closed - stat.mean).abs() <= stat.ci95_half_width,
    }
}

/// Expected-trials row: the Monte Carlo estimate is the mean first-mistake
/// index plus one (index is 0-based).
fn trials_row(trials: f64, summary: &MonteCarloSummary) -> ReportRow {
    match &summary.first_mistake_index {
        Some(stat) => ReportRow {
            quantity: "expected_trials_to_first_mistake".into(),
            closed_form: Some(trials),
            oracle: None,
            mc_estimate: Some(stat.mean + 1.0),
            mc_ci95_half_width: Some(stat.ci95_half_width),
            tolerance: "95% CI".into(),
            agrees: (trials - (stat.mean + 1.0)).abs() <= stat.ci95_half_width,
        },
        None => ReportRow {
            quantity: "expected_trials_to_first_mistake".into(),
            closed_form: Some(trials),
            oracle: None,
            mc_estimate: None,
            mc_ci95_half_width: None,
            tolerance: "no episode found a mistake".into(),
            agrees: false,
        },
    }
}
