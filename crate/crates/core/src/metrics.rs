//! Per-episode metrics computed from a transcript.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Response, Transcript};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot compute metrics for an empty transcript")]
    EmptyTranscript,
}

/// Summary counts and rates for one episode.
///
/// Rates are over all queries in the transcript, including rejected ones:
/// a rejection consumes one of the attacker's `m_test` interactions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Total queries in the episode.
    pub m_test: usize,
    pub errors: usize,
    pub abstentions: usize,
    pub rejections: usize,
    pub targeted_hits: usize,
    /// errors / m_test.
    pub error_rate: f64,
    /// abstentions / m_test.
    pub abstention_rate: f64,
    /// targeted_hits / m_test.
    pub targeted_rate: f64,
    /// Zero-based index of the first erroneous response, if any.
    pub first_mistake_index: Option<usize>,
    /// Number of distinct points queried during the episode.
    pub unique_points_queried: usize,
}

/// Compute episode metrics from a transcript.
pub fn compute_metrics(transcript: &Transcript) -> Result<Metrics, MetricsError> {
    if transcript.is_empty() {
        return Err(MetricsError::EmptyTranscript);
    }
    let m_test = transcript.len();
    let mut errors = 0usize;
    let mut abstentions = 0usize;
    let mut rejections = 0usize;
    let mut targeted_hits = 0usize;
    let mut first_mistake_index = None;
    let mut unique_points_queried = 0usize;
    for record in &transcript.records {
        if record.is_error {
            errors += 1;
            if first_mistake_index.is_none() {
                first_mistake_index = Some(record.index);
            }
        }
        match record.response {
            Response::Abstain => abstentions += 1,
            Response::Rejected => rejections += 1,
            Response::Class(_) => {}
        }
        if record.is_targeted_hit {
            targeted_hits += 1;
        }
        if !record.is_repeat {
            unique_points_queried += 1;
        }
    }
    let m = m_test as f64;
    Ok(Metrics {
        m_test,
        errors,
        abstentions,
        rejections,
        targeted_hits,
        error_rate: errors as f64 / m,
        abstention_rate: abstentions as f64 / m,
        targeted_rate: targeted_hits as f64 / m,
        first_mistake_index,
        unique_points_queried,
    })
}

/// Error rate over the last `window` queries (or the whole transcript when
/// shorter). Useful for reading off asymptotic behavior of adaptive attacks.
pub fn trailing_error_rate(transcript: &Transcript, window: usize) -> Result<f64, MetricsError> {
    trailing_rate(transcript, window, |r| r.is_error)
}

/// Abstention rate over the last `window` queries.
pub fn trailing_abstention_rate(
    transcript: &Transcript,
    window: usize,
) -> Result<f64, MetricsError> {
    trailing_rate(transcript, window, |r| {
        matches!(r.response, Response::Abstain)
    })
}

fn trailing_rate(
    transcript: &Transcript,
    window: usize,
    pred: impl Fn(&crate::types::TranscriptRecord) -> bool,
) -> Result<f64, MetricsError> {
    if transcript.is_empty() || window == 0 {
        return Err(MetricsError::EmptyTranscript);
    }
    let start = transcript.len().saturating_sub(window);
    let tail = &transcript.records[start..];
    let hits = tail.iter().filter(|r| pred(r)).count();
    Ok(hits as f64 / tail.len() as f64)
}
