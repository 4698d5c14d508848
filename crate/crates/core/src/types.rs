//! Shared vocabulary for the query game: labels, points, queries, responses,
//! and the transcript that records one episode of interaction.

use serde::{Deserialize, Serialize};

/// A class label. Worlds with `k` classes use labels `0..k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub usize);

/// Identifier of a point in the finite world. Points are indexed `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub usize);

/// How the attacker produced a query: by sampling a fresh point from the
/// world, or by replaying a point it has already seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    FreshProbe,
    Replay,
}

/// One query submitted to the defender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub point_id: PointId,
    pub origin: QueryOrigin,
}

/// The defender's answer to a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// A committed class prediction.
    Class(Label),
    /// The defender declined to predict.
    Abstain,
    /// The query was refused before reaching the model (e.g. over budget).
    Rejected,
}

impl Response {
    /// True when the response is a class prediction differing from `truth`.
    /// Abstentions and rejections are never errors.
    pub fn is_error_against(&self, truth: Label) -> bool {
        matches!(self, Response::Class(label) if *label != truth)
    }
}

/// One step of an episode: the query, the response, and derived flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    /// Zero-based position of this step within the episode.
    pub index: usize,
    pub query: Query,
    pub response: Response,
    /// The point's true label at the time of the query.
    pub true_label: Label,
    /// Response was a class prediction that differs from the true label.
    pub is_error: bool,
    /// Response equals the attacker's target class on a point whose true
    /// label differs from the target. Always false when there is no target.
    pub is_targeted_hit: bool,
    /// The queried point appeared earlier in this episode.
    pub is_repeat: bool,
}

/// Full record of one episode, in query order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn with_capacity(capacity: usize) -> Self {
        Transcript {
            records: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_flag_only_for_mismatched_class() {
        let truth = Label(3);
        assert!(Response::Class(Label(1)).is_error_against(truth));
        assert!(!Response::Class(Label(3)).is_error_against(truth));
        assert!(!Response::Abstain.is_error_against(truth));
        assert!(!Response::Rejected.is_error_against(truth));
    }

    #[test]
    fn ids_serialize_transparently() {
        let json = serde_json::to_string(&PointId(7)).unwrap();
        assert_eq!(json, "7");
        let back: PointId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PointId(7));
    }

    #[test]
    fn response_roundtrips_through_json() {
        for response in [
            Response::Class(Label(2)),
            Response::Abstain,
            Response::Rejected,
        ] {
            let json = serde_json::to_string(&response).unwrap();
            let back: Response = serde_json::from_str(&json).unwrap();
            assert_eq!(back, response);
        }
    }
}
