//! Domain types shared by every service: token ids, model versions, spans,
//! trajectories and the canonical line-delimited trajectory record.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Vocabulary index of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Policy version. `0` is the initial policy; every weight sync increments it.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ModelVersion(pub u64);

impl ModelVersion {
    pub const INITIAL: ModelVersion = ModelVersion(0);

    pub fn next(self) -> ModelVersion {
        ModelVersion(self.0 + 1)
    }

    /// Number of versions `self` trails `current` by (zero when not behind).
    pub fn lag_behind(self, current: ModelVersion) -> u64 {
        current.0.saturating_sub(self.0)
    }
}

impl fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(SessionId);
string_id!(ResourceId);

/// Identifier of a dataloader task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task-{}", self.0)
    }
}

/// Who produced a run of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    AgentInput,
    ModelOutput,
}

impl Origin {
    pub fn is_trainable(self) -> bool {
        matches!(self, Origin::ModelOutput)
    }
}

/// Per-token bookkeeping carried alongside a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenMeta {
    pub origin: Origin,
    pub version: ModelVersion,
}

/// A maximal run of tokens sharing origin and version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub tokens: Vec<TokenId>,
    pub origin: Origin,
    /// For agent input this is the version current when the request was admitted.
    pub version: ModelVersion,
}

/// Generation parameters of one logical request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stop_token: Option<TokenId>,
}

impl GenParams {
    pub fn new(max_new_tokens: usize, seed: u64) -> Self {
        GenParams {
            max_new_tokens,
            seed,
            stop_token: None,
        }
    }
}

/// The unit consumed by a trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub session_id: SessionId,
    pub spans: Vec<TokenSpan>,
    pub loss_mask: Vec<bool>,
    pub version_tags: Vec<ModelVersion>,
}

impl Trajectory {
    /// Builds a trajectory from per-token metadata, grouping maximal runs into spans.
    pub fn from_tokens(session_id: SessionId, tokens: &[TokenId], meta: &[TokenMeta]) -> Self {
        assert_eq!(tokens.len(), meta.len(), "token/metadata length mismatch");
        let mut spans: Vec<TokenSpan> = Vec::new();
        for (tok, m) in tokens.iter().zip(meta) {
            match spans.last_mut() {
                Some(s) if s.origin == m.origin && s.version == m.version => s.tokens.push(*tok),
                _ => spans.push(TokenSpan {
                    tokens: vec![*tok],
                    origin: m.origin,
                    version: m.version,
                }),
            }
        }
        Trajectory {
            session_id,
            spans,
            loss_mask: meta.iter().map(|m| m.origin.is_trainable()).collect(),
            version_tags: meta.iter().map(|m| m.version).collect(),
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.spans.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.spans.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Oldest version among model-generated tokens, if any.
    pub fn oldest_model_version(&self) -> Option<ModelVersion> {
        self.spans
            .iter()
            .filter(|s| s.origin == Origin::ModelOutput)
            .map(|s| s.version)
            .min()
    }

    /// True when some generated token trails `current` by at least one version.
    pub fn is_stale(&self, current: ModelVersion) -> bool {
        self.oldest_model_version()
            .is_some_and(|v| v.lag_behind(current) >= 1)
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            session_id: self.session_id.clone(),
            tokens: self.tokens().iter().map(|t| t.0).collect(),
            loss_mask: self.loss_mask.iter().map(|&b| b as u8).collect(),
            versions: self.version_tags.iter().map(|v| v.0).collect(),
        }
    }
}

/// Canonical export record; one JSON object per line, fields in this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub session_id: SessionId,
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub versions: Vec<u64>,
}

impl TrajectoryRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory record serializes")
    }
}

/// Writes trajectories in the canonical line-delimited format.
pub fn write_trajectories<W: std::io::Write>(
    mut out: W,
    trajectories: &[Trajectory],
) -> std::io::Result<()> {
    for t in trajectories {
        writeln!(out, "{}", t.to_record().to_line())?;
    }
    Ok(())
}

/// A single broken trajectory invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch {
        tokens: usize,
        loss_mask: usize,
        version_tags: usize,
    },
    EmptySpan {
        span: usize,
    },
    LossMaskMismatch {
        position: usize,
    },
    SpanVersionMismatch {
        position: usize,
    },
    VersionDecrease {
        position: usize,
    },
    TokenOutOfVocab {
        position: usize,
        token: TokenId,
    },
}

impl Violation {
    /// The invariant this violation breaks.
    pub fn invariant(&self) -> &'static str {
        match self {
            Violation::LengthMismatch { .. } => "loss_mask and version_tags match token count",
            Violation::EmptySpan { .. } => "spans non-empty",
            Violation::LossMaskMismatch { .. } => "loss_mask true exactly on model_output tokens",
            Violation::SpanVersionMismatch { .. } => "version_tags agree with span versions",
            Violation::VersionDecrease { .. } => "version_tags non-decreasing",
            Violation::TokenOutOfVocab { .. } => "token ids below vocabulary size",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                tokens,
                loss_mask,
                version_tags,
            } => write!(
                f,
                "{}: {tokens} tokens, {loss_mask} mask entries, {version_tags} version tags",
                self.invariant()
            ),
            Violation::EmptySpan { span } => write!(f, "{} (span {span})", self.invariant()),
            Violation::LossMaskMismatch { position }
            | Violation::SpanVersionMismatch { position }
            | Violation::VersionDecrease { position } => {
                write!(f, "{} (position {position})", self.invariant())
            }
            Violation::TokenOutOfVocab { position, token } => {
                write!(f, "{} (token {token} at {position})", self.invariant())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a trajectory. `vocab_size` enables the
/// token range check.
pub fn validate_trajectory(t: &Trajectory, vocab_size: Option<u32>) -> ValidationReport {
    let mut violations = Vec::new();
    let n = t.len();
    if t.loss_mask.len() != n || t.version_tags.len() != n {
        violations.push(Violation::LengthMismatch {
            tokens: n,
            loss_mask: t.loss_mask.len(),
            version_tags: t.version_tags.len(),
        });
    }
    let mut pos = 0;
    for (i, span) in t.spans.iter().enumerate() {
        if span.tokens.is_empty() {
            violations.push(Violation::EmptySpan { span: i });
        }
        for tok in &span.tokens {
            if let Some(&m) = t.loss_mask.get(pos) {
                if m != span.origin.is_trainable() {
                    violations.push(Violation::LossMaskMismatch { position: pos });
                }
            }
            if let Some(&v) = t.version_tags.get(pos) {
                if v != span.version {
                    violations.push(Violation::SpanVersionMismatch { position: pos });
                }
            }
            if let Some(vocab) = vocab_size {
                if tok.0 >= vocab {
                    violations.push(Violation::TokenOutOfVocab {
                        position: pos,
                        token: *tok,
                    });
                }
            }
            pos += 1;
        }
    }
    for (i, w) in t.version_tags.windows(2).enumerate() {
        if w[1] < w[0] {
            violations.push(Violation::VersionDecrease { position: i + 1 });
        }
    }
    ValidationReport { violations }
}

pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(origin: Origin, v: u64) -> TokenMeta {
        TokenMeta {
            origin,
            version: ModelVersion(v),
        }
    }

    #[test]
    fn minimal_model_output_is_valid() {
        let t = Trajectory::from_tokens(
            "s".into(),
            &tokens(&[5, 6, 7]),
            &[meta(Origin::ModelOutput, 0); 3],
        );
        assert_eq!(t.loss_mask, vec![true, true, true]);
        assert!(validate_trajectory(&t, Some(100)).is_ok());
    }

    #[test]
    fn decreasing_versions_are_reported() {
        let t = Trajectory::from_tokens(
            "s".into(),
            &tokens(&[1, 2]),
            &[meta(Origin::ModelOutput, 1), meta(Origin::ModelOutput, 0)],
        );
        let report = validate_trajectory(&t, None);
        assert_eq!(report.violations, vec![Violation::VersionDecrease { position: 1 }]);
        assert_eq!(report.violations[0].invariant(), "version_tags non-decreasing");
    }

    #[test]
    fn every_violation_is_enumerated() {
        let t = Trajectory {
            session_id: "s".into(),
            spans: vec![
                TokenSpan {
                    tokens: vec![TokenId(900)],
                    origin: Origin::AgentInput,
                    version: ModelVersion(2),
                },
                TokenSpan {
                    tokens: vec![],
                    origin: Origin::ModelOutput,
                    version: ModelVersion(1),
                },
            ],
            loss_mask: vec![true],
            version_tags: vec![ModelVersion(2)],
        };
        let report = validate_trajectory(&t, Some(100));
        assert!(report.violations.contains(&Violation::EmptySpan { span: 1 }));
        assert!(report
            .violations
            .contains(&Violation::LossMaskMismatch { position: 0 }));
        assert!(report.violations.contains(&Violation::TokenOutOfVocab {
            position: 0,
            token: TokenId(900)
        }));
    }

    #[test]
    fn spans_group_maximal_runs() {
        let t = Trajectory::from_tokens(
            "s".into(),
            &tokens(&[1, 2, 3, 4, 5]),
            &[
                meta(Origin::AgentInput, 0),
                meta(Origin::AgentInput, 0),
                meta(Origin::ModelOutput, 0),
                meta(Origin::ModelOutput, 1),
                meta(Origin::ModelOutput, 1),
            ],
        );
        assert_eq!(t.spans.len(), 3);
        assert_eq!(t.spans[2].tokens, tokens(&[4, 5]));
        assert_eq!(t.oldest_model_version(), Some(ModelVersion(0)));
        assert!(t.is_stale(ModelVersion(1)));
    }

    #[test]
    fn record_field_order_is_stable() {
        let t = Trajectory::from_tokens(
            "abc".into(),
            &tokens(&[9, 8]),
            &[meta(Origin::AgentInput, 0), meta(Origin::ModelOutput, 3)],
        );
        assert_eq!(
            t.to_record().to_line(),
            r#"{"session_id":"abc","tokens":[9,8],"loss_mask":[0,1],"versions":[0,3]}"#
        );
    }
}
