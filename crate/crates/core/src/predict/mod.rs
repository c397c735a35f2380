//! Prediction backends that answer Type-I and Type-II requests.

mod bundle;
pub mod candidates;
pub mod embedding;
pub mod features;
mod oracle;
pub mod tensor;

use thiserror::Error;

use crate::kb::{ConceptId, KbError, KbVersion};
use crate::mask::{LabelMapError, MaskError, RleError};
use crate::probe::Probe;
use crate::request::{Answer, Request};
use crate::tree::{NodeId, RecognitionTree, TreeError};

pub use bundle::{Bundle, BundleStore, FilesBackend, LinearBackend};
pub use candidates::{feature_locations, Candidate, CandidateStore, FeatureLoc, DEFAULT_STRIDES};
pub use embedding::EmbeddingTable;
pub use features::{classify_pixels, CellLabel, CellLabels, FeatureMap};
pub use oracle::{corresponding_node, OracleBackend};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("malformed tensor blob: {0}")]
    MalformedBlob(String),
    #[error("label {0:?} has no embedding")]
    UnknownLabel(String),
    #[error("missing prediction: {0}")]
    MissingPrediction(String),
    #[error("no candidate at any feature location for probe ({}, {})", .0.a, .0.b)]
    NoCandidate(Probe),
    #[error("instance lost")]
    Lost,
    #[error("backend error: {0}")]
    Backend(String),
    #[error("request kind does not match the target node")]
    WrongKind,
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error(transparent)]
    LabelMap(#[from] LabelMapError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl PredictError {
    /// Misses are recorded and skipped rather than aborting a run.
    pub fn is_miss(&self) -> bool {
        matches!(self, PredictError::Lost | PredictError::MissingPrediction(_) | PredictError::NoCandidate(_))
    }
}

/// A read-only answering backend. Implementations must be safe to share
/// across sessions.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Semantic parts of instance `node` for the listed classes.
    fn answer_type1(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        classes: &[ConceptId],
        kb: &KbVersion,
    ) -> Result<Answer, PredictError>;

    /// The single instance of `class` under `probe` inside region `node`.
    fn answer_type2(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        probe: Probe,
        class: ConceptId,
        kb: &KbVersion,
    ) -> Result<Answer, PredictError>;

    fn answer(&self, tree: &RecognitionTree, req: &Request, kb: &KbVersion) -> Result<Answer, PredictError> {
        let n = tree.node(req.node())?;
        match req {
            Request::TypeI { node, active_classes } if n.is_instance => {
                self.answer_type1(tree, *node, active_classes, kb)
            }
            Request::TypeII { node, probe, class } if !n.is_instance => {
                self.answer_type2(tree, *node, *probe, *class, kb)
            }
            _ => Err(PredictError::WrongKind),
        }
    }
}

/// Embedding row for a concept: its full label path first, then the bare
/// label.
pub(crate) fn embedding_row<'e>(
    e: &'e EmbeddingTable,
    kb: &KbVersion,
    class: ConceptId,
) -> Result<(&'e [f32], String), PredictError> {
    if let Some(path) = kb.label_path(class) {
        if let Ok(r) = e.row(&path) {
            return Ok((r, path));
        }
    }
    let label = kb.label(class).ok_or_else(|| KbError::UnknownConcept(class.to_string()))?;
    Ok((e.row(label)?, label.to_string()))
}
