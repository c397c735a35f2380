//! Request-driven hierarchical segmentation.
//!
//! A [`tree::RecognitionTree`] starts as a single `scene` instance covering
//! the image and grows through two kinds of requests: Type-I splits an
//! instance into the semantic regions named by its sub-knowledge in the
//! [`kb::KbVersion`], Type-II pulls one instance out of a semantic region at
//! a probe pixel. Ground truth and predictions share the tree form, and the
//! [`metrics`] module scores them with hierarchical panoptic quality.

pub mod dataset;
pub mod executor;
pub mod kb;
pub mod mask;
pub mod metrics;
pub mod predict;
pub mod probe;
pub mod request;
pub mod tree;

pub use kb::{ConceptId, KbVersion};
pub use mask::{BinaryMask, LabelMap, Rle};
pub use probe::Probe;
pub use tree::{NodeId, RecognitionTree};
