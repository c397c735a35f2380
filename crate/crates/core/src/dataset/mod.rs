//! Synthetic scenes, incomplete-annotation subsampling and corpus files.

mod corpus;
mod scene;
mod subsample;

use sha2::{Digest, Sha256};

pub use corpus::{load_corpus, load_tree, safe_id, save_corpus, CorpusError, DataLayout, TREE_SUFFIX};
pub use scene::{generate_corpus, generate_scene, render_png, synthetic_kb, GenError, Perturbation, SceneSpec};
pub use subsample::{subsample_parts, subsample_semantic_and_parts, SubsampleStats};

/// Independent stream seed for item `index` of a seeded job.
pub fn split_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}
