use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kb::KbResolver;
use crate::tree::{RecognitionTree, TreeError};

pub const TREE_SUFFIX: &str = ".tree.json";

/// Directory layout shared by the generator, the runner and the server.
///
/// ```text
/// root/kb/<version>.json      knowledge-base versions
/// root/gt/<id>.tree.json      ground-truth trees
/// root/images/<id>.png        images
/// root/bundles/<id>/          prediction bundles
/// root/embeddings.json        class embeddings (+ .vrtb)
/// root/exports/, root/sessions/
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn kb_dir(&self) -> PathBuf {
        self.root.join("kb")
    }
    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }
    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }
    pub fn bundles_dir(&self) -> PathBuf {
        self.root.join("bundles")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.json")
    }
    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }
    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }
    /// `None` for ids that would escape the directory.
    pub fn gt_path(&self, image_id: &str) -> Option<PathBuf> {
        safe_id(image_id).then(|| self.gt_dir().join(format!("{image_id}{TREE_SUFFIX}")))
    }
    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        safe_id(image_id).then(|| self.images_dir().join(format!("{image_id}.png")))
    }

    pub fn save_kb(&self, kb: &crate::kb::KbVersion) -> Result<PathBuf, CorpusError> {
        let dir = self.kb_dir();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let p = dir.join(format!("{}.json", kb.version_id()));
        fs::write(&p, kb.to_json()).map_err(io(&p))?;
        Ok(p)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Tree { path: PathBuf, source: TreeError },
    #[error("duplicate image id {0}")]
    Duplicate(String),
    #[error("image id {0:?} is not a safe file name")]
    BadId(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

pub fn load_tree(path: &Path, strict: Option<&dyn KbResolver>) -> Result<RecognitionTree, CorpusError> {
    let bytes = fs::read(path).map_err(io(path))?;
    RecognitionTree::parse(&bytes, strict).map_err(|source| CorpusError::Tree { path: path.to_path_buf(), source })
}

/// Every `*.tree.json` in `dir`, sorted by image id.
pub fn load_corpus(dir: &Path, strict: Option<&dyn KbResolver>) -> Result<Vec<RecognitionTree>, CorpusError> {
    let mut paths = Vec::new();
    for e in fs::read_dir(dir).map_err(io(dir))? {
        let p = e.map_err(io(dir))?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(TREE_SUFFIX)) {
            paths.push(p);
        }
    }
    let mut trees = paths.iter().map(|p| load_tree(p, strict)).collect::<Result<Vec<_>, _>>()?;
    trees.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = trees.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(CorpusError::Duplicate(w[0].image_id.clone()));
    }
    Ok(trees)
}

/// Image ids double as file names: ASCII letters, digits, `-`, `_`, `.`.
pub fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Writes `<image_id>.tree.json` per tree, creating `dir` if needed.
pub fn save_corpus(dir: &Path, trees: &[RecognitionTree]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    for t in trees {
        if !safe_id(&t.image_id) {
            return Err(CorpusError::BadId(t.image_id.clone()));
        }
        let p = dir.join(format!("{}{TREE_SUFFIX}", t.image_id));
        fs::write(&p, t.to_json_pretty()).map_err(io(&p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, synthetic_kb, SceneSpec};

    #[test]
    fn round_trip() {
        let kb = synthetic_kb();
        let trees: Vec<_> =
            generate_corpus(&SceneSpec::new(32, 32), &kb, 3, 0).unwrap().into_iter().map(|(g, _)| g).collect();
        let d = tempfile::tempdir().unwrap();
        save_corpus(d.path(), &trees).unwrap();
        fs::write(d.path().join("notes.txt"), "ignored").unwrap();
        let back = load_corpus(d.path(), Some(&kb)).unwrap();
        assert_eq!(back, trees);
    }

    #[test]
    fn rejects_path_ids() {
        let kb = synthetic_kb();
        let t = RecognitionTree::new("../x", 4, 4, &kb).unwrap();
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(save_corpus(d.path(), &[t]), Err(CorpusError::BadId(_))));
    }
}
