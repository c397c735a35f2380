//! Versioned knowledge base: a DAG of text-labeled concepts rooted at
//! `scene`. Every mutation yields a new immutable [`KbVersion`] whose id is a
//! content hash of its concept table.

pub mod fixtures;
mod registry;

pub use registry::{KbRegistry, KbResolver};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCENE_LABEL: &str = "scene";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub const SCENE: ConceptId = ConceptId(0);
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbError {
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("label {label:?} already exists under {parent}")]
    DuplicateLabel { parent: String, label: String },
    #[error("label {0:?} is ambiguous; use a path such as scene/car/wheel")]
    AmbiguousLabel(String),
    #[error("operation would create a cycle through {0}")]
    Cycle(String),
    #[error("invalid knowledge base: {0}")]
    Invalid(String),
    #[error("version id mismatch: file says {stored}, content hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("unknown knowledge-base version {0}")]
    UnknownVersion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub label: String,
    pub countable: bool,
    pub children: Vec<ConceptId>,
}

/// How [`KbVersion::copy_sub_knowledge`] treats labels already present
/// under the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CopyConflict {
    #[default]
    Error,
    /// Keep the existing child and skip the copy for that label.
    Merge,
}

/// An immutable snapshot of the concept graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KbVersion {
    version_id: String,
    created_at: Option<String>,
    parent_version: Option<String>,
    concepts: BTreeMap<ConceptId, Concept>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    version_id: String,
    parent_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
    concepts: Vec<Concept>,
}

/// Symmetric difference between two versions, keyed by label path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KbDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    /// Paths present in both whose `countable` flag differs.
    pub changed: Vec<String>,
}

impl KbDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

fn content_hash(concepts: &BTreeMap<ConceptId, Concept>) -> String {
    let list: Vec<&Concept> = concepts.values().collect();
    let bytes = serde_json::to_vec(&list).expect("concepts serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl KbVersion {
    /// Validates the concept table and seals it into a version.
    pub fn from_concepts(
        concepts: impl IntoIterator<Item = Concept>,
        parent_version: Option<String>,
    ) -> Result<Self, KbError> {
        let mut table = BTreeMap::new();
        for c in concepts {
            let id = c.id;
            if table.insert(id, c).is_some() {
                return Err(KbError::Invalid(format!("duplicate concept id {id}")));
            }
        }
        validate_table(&table)?;
        Ok(Self { version_id: content_hash(&table), created_at: Some(now_rfc3339()), parent_version, concepts: table })
    }

    pub fn version_id(&self) -> &str {
        &self.version_id
    }

    pub fn parent_version(&self) -> Option<&str> {
        self.parent_version.as_deref()
    }

    pub fn created_at(&self) -> Option<&str> {
        self.created_at.as_deref()
    }

    pub fn with_created_at(mut self, ts: Option<String>) -> Self {
        self.created_at = ts;
        self
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn root(&self) -> &Concept {
        &self.concepts[&ConceptId::SCENE]
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.concepts.contains_key(&id)
    }

    pub fn concept(&self, id: ConceptId) -> Result<&Concept, KbError> {
        self.concepts.get(&id).ok_or_else(|| KbError::UnknownConcept(id.to_string()))
    }

    pub fn label(&self, id: ConceptId) -> Option<&str> {
        self.concepts.get(&id).map(|c| c.label.as_str())
    }

    /// Child concepts of `class` in stored order.
    pub fn sub_knowledge(&self, class: ConceptId) -> Result<Vec<&Concept>, KbError> {
        let c = self.concept(class)?;
        Ok(c.children.iter().map(|id| &self.concepts[id]).collect())
    }

    pub fn sub_knowledge_ids(&self, class: ConceptId) -> Result<&[ConceptId], KbError> {
        Ok(&self.concept(class)?.children)
    }

    pub fn has_parts(&self, class: ConceptId) -> bool {
        self.concepts.get(&class).is_some_and(|c| !c.children.is_empty())
    }

    pub fn is_countable(&self, class: ConceptId) -> bool {
        self.concepts.get(&class).is_some_and(|c| c.countable)
    }

    /// Resolves a bare label (must be unique) or a `/`-separated label path
    /// starting at `scene`.
    pub fn find(&self, label_or_path: &str) -> Result<ConceptId, KbError> {
        if label_or_path.contains('/') {
            let mut parts = label_or_path.split('/');
            let first = parts.next().unwrap_or_default();
            if first != SCENE_LABEL {
                return Err(KbError::UnknownConcept(label_or_path.into()));
            }
            let mut cur = ConceptId::SCENE;
            for part in parts {
                cur = self.child_by_label(cur, part).ok_or_else(|| KbError::UnknownConcept(label_or_path.into()))?;
            }
            return Ok(cur);
        }
        let hits: Vec<ConceptId> = self.concepts.values().filter(|c| c.label == label_or_path).map(|c| c.id).collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            [] => Err(KbError::UnknownConcept(label_or_path.into())),
            _ => Err(KbError::AmbiguousLabel(label_or_path.into())),
        }
    }

    pub fn child_by_label(&self, parent: ConceptId, label: &str) -> Option<ConceptId> {
        let p = self.concepts.get(&parent)?;
        p.children.iter().copied().find(|id| self.concepts[id].label == label)
    }

    /// First label path to `id` in breadth-first order from the root.
    pub fn label_path(&self, id: ConceptId) -> Option<String> {
        self.all_paths().into_iter().find(|(_, c)| *c == id).map(|(p, _)| p)
    }

    /// Every root-to-concept label path, breadth-first.
    fn all_paths(&self) -> Vec<(String, ConceptId)> {
        let mut out = vec![(SCENE_LABEL.to_string(), ConceptId::SCENE)];
        let mut i = 0;
        while i < out.len() {
            let (path, id) = out[i].clone();
            for child in &self.concepts[&id].children {
                out.push((format!("{path}/{}", self.concepts[child].label), *child));
            }
            i += 1;
        }
        out
    }

    fn next_id(&self) -> u32 {
        self.concepts.keys().next_back().map_or(0, |k| k.0 + 1)
    }

    fn derive(&self, table: BTreeMap<ConceptId, Concept>) -> Result<Self, KbError> {
        validate_table(&table)?;
        Ok(Self {
            version_id: content_hash(&table),
            created_at: Some(now_rfc3339()),
            parent_version: Some(self.version_id.clone()),
            concepts: table,
        })
    }

    pub fn add_concept(&self, parent: ConceptId, label: &str, countable: bool) -> Result<Self, KbError> {
        let label = label.trim();
        if label.is_empty() || label.contains('/') {
            return Err(KbError::Invalid(format!("invalid label {label:?}")));
        }
        let p = self.concept(parent)?;
        if self.child_by_label(parent, label).is_some() {
            return Err(KbError::DuplicateLabel { parent: p.label.clone(), label: label.into() });
        }
        let id = ConceptId(self.next_id());
        let mut table = self.concepts.clone();
        table.insert(id, Concept { id, label: label.into(), countable, children: vec![] });
        table.get_mut(&parent).expect("parent exists").children.push(id);
        self.derive(table)
    }

    /// Gives `to` a fresh child concept for every child of `from`, with the
    /// same label and countability. The copies share `from`'s grandchildren.
    pub fn copy_sub_knowledge(&self, from: ConceptId, to: ConceptId, conflict: CopyConflict) -> Result<Self, KbError> {
        let src = self.concept(from)?;
        let dst = self.concept(to)?;
        let mut table = self.concepts.clone();
        let mut next = self.next_id();
        for child in &src.children {
            let c = &self.concepts[child];
            if self.child_by_label(to, &c.label).is_some() {
                match conflict {
                    CopyConflict::Error => {
                        return Err(KbError::DuplicateLabel { parent: dst.label.clone(), label: c.label.clone() })
                    }
                    CopyConflict::Merge => continue,
                }
            }
            let id = ConceptId(next);
            next += 1;
            table.insert(
                id,
                Concept { id, label: c.label.clone(), countable: c.countable, children: c.children.clone() },
            );
            table.get_mut(&to).expect("target exists").children.push(id);
        }
        self.derive(table)
    }

    pub fn diff(a: &KbVersion, b: &KbVersion) -> KbDiff {
        let index = |v: &KbVersion| -> BTreeMap<String, bool> {
            v.all_paths().into_iter().map(|(p, id)| (p, v.concepts[&id].countable)).collect()
        };
        let (pa, pb) = (index(a), index(b));
        KbDiff {
            added: pb.keys().filter(|k| !pa.contains_key(*k)).cloned().collect(),
            removed: pa.keys().filter(|k| !pb.contains_key(*k)).cloned().collect(),
            changed: pa.iter().filter(|(k, v)| pb.get(*k).is_some_and(|w| w != *v)).map(|(k, _)| k.clone()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = KbFile {
            version_id: self.version_id.clone(),
            parent_version: self.parent_version.clone(),
            created_at: self.created_at.clone(),
            concepts: self.concepts.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("kb serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, KbError> {
        let file: KbFile = serde_json::from_str(s).map_err(|e| KbError::Invalid(e.to_string()))?;
        let mut v = Self::from_concepts(file.concepts, file.parent_version)?;
        if v.version_id != file.version_id {
            return Err(KbError::HashMismatch { stored: file.version_id, computed: v.version_id });
        }
        v.created_at = file.created_at;
        Ok(v)
    }
}

fn validate_table(table: &BTreeMap<ConceptId, Concept>) -> Result<(), KbError> {
    let root = table.get(&ConceptId::SCENE).ok_or_else(|| KbError::Invalid("concept 0 (scene) missing".into()))?;
    if root.label != SCENE_LABEL || !root.countable {
        return Err(KbError::Invalid("concept 0 must be the countable \"scene\"".into()));
    }
    for c in table.values() {
        if c.label.trim().is_empty() || c.label.contains('/') {
            return Err(KbError::Invalid(format!("concept {} has invalid label {:?}", c.id, c.label)));
        }
        let mut seen = HashSet::new();
        for child in &c.children {
            let cc = table
                .get(child)
                .ok_or_else(|| KbError::Invalid(format!("concept {} lists missing child {child}", c.id)))?;
            if !seen.insert(cc.label.as_str()) {
                return Err(KbError::DuplicateLabel { parent: c.label.clone(), label: cc.label.clone() });
            }
        }
        if c.label == SCENE_LABEL && c.id != ConceptId::SCENE {
            return Err(KbError::Invalid("only concept 0 may be labeled scene".into()));
        }
    }
    // acyclicity and reachability by iterative DFS with colors
    let mut state: BTreeMap<ConceptId, u8> = BTreeMap::new();
    let mut stack = vec![(ConceptId::SCENE, 0usize)];
    state.insert(ConceptId::SCENE, 1);
    while let Some((id, i)) = stack.pop() {
        let children = &table[&id].children;
        if i < children.len() {
            stack.push((id, i + 1));
            let child = children[i];
            match state.get(&child) {
                Some(1) => return Err(KbError::Cycle(table[&child].label.clone())),
                Some(_) => {}
                None => {
                    state.insert(child, 1);
                    stack.push((child, 0));
                }
            }
        } else {
            state.insert(id, 2);
        }
    }
    let unreachable: BTreeSet<_> = table.keys().filter(|k| !state.contains_key(k)).collect();
    if let Some(k) = unreachable.first() {
        return Err(KbError::Invalid(format!("concept {k} is not reachable from scene")));
    }
    Ok(())
}

/// Incremental construction of a concept table.
#[derive(Debug, Clone)]
pub struct KbBuilder {
    concepts: Vec<Concept>,
}

impl Default for KbBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl KbBuilder {
    pub fn new() -> Self {
        Self {
            concepts: vec![Concept {
                id: ConceptId::SCENE,
                label: SCENE_LABEL.into(),
                countable: true,
                children: vec![],
            }],
        }
    }

    pub fn child(&mut self, parent: ConceptId, label: &str, countable: bool) -> ConceptId {
        let id = ConceptId(self.concepts.len() as u32);
        self.concepts.push(Concept { id, label: label.into(), countable, children: vec![] });
        self.concepts[parent.0 as usize].children.push(id);
        id
    }

    pub fn build(self) -> Result<KbVersion, KbError> {
        KbVersion::from_concepts(self.concepts, None)
    }
}
