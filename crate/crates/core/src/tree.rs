//! Recognition trees: alternating instance / semantic-region nodes, each
//! with a mask and a class. Node 0 is the `scene` instance covering the
//! whole image.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{ConceptId, KbError, KbResolver, KbVersion};
use crate::mask::{BinaryMask, MaskError, Rle};
use crate::probe::Probe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("node {parent} is {} so its children must be {}", kind(*parent_is_instance), kind(!*parent_is_instance))]
    AlternationViolation { parent: NodeId, parent_is_instance: bool },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("class {class} is not in the sub-knowledge of {parent_class}")]
    NotASubclass { class: ConceptId, parent_class: ConceptId },
    #[error("instance class {class} differs from its region class {region_class}")]
    InstanceClassMismatch { class: ConceptId, region_class: ConceptId },
    #[error("class {0} is not countable")]
    NotCountable(ConceptId),
    #[error("semantic regions of classes {0} and {1} overlap")]
    OverlapViolation(ConceptId, ConceptId),
    #[error("class {0} appears twice among semantic siblings")]
    DuplicateClass(ConceptId),
    #[error("child of class {0} is empty after clipping to its parent")]
    EmptyChild(ConceptId),
    #[error("probe ({},{}) is outside the {}x{} image", .0.a, .0.b, .1, .2)]
    ProbeOutOfBounds(Probe, u32, u32),
    #[error("unknown knowledge-base version {0}")]
    UnknownKbVersion(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn kind(instance: bool) -> &'static str {
    if instance {
        "an instance"
    } else {
        "a semantic region"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub mask: BinaryMask,
    pub class: ConceptId,
    pub is_instance: bool,
    pub children: Vec<NodeId>,
    pub probe: Option<Probe>,
}

/// A child to attach under an existing node. The mask is clipped to the
/// parent before storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildSpec {
    pub mask: BinaryMask,
    pub class: ConceptId,
    pub is_instance: bool,
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    RootNotScene,
    RootNotFull,
    RootNotInstance,
    BadParentLink(NodeId),
    Unreachable(NodeId),
    NotContained { node: NodeId, parent: NodeId },
    Alternation { node: NodeId, parent: NodeId },
    SiblingOverlap(NodeId, NodeId),
    SiblingDuplicateClass(NodeId, NodeId),
    UnknownClass(NodeId, ConceptId),
    NotASubclass(NodeId),
    InstanceClassMismatch(NodeId),
    DimensionMismatch(NodeId),
    ProbeOutOfBounds(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RootNotScene => write!(f, "root is not the scene concept"),
            Violation::RootNotFull => write!(f, "root mask does not cover the image"),
            Violation::RootNotInstance => write!(f, "root is not an instance"),
            Violation::BadParentLink(n) => write!(f, "node {n} has an inconsistent parent link"),
            Violation::Unreachable(n) => write!(f, "node {n} is not reachable from the root"),
            Violation::NotContained { node, parent } => write!(f, "node {node} extends outside parent {parent}"),
            Violation::Alternation { node, parent } => {
                write!(f, "node {node} has the same instance flag as parent {parent}")
            }
            Violation::SiblingOverlap(a, b) => write!(f, "semantic siblings {a} and {b} overlap"),
            Violation::SiblingDuplicateClass(a, b) => write!(f, "semantic siblings {a} and {b} share a class"),
            Violation::UnknownClass(n, c) => write!(f, "node {n} has unknown class {c}"),
            Violation::NotASubclass(n) => write!(f, "node {n} is not in its parent's sub-knowledge"),
            Violation::InstanceClassMismatch(n) => write!(f, "instance {n} differs in class from its region"),
            Violation::DimensionMismatch(n) => write!(f, "node {n} mask has the wrong dimensions"),
            Violation::ProbeOutOfBounds(n) => write!(f, "node {n} probe lies outside the image"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognitionTree {
    pub image_id: String,
    width: u32,
    height: u32,
    kb_version: String,
    /// Per-image vocabulary when the annotation only covers part of the KB.
    pub active_classes: Option<BTreeSet<ConceptId>>,
    nodes: Vec<TreeNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    image_id: String,
    width: u32,
    height: u32,
    kb_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active_classes: Option<Vec<ConceptId>>,
    nodes: Vec<NodeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: usize,
    class: ConceptId,
    is_instance: bool,
    rle: Option<Rle>,
    children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probe: Option<Probe>,
}

impl RecognitionTree {
    /// A root-only tree for an image of the given size.
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, kb: &KbVersion) -> Result<Self, TreeError> {
        let mask = BinaryMask::full(width, height)?;
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            kb_version: kb.version_id().to_string(),
            active_classes: None,
            nodes: vec![TreeNode {
                id: NodeId::ROOT,
                parent: None,
                mask,
                class: ConceptId::SCENE,
                is_instance: true,
                children: vec![],
                probe: None,
            }],
        })
    }

    /// Like [`RecognitionTree::new`], resolving the version through `kbs`.
    pub fn new_in(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        version_id: &str,
        kbs: &dyn KbResolver,
    ) -> Result<Self, TreeError> {
        let kb = kbs.resolve(version_id).ok_or_else(|| TreeError::UnknownKbVersion(version_id.into()))?;
        Self::new(image_id, width, height, &kb)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn kb_version(&self) -> &str {
        &self.kb_version
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &TreeNode> {
        self.nodes.get(id.0).into_iter().flat_map(move |n| n.children.iter().map(move |c| &self.nodes[c.0]))
    }

    /// Number of instance nodes on the path from the root to `id`,
    /// counting `id` itself when it is an instance. Root-level regions are
    /// at level 1, parts of their instances at level 2, and so on.
    pub fn level(&self, id: NodeId) -> usize {
        let mut n = &self.nodes[id.0];
        let mut level = usize::from(n.is_instance);
        while let Some(p) = n.parent {
            n = &self.nodes[p.0];
            level += usize::from(n.is_instance);
        }
        level
    }

    /// Node ids in breadth-first order from the root.
    pub fn bfs(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([NodeId::ROOT]);
        while let Some(id) = queue.pop_front() {
            order.push(id);
            queue.extend(self.nodes[id.0].children.iter().copied());
        }
        order
    }

    pub fn max_level(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_instance).map(|n| self.level(n.id)).max().unwrap_or(0)
    }

    /// Validates a batch of children against `parent` and appends them.
    /// Nothing is attached if any child is rejected.
    pub fn attach_children(
        &mut self,
        kb: &KbVersion,
        parent: NodeId,
        children: Vec<ChildSpec>,
    ) -> Result<Vec<NodeId>, TreeError> {
        let p = self.node(parent)?.clone();
        let mut clipped = Vec::with_capacity(children.len());
        for c in children {
            if c.is_instance == p.is_instance {
                return Err(TreeError::AlternationViolation { parent, parent_is_instance: p.is_instance });
            }
            kb.concept(c.class)?;
            if p.is_instance {
                if !kb.sub_knowledge_ids(p.class)?.contains(&c.class) {
                    return Err(TreeError::NotASubclass { class: c.class, parent_class: p.class });
                }
            } else {
                if c.class != p.class {
                    return Err(TreeError::InstanceClassMismatch { class: c.class, region_class: p.class });
                }
                if !kb.is_countable(c.class) {
                    return Err(TreeError::NotCountable(c.class));
                }
            }
            if let Some(pr) = c.probe {
                if pr.a >= self.width || pr.b >= self.height {
                    return Err(TreeError::ProbeOutOfBounds(pr, self.width, self.height));
                }
            }
            let mask = c.mask.clip(&p.mask)?;
            if mask.is_empty() {
                return Err(TreeError::EmptyChild(c.class));
            }
            clipped.push(ChildSpec { mask, ..c });
        }
        if p.is_instance {
            let mut regions: Vec<(ConceptId, &BinaryMask)> =
                self.children(parent).map(|n| (n.class, &n.mask)).collect();
            for c in &clipped {
                for (class, mask) in &regions {
                    if *class == c.class {
                        return Err(TreeError::DuplicateClass(c.class));
                    }
                    if !mask.is_disjoint(&c.mask)? {
                        return Err(TreeError::OverlapViolation(*class, c.class));
                    }
                }
                regions.push((c.class, &c.mask));
            }
        }
        let mut ids = Vec::with_capacity(clipped.len());
        for c in clipped {
            let id = NodeId(self.nodes.len());
            self.nodes.push(TreeNode {
                id,
                parent: Some(parent),
                mask: c.mask,
                class: c.class,
                is_instance: c.is_instance,
                children: vec![],
                probe: c.probe,
            });
            self.nodes[parent.0].children.push(id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Structural and, when `kb` is given, vocabulary checks. Missing
    /// children are never a violation.
    pub fn validate(&self, kb: Option<&KbVersion>) -> Vec<Violation> {
        let mut out = Vec::new();
        let root = &self.nodes[0];
        if root.class != ConceptId::SCENE {
            out.push(Violation::RootNotScene);
        }
        if !root.is_instance {
            out.push(Violation::RootNotInstance);
        }
        if !root.mask.is_full() {
            out.push(Violation::RootNotFull);
        }
        let reachable: BTreeSet<NodeId> = self.bfs().into_iter().collect();
        for n in &self.nodes {
            if !reachable.contains(&n.id) {
                out.push(Violation::Unreachable(n.id));
            }
            if n.mask.width() != self.width || n.mask.height() != self.height {
                out.push(Violation::DimensionMismatch(n.id));
                continue;
            }
            if n.probe.is_some_and(|p| p.a >= self.width || p.b >= self.height) {
                out.push(Violation::ProbeOutOfBounds(n.id));
            }
            if let Some(kb) = kb {
                if !kb.contains(n.class) {
                    out.push(Violation::UnknownClass(n.id, n.class));
                }
            }
            let Some(pid) = n.parent else { continue };
            let p = &self.nodes[pid.0];
            if !p.children.contains(&n.id) {
                out.push(Violation::BadParentLink(n.id));
            }
            if p.is_instance == n.is_instance {
                out.push(Violation::Alternation { node: n.id, parent: pid });
            }
            if n.mask.is_subset_of(&p.mask) != Ok(true) {
                out.push(Violation::NotContained { node: n.id, parent: pid });
            }
            if let Some(kb) = kb {
                if p.is_instance && !n.is_instance {
                    if kb.sub_knowledge_ids(p.class).map_or(true, |s| !s.contains(&n.class)) {
                        out.push(Violation::NotASubclass(n.id));
                    }
                } else if !p.is_instance && n.is_instance && n.class != p.class {
                    out.push(Violation::InstanceClassMismatch(n.id));
                }
            }
        }
        for n in self.nodes.iter().filter(|n| n.is_instance) {
            let kids: Vec<&TreeNode> = self.children(n.id).filter(|c| !c.is_instance).collect();
            for (i, x) in kids.iter().enumerate() {
                for y in &kids[i + 1..] {
                    if x.class == y.class {
                        out.push(Violation::SiblingDuplicateClass(x.id, y.id));
                    }
                    if x.mask.is_disjoint(&y.mask) == Ok(false) {
                        out.push(Violation::SiblingOverlap(x.id, y.id));
                    }
                }
            }
        }
        out
    }

    /// Canonical compact JSON.
    pub fn to_bytes(&self) -> Vec<u8> {
        let file = TreeFile {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            kb_version: self.kb_version.clone(),
            active_classes: self.active_classes.as_ref().map(|s| s.iter().copied().collect()),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeFile {
                    id: n.id.0,
                    class: n.class,
                    is_instance: n.is_instance,
                    rle: (!n.mask.is_full()).then(|| Rle::encode(&n.mask)),
                    children: n.children.iter().map(|c| c.0).collect(),
                    probe: n.probe,
                })
                .collect(),
        };
        serde_json::to_vec(&file).expect("tree serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        let v: serde_json::Value = serde_json::from_slice(&self.to_bytes()).expect("own output parses");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Parses tree JSON. Node ids must be dense, children must come after
    /// their parent, and node 0 must be the full-image scene instance. With
    /// `strict`, the KB version must resolve.
    pub fn parse(bytes: &[u8], strict: Option<&dyn KbResolver>) -> Result<Self, TreeError> {
        let bad = |m: String| TreeError::MalformedTree(m);
        let file: TreeFile = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
        if let Some(kbs) = strict {
            if kbs.resolve(&file.kb_version).is_none() {
                return Err(bad(format!("unknown kb_version {}", file.kb_version)));
            }
        }
        BinaryMask::empty(file.width, file.height).map_err(|e| bad(e.to_string()))?;
        if file.nodes.is_empty() {
            return Err(bad("no nodes".into()));
        }
        let n = file.nodes.len();
        let mut parents: Vec<Option<NodeId>> = vec![None; n];
        for (i, nf) in file.nodes.iter().enumerate() {
            if nf.id != i {
                return Err(bad(format!("node at position {i} has id {}", nf.id)));
            }
            for &c in &nf.children {
                if c >= n {
                    return Err(bad(format!("node {i} lists dangling child {c}")));
                }
                if c <= i {
                    return Err(bad(format!("child {c} does not follow its parent {i}")));
                }
                if parents[c].replace(NodeId(i)).is_some() {
                    return Err(bad(format!("node {c} has two parents")));
                }
            }
        }
        if let Some(orphan) = (1..n).find(|&i| parents[i].is_none()) {
            return Err(bad(format!("node {orphan} has no parent")));
        }
        let root = &file.nodes[0];
        if root.class != ConceptId::SCENE || !root.is_instance || root.rle.is_some() {
            return Err(bad("node 0 must be the scene instance with a null rle".into()));
        }
        let mut nodes = Vec::with_capacity(n);
        for (i, nf) in file.nodes.into_iter().enumerate() {
            let mask = match nf.rle {
                None => BinaryMask::full(file.width, file.height)?,
                Some(r) => {
                    if r.width != file.width || r.height != file.height {
                        return Err(bad(format!("node {i} rle is {}x{}", r.width, r.height)));
                    }
                    r.decode().map_err(|e| bad(format!("node {i}: {e}")))?
                }
            };
            nodes.push(TreeNode {
                id: NodeId(i),
                parent: parents[i],
                mask,
                class: nf.class,
                is_instance: nf.is_instance,
                children: nf.children.into_iter().map(NodeId).collect(),
                probe: nf.probe,
            });
        }
        Ok(Self {
            image_id: file.image_id,
            width: file.width,
            height: file.height,
            kb_version: file.kb_version,
            active_classes: file.active_classes.map(|v| v.into_iter().collect()),
            nodes,
        })
    }

    /// Copy of the tree keeping only nodes for which `keep` returns true
    /// (the root is always kept); dropping a node drops its subtree.
    pub fn retain(&self, mut keep: impl FnMut(&TreeNode) -> bool) -> Self {
        let mut new_id: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let mut nodes: Vec<TreeNode> = Vec::new();
        for n in &self.nodes {
            let parent = match n.parent {
                None => None,
                Some(p) => match new_id[p.0] {
                    Some(np) => Some(np),
                    None => continue,
                },
            };
            if parent.is_some() && !keep(n) {
                continue;
            }
            let id = NodeId(nodes.len());
            new_id[n.id.0] = Some(id);
            nodes.push(TreeNode { id, parent, children: vec![], ..n.clone() });
            if let Some(p) = parent {
                nodes[p.0].children.push(id);
            }
        }
        // restore original child order
        for n in &self.nodes {
            if let Some(id) = new_id[n.id.0] {
                nodes[id.0].children = n.children.iter().filter_map(|c| new_id[c.0]).collect();
            }
        }
        Self { nodes, ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Self {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            kb_version: self.kb_version.clone(),
            active_classes: self.active_classes.clone(),
            nodes: vec![],
        }
    }

    pub fn set_kb_version(&mut self, version_id: impl Into<String>) {
        self.kb_version = version_id.into();
    }

    /// Classes appearing anywhere in the tree, the root's included.
    pub fn labeled_classes(&self) -> BTreeSet<ConceptId> {
        self.nodes.iter().map(|n| n.class).collect()
    }

    /// Structural equality ignoring node ids and sibling order.
    pub fn isomorphic(&self, other: &Self) -> bool {
        fn sig(t: &RecognitionTree, id: NodeId) -> String {
            let n = &t.nodes[id.0];
            let mut kids: Vec<String> = n.children.iter().map(|c| sig(t, *c)).collect();
            kids.sort();
            format!(
                "({}:{}:{}[{}])",
                n.class,
                u8::from(n.is_instance),
                hex::encode(Sha256::digest(serde_json::to_vec(&Rle::encode(&n.mask).counts).unwrap())),
                kids.join(",")
            )
        }
        self.width == other.width && self.height == other.height && sig(self, NodeId::ROOT) == sig(other, NodeId::ROOT)
    }
}
