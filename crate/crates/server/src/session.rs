use std::collections::HashMap;
use std::sync::Arc;

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use virreq_core::executor::{ExecError, LogEntry, Session};
use virreq_core::kb::{ConceptId, KbVersion};
use virreq_core::predict::Predictor;
use virreq_core::request::{read_stream, write_stream, Answer, AnswerChild, ProbeSource, Request, StreamHeader};
use virreq_core::tree::TreeError;
use virreq_core::{NodeId, Probe, RecognitionTree, Rle};

use crate::error::ApiError;

/// A human action, as posted to `/sessions/{id}/requests`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Action {
    /// Expand an instance. Without `active_classes` the whole
    /// sub-knowledge is requested.
    #[serde(rename = "I")]
    TypeI {
        node: usize,
        #[serde(default)]
        active_classes: Option<Vec<ConceptId>>,
    },
    /// Click `probe = [a, b]` inside a semantic region.
    #[serde(rename = "II")]
    TypeII { node: usize, probe: [u32; 2] },
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeView {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub class: ConceptId,
    pub label: Option<String>,
    pub is_instance: bool,
    pub rle: Rle,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActionOutcome {
    pub applied: Vec<NodeView>,
    /// Why nothing was attached, when the backend had no answer.
    pub miss: Option<String>,
    pub etag: String,
}

/// What readers see: the tree as served, and its hash.
#[derive(Debug)]
pub struct Published {
    pub tree: Arc<Vec<u8>>,
    pub etag: String,
    pub steps: usize,
}

/// A stored response for an idempotency key.
#[derive(Debug, Clone)]
pub struct Cached {
    pub fingerprint: String,
    pub status: StatusCode,
    pub body: Vec<u8>,
    pub etag: Option<String>,
}

pub struct SessionCore {
    pub id: String,
    pub backend_name: String,
    pub kb: Arc<KbVersion>,
    backend: Arc<dyn Predictor>,
    tree: RecognitionTree,
    pairs: Vec<(Request, Answer)>,
    undo: Vec<(RecognitionTree, usize)>,
    pub idempotency: HashMap<String, Cached>,
}

fn tree_error(e: TreeError) -> ApiError {
    match e {
        TreeError::AlternationViolation { .. } => ApiError::conflict("alternation_violation", e.to_string()),
        TreeError::UnknownNode(_) => ApiError::not_found("node_not_found", e.to_string()),
        other => ApiError::conflict("tree_conflict", other.to_string()),
    }
}

impl SessionCore {
    pub fn new(
        id: String,
        backend_name: String,
        kb: Arc<KbVersion>,
        backend: Arc<dyn Predictor>,
        tree: RecognitionTree,
    ) -> Self {
        Self { id, backend_name, kb, backend, tree, pairs: vec![], undo: vec![], idempotency: HashMap::new() }
    }

    /// Rebuilds a session from its snapshot, replaying the logged answers.
    /// The undo history is not kept across restarts.
    pub fn restore(snap: &Snapshot, kb: Arc<KbVersion>, backend: Arc<dyn Predictor>) -> Result<Self, ApiError> {
        let (header, pairs) = read_stream(&snap.log).map_err(|e| ApiError::internal(e.to_string()))?;
        let start = RecognitionTree::new(header.image_id, header.width, header.height, &kb).map_err(tree_error)?;
        let mut s = Session::new(start, kb.clone(), None);
        s.run_script(&pairs).map_err(|e| ApiError::internal(e.to_string()))?;
        let tree = s.into_parts().0;
        let stored = serde_json::to_vec(&snap.tree).map_err(|e| ApiError::internal(e.to_string()))?;
        let stored = RecognitionTree::parse(&stored, None).map_err(|e| ApiError::internal(e.to_string()))?;
        if stored.hash() != tree.hash() {
            return Err(ApiError::internal(format!("snapshot {} does not match its log", snap.session_id)));
        }
        let mut core = Self::new(snap.session_id.clone(), snap.backend.clone(), kb, backend, tree);
        core.pairs = pairs;
        Ok(core)
    }

    pub fn tree(&self) -> &RecognitionTree {
        &self.tree
    }

    pub fn steps(&self) -> usize {
        self.pairs.len()
    }

    pub fn publish(&self) -> Published {
        Published { tree: Arc::new(self.tree.to_bytes()), etag: self.tree.hash(), steps: self.pairs.len() }
    }

    fn view(&self, id: NodeId) -> NodeView {
        let n = &self.tree.nodes()[id.0];
        NodeView {
            id,
            parent: n.parent,
            class: n.class,
            label: self.kb.label_path(n.class),
            is_instance: n.is_instance,
            rle: Rle::encode(&n.mask),
        }
    }

    fn to_request(&self, action: &Action) -> Result<Request, ApiError> {
        let node_id = match action {
            Action::TypeI { node, .. } | Action::TypeII { node, .. } => NodeId(*node),
        };
        let node = self.tree.node(node_id).map_err(tree_error)?;
        match action {
            Action::TypeI { active_classes, .. } => {
                if !node.is_instance {
                    return Err(ApiError::conflict(
                        "alternation_violation",
                        format!("node {node_id} is a semantic region; Type-I needs an instance"),
                    ));
                }
                let sub = self.kb.sub_knowledge_ids(node.class).map_err(|e| ApiError::internal(e.to_string()))?;
                let active: Vec<ConceptId> = match active_classes {
                    None => sub.to_vec(),
                    Some(list) => {
                        if let Some(bad) = list.iter().find(|c| !sub.contains(c)) {
                            return Err(ApiError::unprocessable(
                                "invalid_class",
                                format!("class {bad} is not in the sub-knowledge of node {node_id}"),
                            ));
                        }
                        sub.iter().copied().filter(|c| list.contains(c)).collect()
                    }
                };
                if active.is_empty() {
                    return Err(ApiError::unprocessable(
                        "no_active_classes",
                        format!("node {node_id} has nothing to expand into"),
                    ));
                }
                Ok(Request::TypeI { node: node_id, active_classes: active })
            }
            Action::TypeII { probe: [a, b], .. } => {
                if node.is_instance {
                    return Err(ApiError::conflict(
                        "alternation_violation",
                        format!("node {node_id} is an instance; Type-II needs a semantic region"),
                    ));
                }
                let (a, b) = (*a, *b);
                if a >= self.tree.width() || b >= self.tree.height() || !node.mask.get(a, b) {
                    return Err(ApiError::unprocessable(
                        "probe_outside_node",
                        format!("probe ({a},{b}) is not inside node {node_id}"),
                    )
                    .with_detail(json!({ "node": node_id.0, "probe": [a, b] })));
                }
                Ok(Request::TypeII { node: node_id, probe: Probe::new(a, b), class: node.class })
            }
        }
    }

    /// Runs one action through the backend. The tree changes only when
    /// something is attached; misses leave it, and the ETag, as they were.
    pub fn act(&mut self, action: &Action) -> Result<ActionOutcome, ApiError> {
        let req = self.to_request(action)?;
        let mut exec = Session::new(self.tree.clone(), self.kb.clone(), Some(self.backend.clone()));
        let nodes = exec.step(&req).map_err(|e| match e {
            ExecError::Tree(t) => tree_error(t),
            ExecError::Predict(p) => ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", p.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
        let miss = exec.log().iter().rev().find_map(|e| match e {
            LogEntry::Miss { reason, .. } => Some(reason.clone()),
            _ => None,
        });
        let (tree, _) = exec.into_parts();
        if !nodes.is_empty() {
            let violations = tree.validate(Some(&self.kb));
            if let Some(v) = violations.first() {
                return Err(ApiError::internal(format!("mutation broke the tree: {v}")));
            }
            let answer = Answer {
                children: nodes
                    .iter()
                    .map(|id| {
                        let n = &tree.nodes()[id.0];
                        AnswerChild { mask: n.mask.clone(), class: n.class, is_instance: n.is_instance, score: None }
                    })
                    .collect(),
            };
            let old = std::mem::replace(&mut self.tree, tree);
            self.undo.push((old, self.pairs.len()));
            self.pairs.push((req, answer));
        }
        Ok(ActionOutcome { applied: nodes.iter().map(|id| self.view(*id)).collect(), miss, etag: self.tree.hash() })
    }

    pub fn undo(&mut self) -> Result<(), ApiError> {
        let (tree, n) = self.undo.pop().ok_or_else(|| ApiError::conflict("nothing_to_undo", "no step to undo"))?;
        self.tree = tree;
        self.pairs.truncate(n);
        Ok(())
    }

    /// The request log as a replayable stream.
    pub fn log_stream(&self) -> String {
        let header = StreamHeader {
            image_id: self.tree.image_id.clone(),
            width: self.tree.width(),
            height: self.tree.height(),
            kb_version: self.kb.version_id().to_string(),
            probe_source: ProbeSource::Recorded,
        };
        write_stream(&header, &self.pairs)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            session_id: self.id.clone(),
            image_id: self.tree.image_id.clone(),
            backend: self.backend_name.clone(),
            kb_version: self.kb.version_id().to_string(),
            tree: serde_json::from_slice(&self.tree.to_bytes()).unwrap_or(Value::Null),
            log: self.log_stream(),
        }
    }
}

/// On-disk session state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub session_id: String,
    pub image_id: String,
    pub backend: String,
    pub kb_version: String,
    pub tree: Value,
    pub log: String,
}
