//! Requests and answers, and the parser that turns an annotated tree into
//! the ordered request stream that would rebuild it.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ConceptId, KbError, KbVersion};
use crate::mask::{BinaryMask, Rle, RleError};
use crate::probe::Probe;
use crate::tree::{ChildSpec, NodeId, RecognitionTree, TreeNode, Violation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Request {
    /// Whole-to-part segmentation of an instance node.
    #[serde(rename = "I")]
    TypeI { node: NodeId, active_classes: Vec<ConceptId> },
    /// Extract the instance under `probe` from a semantic-region node.
    #[serde(rename = "II")]
    TypeII { node: NodeId, probe: Probe, class: ConceptId },
}

impl Request {
    pub fn node(&self) -> NodeId {
        match self {
            Request::TypeI { node, .. } | Request::TypeII { node, .. } => *node,
        }
    }

    pub fn is_type1(&self) -> bool {
        matches!(self, Request::TypeI { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerChild {
    pub mask: BinaryMask,
    pub class: ConceptId,
    pub is_instance: bool,
    /// Confidence of a Type-II answer, when the backend produces one.
    pub score: Option<f64>,
}

impl AnswerChild {
    pub fn to_spec(&self, probe: Option<Probe>) -> ChildSpec {
        ChildSpec { mask: self.mask.clone(), class: self.class, is_instance: self.is_instance, probe }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Answer {
    pub children: Vec<AnswerChild>,
}

#[derive(Debug, Error)]
pub enum RequestError {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("expected a Type-I request")]
    WrongKind,
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("malformed request stream line {line}: {message}")]
    MalformedStream { line: usize, message: String },
}

/// Where a ground-truth instance's probe came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSource {
    /// The pixel recorded on the instance node.
    Recorded,
    /// The set pixel nearest the mass center of instance ∩ region.
    MassCenter,
}

/// Probe for a ground-truth instance: the recorded click when present,
/// else the inside mass-center pixel of `instance ∩ region`, or of the
/// instance alone when that intersection is empty.
pub fn canonical_probe(instance: &TreeNode, region: &BinaryMask) -> Option<(Probe, ProbeSource)> {
    if let Some(p) = instance.probe {
        return Some((p, ProbeSource::Recorded));
    }
    let inter = instance.mask.intersection(region).ok()?;
    let source = if inter.is_empty() { &instance.mask } else { &inter };
    let mc = source.mass_center().ok()?;
    Some((Probe::from(mc.inside), ProbeSource::MassCenter))
}

/// Breadth-first request stream that rebuilds `gt` from a root-only tree.
/// Node ids in the requests refer to the tree being rebuilt, where nodes are
/// numbered in the order answers attach them.
pub fn parse_requests(gt: &RecognitionTree, kb: &KbVersion) -> Result<Vec<(Request, Answer)>, RequestError> {
    let violations: Vec<Violation> = gt.validate(Some(kb));
    if let Some(v) = violations.first() {
        return Err(RequestError::InvalidTree(v.to_string()));
    }
    let mut out = Vec::new();
    let mut next_id = 1usize;
    let mut queue = VecDeque::from([(gt.root(), NodeId::ROOT)]);
    while let Some((node, replay_id)) = queue.pop_front() {
        let kids: Vec<&TreeNode> = gt.children(node.id).collect();
        if kids.is_empty() {
            continue;
        }
        if node.is_instance {
            let order = kb.sub_knowledge_ids(node.class)?;
            let present: BTreeSet<ConceptId> = kids.iter().map(|k| k.class).collect();
            let active: Vec<ConceptId> = order.iter().copied().filter(|c| present.contains(c)).collect();
            let mut children = Vec::with_capacity(kids.len());
            for k in &kids {
                children.push(AnswerChild { mask: k.mask.clone(), class: k.class, is_instance: false, score: None });
                queue.push_back((*k, NodeId(next_id)));
                next_id += 1;
            }
            out.push((Request::TypeI { node: replay_id, active_classes: active }, Answer { children }));
        } else {
            for k in kids {
                let (probe, _) = canonical_probe(k, &node.mask)
                    .ok_or_else(|| RequestError::InvalidTree(format!("instance {} is empty", k.id)))?;
                let answer = Answer {
                    children: vec![AnswerChild {
                        mask: k.mask.clone(),
                        class: k.class,
                        is_instance: true,
                        score: None,
                    }],
                };
                out.push((Request::TypeII { node: replay_id, probe, class: k.class }, answer));
                queue.push_back((k, NodeId(next_id)));
                next_id += 1;
            }
        }
    }
    Ok(out)
}

/// Supervision flags over the sub-knowledge of the target's class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveClassMask {
    pub classes: Vec<ConceptId>,
    pub flags: Vec<bool>,
    /// Set when no class is active; such a request should not exist.
    pub empty_warning: bool,
}

pub fn active_class_mask(
    req: &Request,
    tree: &RecognitionTree,
    kb: &KbVersion,
) -> Result<ActiveClassMask, RequestError> {
    let Request::TypeI { node, active_classes } = req else {
        return Err(RequestError::WrongKind);
    };
    let n = tree.node(*node).map_err(|e| RequestError::InvalidTree(e.to_string()))?;
    let classes = kb.sub_knowledge_ids(n.class)?.to_vec();
    let flags: Vec<bool> = classes.iter().map(|c| active_classes.contains(c)).collect();
    let empty_warning = !flags.iter().any(|&f| f);
    if empty_warning {
        log::warn!("Type-I request on node {node} has no active classes");
    }
    Ok(ActiveClassMask { classes, flags, empty_warning })
}

/// First line of a request-stream file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub kb_version: String,
    pub probe_source: ProbeSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerLine {
    class: ConceptId,
    is_instance: bool,
    rle: Rle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StreamLine {
    #[serde(flatten)]
    request: Request,
    answer: Vec<AnswerLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: StreamHeader,
}

/// Writes the JSON Lines request stream: a header line, then one line per
/// request with its answer.
pub fn write_stream(header: &StreamHeader, pairs: &[(Request, Answer)]) -> String {
    let mut out = serde_json::to_string(&HeaderLine { header: header.clone() }).expect("header serializes");
    out.push('\n');
    for (req, ans) in pairs {
        let line = StreamLine {
            request: req.clone(),
            answer: ans
                .children
                .iter()
                .map(|c| AnswerLine {
                    class: c.class,
                    is_instance: c.is_instance,
                    rle: Rle::encode(&c.mask),
                    score: c.score,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    out
}

pub fn read_stream(text: &str) -> Result<(StreamHeader, Vec<(Request, Answer)>), RequestError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, message: String| RequestError::MalformedStream { line: line + 1, message };
    let (i, first) = lines.next().ok_or_else(|| bad(0, "empty stream".into()))?;
    let header: HeaderLine = serde_json::from_str(first).map_err(|e| bad(i, e.to_string()))?;
    let header = header.header;
    let mut pairs = Vec::new();
    for (i, l) in lines {
        let line: StreamLine = serde_json::from_str(l).map_err(|e| bad(i, e.to_string()))?;
        let mut children = Vec::with_capacity(line.answer.len());
        for a in line.answer {
            if a.rle.width != header.width || a.rle.height != header.height {
                return Err(bad(i, "answer mask size differs from header".into()));
            }
            let mask = a.rle.decode().map_err(|e: RleError| bad(i, e.to_string()))?;
            children.push(AnswerChild { mask, class: a.class, is_instance: a.is_instance, score: a.score });
        }
        pairs.push((line.request, Answer { children }));
    }
    Ok((header, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::fixtures::cpp_kb;

    fn rect(a0: u32, b0: u32, a1: u32, b1: u32) -> BinaryMask {
        BinaryMask::rect(32, 32, a0, b0, a1, b1).unwrap()
    }

    fn sem(class: ConceptId, m: BinaryMask) -> ChildSpec {
        ChildSpec { mask: m, class, is_instance: false, probe: None }
    }

    fn inst(class: ConceptId, m: BinaryMask) -> ChildSpec {
        ChildSpec { mask: m, class, is_instance: true, probe: None }
    }

    #[test]
    fn flat_scene_gives_one_request() {
        let kb = cpp_kb();
        let mut t = RecognitionTree::new("x", 32, 32, &kb).unwrap();
        t.attach_children(
            &kb,
            NodeId::ROOT,
            vec![sem(kb.find("road").unwrap(), rect(0, 16, 32, 32)), sem(kb.find("sky").unwrap(), rect(0, 0, 32, 16))],
        )
        .unwrap();
        let reqs = parse_requests(&t, &kb).unwrap();
        assert_eq!(reqs.len(), 1);
        match &reqs[0].0 {
            // stored sub-knowledge order: road precedes sky
            Request::TypeI { node, active_classes } => {
                assert_eq!(*node, NodeId::ROOT);
                assert_eq!(active_classes, &vec![kb.find("road").unwrap(), kb.find("sky").unwrap()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn cars_scene() -> (RecognitionTree, KbVersion) {
        let kb = cpp_kb();
        let car = kb.find("car").unwrap();
        let mut t = RecognitionTree::new("cars", 32, 32, &kb).unwrap();
        let ids = t
            .attach_children(
                &kb,
                NodeId::ROOT,
                vec![sem(kb.find("road").unwrap(), rect(0, 16, 32, 32)), sem(car, rect(0, 0, 32, 16))],
            )
            .unwrap();
        let cars = t
            .attach_children(&kb, ids[1], vec![inst(car, rect(0, 0, 10, 16)), inst(car, rect(12, 0, 22, 16))])
            .unwrap();
        for c in cars {
            let m = t.node(c).unwrap().mask.clone();
            let bx = m.bbox().unwrap();
            let parts: Vec<ChildSpec> = kb
                .sub_knowledge_ids(car)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    sem(p, BinaryMask::rect(32, 32, bx.a0 + 2 * k as u32, 0, bx.a0 + 2 * k as u32 + 2, 16).unwrap())
                })
                .collect();
            t.attach_children(&kb, c, parts).unwrap();
        }
        (t, kb)
    }

    #[test]
    fn cars_with_parts() {
        let (t, kb) = cars_scene();
        let reqs = parse_requests(&t, &kb).unwrap();
        let kinds: Vec<&str> = reqs.iter().map(|(r, _)| if r.is_type1() { "I" } else { "II" }).collect();
        assert_eq!(kinds, ["I", "II", "II", "I", "I"]);
        for (r, a) in &reqs[3..] {
            let Request::TypeI { active_classes, .. } = r else { unreachable!() };
            assert_eq!(active_classes.len(), 5);
            assert_eq!(a.children.len(), 5);
        }
        // count formula: instances with semantic children + non-root instances
        let with_kids = t.nodes().iter().filter(|n| n.is_instance && !n.children.is_empty()).count();
        let non_root = t.nodes().iter().filter(|n| n.is_instance).count() - 1;
        assert_eq!(reqs.len(), with_kids + non_root);
        for (r, a) in &reqs {
            if let Request::TypeII { probe, .. } = r {
                assert!(a.children[0].mask.get(probe.a, probe.b));
            }
        }
    }

    #[test]
    fn probe_falls_back_to_instance_mask() {
        let (t, _) = cars_scene();
        let car_inst = t.nodes().iter().find(|n| n.is_instance && n.id != NodeId::ROOT).unwrap();
        // a region that misses the instance entirely
        let elsewhere = rect(25, 20, 32, 32);
        let (p, src) = canonical_probe(car_inst, &elsewhere).unwrap();
        assert_eq!(src, ProbeSource::MassCenter);
        assert!(car_inst.mask.get(p.a, p.b));
    }

    #[test]
    fn active_mask_patterns() {
        let kb = cpp_kb();
        let person = kb.find("person").unwrap();
        let mut t = RecognitionTree::new("p", 32, 32, &kb).unwrap();
        let r = t.attach_children(&kb, NodeId::ROOT, vec![sem(person, rect(0, 0, 8, 16))]).unwrap()[0];
        let i = t.attach_children(&kb, r, vec![inst(person, rect(0, 0, 8, 16))]).unwrap()[0];
        let head = kb.find("scene/person/head").unwrap();
        let torso = kb.find("scene/person/torso").unwrap();
        let req = Request::TypeI { node: i, active_classes: vec![head, torso] };
        let m = active_class_mask(&req, &t, &kb).unwrap();
        assert_eq!(m.flags, [true, true, false, false]);
        let all = Request::TypeI { node: i, active_classes: kb.sub_knowledge_ids(person).unwrap().to_vec() };
        assert!(active_class_mask(&all, &t, &kb).unwrap().flags.iter().all(|&f| f));
        let none = Request::TypeI { node: i, active_classes: vec![] };
        let m = active_class_mask(&none, &t, &kb).unwrap();
        assert!(m.empty_warning && m.flags.iter().all(|&f| !f));
        let t2 = Request::TypeII { node: r, probe: Probe::new(1, 1), class: person };
        assert!(matches!(active_class_mask(&t2, &t, &kb), Err(RequestError::WrongKind)));
    }

    #[test]
    fn stream_round_trip() {
        let (t, kb) = cars_scene();
        let reqs = parse_requests(&t, &kb).unwrap();
        let header = StreamHeader {
            image_id: t.image_id.clone(),
            width: 32,
            height: 32,
            kb_version: kb.version_id().into(),
            probe_source: ProbeSource::MassCenter,
        };
        let text = write_stream(&header, &reqs);
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"kind":"I","node":0,"active_classes":"#));
        let (h2, back) = read_stream(&text).unwrap();
        assert_eq!(h2, header);
        assert_eq!(back, reqs);
        assert!(read_stream("").is_err());
        assert!(read_stream("{\"header\":1}\n").is_err());
    }
}
