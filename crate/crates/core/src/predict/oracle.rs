use std::collections::HashMap;
use std::sync::Arc;

use super::{PredictError, Predictor};
use crate::kb::{ConceptId, KbVersion};
use crate::probe::Probe;
use crate::request::{canonical_probe, Answer, AnswerChild};
use crate::tree::{NodeId, RecognitionTree, TreeNode};

/// Answers from ground-truth trees, keyed by image id.
#[derive(Debug, Default, Clone)]
pub struct OracleBackend {
    gt: HashMap<String, Arc<RecognitionTree>>,
}

impl OracleBackend {
    pub fn new(trees: impl IntoIterator<Item = RecognitionTree>) -> Self {
        Self { gt: trees.into_iter().map(|t| (t.image_id.clone(), Arc::new(t))).collect() }
    }

    pub fn insert(&mut self, tree: RecognitionTree) {
        self.gt.insert(tree.image_id.clone(), Arc::new(tree));
    }

    pub fn gt(&self, image_id: &str) -> Result<&RecognitionTree, PredictError> {
        self.gt
            .get(image_id)
            .map(|t| t.as_ref())
            .ok_or_else(|| PredictError::MissingPrediction(format!("no ground truth for image {image_id:?}")))
    }
}

/// The ground-truth instance a Type-II probe selects inside `region`: the
/// one whose canonical probe is exactly `probe`, else the first containing
/// it.
pub(crate) fn select_instance<'t>(gt: &'t RecognitionTree, region: &TreeNode, probe: Probe) -> Option<&'t TreeNode> {
    let kids: Vec<&TreeNode> = gt.children(region.id).collect();
    kids.iter()
        .find(|k| canonical_probe(k, &region.mask).is_some_and(|(p, _)| p == probe))
        .or_else(|| kids.iter().find(|k| k.mask.get(probe.a, probe.b)))
        .copied()
}

/// Ground-truth node corresponding to `node` of a tree grown from requests.
/// Semantic regions match by class; instances by probe selection, falling
/// back to the same-class instance with the highest IoU above 0.5.
pub fn corresponding_node(gt: &RecognitionTree, tree: &RecognitionTree, node: NodeId) -> Option<NodeId> {
    let n = tree.node(node).ok()?;
    let Some(parent) = n.parent else {
        return Some(NodeId::ROOT);
    };
    let gp = gt.node(corresponding_node(gt, tree, parent)?).ok()?;
    if !n.is_instance {
        return gt.children(gp.id).find(|k| k.class == n.class && !k.is_instance).map(|k| k.id);
    }
    if let Some(k) = n.probe.and_then(|p| select_instance(gt, gp, p)) {
        return Some(k.id);
    }
    let mut best: Option<(f64, NodeId)> = None;
    for k in gt.children(gp.id).filter(|k| k.class == n.class) {
        let iou = k.mask.iou_or_zero(&n.mask).ok()?;
        if iou > 0.5 && best.is_none_or(|(b, _)| iou > b) {
            best = Some((iou, k.id));
        }
    }
    best.map(|(_, id)| id)
}

impl Predictor for OracleBackend {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn answer_type1(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        classes: &[ConceptId],
        _kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let gt = self.gt(&tree.image_id)?;
        let target = tree.node(node)?;
        let Some(g) = corresponding_node(gt, tree, node) else {
            return Ok(Answer::default());
        };
        let mut children = Vec::new();
        for k in gt.children(g).filter(|k| classes.contains(&k.class)) {
            let mask = k.mask.clip(&target.mask)?;
            if !mask.is_empty() {
                children.push(AnswerChild { mask, class: k.class, is_instance: false, score: None });
            }
        }
        Ok(Answer { children })
    }

    fn answer_type2(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        probe: Probe,
        class: ConceptId,
        _kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let gt = self.gt(&tree.image_id)?;
        let target = tree.node(node)?;
        let region = corresponding_node(gt, tree, node).ok_or(PredictError::Lost)?;
        let inst = select_instance(gt, gt.node(region)?, probe).ok_or(PredictError::Lost)?;
        let mask = inst.mask.clip(&target.mask)?;
        if mask.is_empty() {
            return Err(PredictError::Lost);
        }
        Ok(Answer { children: vec![AnswerChild { mask, class, is_instance: true, score: Some(1.0) }] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbBuilder;
    use crate::mask::BinaryMask;
    use crate::request::{parse_requests, Request};
    use crate::tree::ChildSpec;

    fn scene() -> (KbVersion, RecognitionTree) {
        let mut b = KbBuilder::new();
        let road = b.child(ConceptId::SCENE, "road", false);
        let car = b.child(ConceptId::SCENE, "car", true);
        b.child(car, "wheel", false);
        let kb = b.build().unwrap();
        let mut t = RecognitionTree::new("img", 12, 6, &kb).unwrap();
        let spec = |m: BinaryMask, class, is_instance| ChildSpec { mask: m, class, is_instance, probe: None };
        let ids = t
            .attach_children(
                &kb,
                NodeId::ROOT,
                vec![
                    spec(BinaryMask::rect(12, 6, 0, 0, 12, 3).unwrap(), road, false),
                    spec(BinaryMask::rect(12, 6, 0, 3, 12, 6).unwrap(), car, false),
                ],
            )
            .unwrap();
        t.attach_children(
            &kb,
            ids[1],
            vec![
                spec(BinaryMask::rect(12, 6, 0, 3, 4, 6).unwrap(), car, true),
                spec(BinaryMask::rect(12, 6, 4, 3, 8, 6).unwrap(), car, true),
                spec(BinaryMask::rect(12, 6, 8, 3, 12, 6).unwrap(), car, true),
            ],
        )
        .unwrap();
        (kb, t)
    }

    #[test]
    fn oracle_answers_equal_parsed_answers() {
        let (kb, gt) = scene();
        let oracle = OracleBackend::new([gt.clone()]);
        let mut t = RecognitionTree::new("img", 12, 6, &kb).unwrap();
        for (req, expected) in parse_requests(&gt, &kb).unwrap() {
            let got = oracle.answer(&t, &req, &kb).unwrap();
            let stripped: Vec<_> = got.children.iter().map(|c| (c.mask.clone(), c.class, c.is_instance)).collect();
            let want: Vec<_> = expected.children.iter().map(|c| (c.mask.clone(), c.class, c.is_instance)).collect();
            assert_eq!(stripped, want);
            let probe = match req {
                Request::TypeII { probe, .. } => Some(probe),
                _ => None,
            };
            let specs = got.children.iter().map(|c| c.to_spec(probe)).collect();
            t.attach_children(&kb, req.node(), specs).unwrap();
        }
        assert!(t.isomorphic(&gt));
    }

    #[test]
    fn probe_inside_third_car_returns_it() {
        let (kb, gt) = scene();
        let oracle = OracleBackend::new([gt.clone()]);
        let region = gt.children(NodeId::ROOT).nth(1).unwrap().id;
        let ans = oracle.answer_type2(&gt, region, Probe::new(9, 4), ConceptId(2), &kb).unwrap();
        assert_eq!(ans.children[0].mask, BinaryMask::rect(12, 6, 8, 3, 12, 6).unwrap());
        let road = gt.children(NodeId::ROOT).next().unwrap().id;
        assert!(matches!(oracle.answer_type2(&gt, road, Probe::new(1, 1), ConceptId(1), &kb), Err(PredictError::Lost)));
    }

    #[test]
    fn unknown_image_is_missing() {
        let (kb, gt) = scene();
        let oracle = OracleBackend::default();
        let err = oracle.answer_type1(&gt, NodeId::ROOT, &[ConceptId(1)], &kb).unwrap_err();
        assert!(matches!(err, PredictError::MissingPrediction(_)));
    }
}
