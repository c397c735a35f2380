//! Request execution: sessions that grow a tree one request at a time,
//! ground-truth-driven probing runs, and dense non-probing inference.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{ConceptId, KbVersion};
use crate::mask::{BinaryMask, MaskError};
use crate::predict::{PredictError, Predictor};
use crate::probe::{
    evaluation_region, grid_probes, sample_probe, EvaluationRegion, GammaPolicy, GridPolicy, Probe, ProbeError,
};
use crate::request::{Answer, Request};
use crate::tree::{NodeId, RecognitionTree, TreeError};

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("session is closed")]
    Closed,
    #[error("session has no backend")]
    NoBackend,
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogEntry {
    Applied {
        request: Request,
        nodes: Vec<NodeId>,
    },
    /// The backend had no answer; nothing was attached.
    Miss {
        request: Request,
        reason: String,
    },
    /// A ground-truth instance whose region the prediction never reached.
    Lost {
        region: NodeId,
        gt_node: NodeId,
    },
}

/// A tree under construction plus the backend answering its requests.
pub struct Session {
    tree: RecognitionTree,
    kb: Arc<KbVersion>,
    backend: Option<Arc<dyn Predictor>>,
    log: Vec<LogEntry>,
    closed: bool,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("image_id", &self.tree.image_id)
            .field("nodes", &self.tree.len())
            .field("backend", &self.backend.as_ref().map(|b| b.name()))
            .field("closed", &self.closed)
            .finish()
    }
}

impl Session {
    pub fn new(tree: RecognitionTree, kb: Arc<KbVersion>, backend: Option<Arc<dyn Predictor>>) -> Self {
        Self { tree, kb, backend, log: Vec::new(), closed: false }
    }

    pub fn tree(&self) -> &RecognitionTree {
        &self.tree
    }

    pub fn kb(&self) -> &KbVersion {
        &self.kb
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn into_parts(self) -> (RecognitionTree, Vec<LogEntry>) {
        (self.tree, self.log)
    }

    /// Asks the backend and attaches its answer. Backend misses are logged
    /// and yield no nodes.
    pub fn step(&mut self, req: &Request) -> Result<Vec<NodeId>, ExecError> {
        if self.closed {
            return Err(ExecError::Closed);
        }
        let backend = self.backend.clone().ok_or(ExecError::NoBackend)?;
        match backend.answer(&self.tree, req, &self.kb) {
            Ok(answer) => self.apply(req, answer),
            Err(e) if e.is_miss() => {
                log::debug!("{}: miss on {req:?}: {e}", self.tree.image_id);
                self.log.push(LogEntry::Miss { request: req.clone(), reason: e.to_string() });
                Ok(vec![])
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Attaches a given answer, e.g. one recorded in a script. Children are
    /// clipped to the target; those left empty, and Type-I children outside
    /// the active classes, are dropped.
    pub fn apply(&mut self, req: &Request, answer: Answer) -> Result<Vec<NodeId>, ExecError> {
        if self.closed {
            return Err(ExecError::Closed);
        }
        let target = self.tree.node(req.node())?.mask.clone();
        let probe = match req {
            Request::TypeII { probe, .. } => Some(*probe),
            Request::TypeI { .. } => None,
        };
        let mut specs = Vec::with_capacity(answer.children.len());
        for c in &answer.children {
            if let Request::TypeI { active_classes, .. } = req {
                if !active_classes.contains(&c.class) {
                    continue;
                }
            }
            let mut spec = c.to_spec(probe);
            spec.mask = spec.mask.clip(&target)?;
            if !spec.mask.is_empty() {
                specs.push(spec);
            }
        }
        let nodes = self.tree.attach_children(&self.kb, req.node(), specs)?;
        self.log.push(LogEntry::Applied { request: req.clone(), nodes: nodes.clone() });
        Ok(nodes)
    }

    /// Applies requests in order, stopping at the first structural error.
    pub fn run_all(&mut self, requests: &[Request]) -> Result<(), ExecError> {
        for r in requests {
            self.step(r)?;
        }
        Ok(())
    }

    /// Replays recorded request/answer pairs.
    pub fn run_script(&mut self, pairs: &[(Request, Answer)]) -> Result<(), ExecError> {
        for (r, a) in pairs {
            self.apply(r, a.clone())?;
        }
        Ok(())
    }

    /// Probing-mode run driven by `gt`: each ground-truth instance is
    /// clicked inside `predicted region ∩ gt instance`, with the probe drawn
    /// under `gamma`. Instances whose region was missed are logged as lost.
    pub fn run_probing(&mut self, gt: &RecognitionTree, gamma: &GammaPolicy) -> Result<(), ExecError> {
        let mut queue = VecDeque::from([(NodeId::ROOT, NodeId::ROOT)]);
        while let Some((g, p)) = queue.pop_front() {
            let gnode = gt.node(g)?;
            let kids: Vec<_> = gt.children(g).collect();
            if kids.is_empty() {
                continue;
            }
            if gnode.is_instance {
                let order = self.kb.sub_knowledge_ids(gnode.class).map_err(TreeError::from)?;
                let active: Vec<ConceptId> =
                    order.iter().copied().filter(|c| kids.iter().any(|k| k.class == *c)).collect();
                let added = self.step(&Request::TypeI { node: p, active_classes: active })?;
                for id in added {
                    let class = self.tree.node(id)?.class;
                    if let Some(k) = kids.iter().find(|k| k.class == class) {
                        queue.push_back((k.id, id));
                    }
                }
            } else {
                let pred_region = self.tree.node(p)?.mask.clone();
                for k in kids {
                    let region = match evaluation_region(&pred_region, &k.mask)? {
                        EvaluationRegion::Lost => {
                            self.log.push(LogEntry::Lost { region: p, gt_node: k.id });
                            continue;
                        }
                        EvaluationRegion::Region(r) => r,
                    };
                    let policy = GammaPolicy { seed: probe_seed(gamma.seed, &gt.image_id, k.id), ..*gamma };
                    let probe = sample_probe(&region, &policy)?.probe;
                    let added = self.step(&Request::TypeII { node: p, probe, class: k.class })?;
                    if let Some(&id) = added.first() {
                        queue.push_back((k.id, id));
                    }
                }
            }
        }
        Ok(())
    }

    /// Dense Type-II inference over a semantic region: one request per grid
    /// probe, then class-wise greedy NMS. Kept instances are attached in
    /// score order. With `disjoint`, pixels claimed by a higher-scoring
    /// instance are removed from lower ones.
    pub fn non_probing_instances(
        &mut self,
        region: NodeId,
        grid: &GridPolicy,
        nms: &NmsConfig,
    ) -> Result<Vec<NodeId>, ExecError> {
        if self.closed {
            return Err(ExecError::Closed);
        }
        let backend = self.backend.clone().ok_or(ExecError::NoBackend)?;
        let node = self.tree.node(region)?;
        if node.is_instance {
            return Err(PredictError::WrongKind.into());
        }
        let (class, mask) = (node.class, node.mask.clone());
        let mut cands: Vec<(BinaryMask, f64, Probe)> = Vec::new();
        for probe in grid_probes(&mask, grid) {
            match backend.answer_type2(&self.tree, region, probe, class, &self.kb) {
                Ok(ans) => {
                    if let Some(c) = ans.children.into_iter().next() {
                        let m = c.mask.clip(&mask)?;
                        if !m.is_empty() {
                            cands.push((m, c.score.unwrap_or(0.0), probe));
                        }
                    }
                }
                Err(e) if e.is_miss() => {}
                Err(e) => return Err(e.into()),
            }
        }
        let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
        let keep = nms.mode.run(&scores, |i, j| cands[i].0.iou_or_zero(&cands[j].0).unwrap_or(0.0), nms.threshold);
        let mut claimed = BinaryMask::empty(mask.width(), mask.height())?;
        let mut ids = Vec::with_capacity(keep.len());
        for i in keep {
            let (m, score, probe) = &cands[i];
            let m = if nms.disjoint { m.difference(&claimed)? } else { m.clone() };
            if m.is_empty() {
                continue;
            }
            if nms.disjoint {
                claimed = claimed.union(&m)?;
            }
            let req = Request::TypeII { node: region, probe: *probe, class };
            let answer = Answer {
                children: vec![crate::request::AnswerChild { mask: m, class, is_instance: true, score: Some(*score) }],
            };
            ids.extend(self.apply(&req, answer)?);
        }
        Ok(ids)
    }

    /// Full inference without ground truth: Type-I on every instance that
    /// has parts, dense Type-II on every countable region, down to
    /// `max_levels` instance levels.
    pub fn run_non_probing(&mut self, grid: &GridPolicy, nms: &NmsConfig, max_levels: usize) -> Result<(), ExecError> {
        let mut queue = VecDeque::from([NodeId::ROOT]);
        while let Some(id) = queue.pop_front() {
            let node = self.tree.node(id)?;
            let class = node.class;
            if node.is_instance {
                if self.tree.level(id) > max_levels || !self.kb.has_parts(class) {
                    continue;
                }
                let mut classes = self.kb.sub_knowledge_ids(class).map_err(TreeError::from)?.to_vec();
                if let Some(active) = &self.tree.active_classes {
                    classes.retain(|c| active.contains(c));
                }
                if classes.is_empty() {
                    continue;
                }
                queue.extend(self.step(&Request::TypeI { node: id, active_classes: classes })?);
            } else if self.kb.is_countable(class) {
                queue.extend(self.non_probing_instances(id, grid, nms)?);
            }
        }
        Ok(())
    }
}

/// Greedy NMS over candidates with the given scores. Candidates are visited
/// by descending score, ties by index; one is kept iff its IoU with every
/// kept candidate is at most `threshold`. Returns kept indices in visit
/// order.
pub fn greedy_nms(scores: &[f64], iou: impl Fn(usize, usize) -> f64, threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(k, i) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Non-greedy variant: a candidate is kept iff its IoU with every
/// higher-ranked candidate, kept or not, is at most `threshold`. Unlike
/// [`greedy_nms`] the kept set only shrinks as the threshold drops.
pub fn fast_nms(scores: &[f64], iou: impl Fn(usize, usize) -> f64, threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    (0..order.len()).filter(|&r| order[..r].iter().all(|&k| iou(k, order[r]) <= threshold)).map(|r| order[r]).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    #[default]
    Greedy,
    Fast,
}

impl NmsMode {
    pub fn run(self, scores: &[f64], iou: impl Fn(usize, usize) -> f64, threshold: f64) -> Vec<usize> {
        match self {
            NmsMode::Greedy => greedy_nms(scores, iou, threshold),
            NmsMode::Fast => fast_nms(scores, iou, threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub threshold: f64,
    #[serde(default)]
    pub mode: NmsMode,
    /// Give contested pixels to the higher-scoring instance.
    #[serde(default)]
    pub disjoint: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_NMS_THRESHOLD, mode: NmsMode::Greedy, disjoint: false }
    }
}

/// Per-instance sampling seed, stable across runs and thread schedules.
pub fn probe_seed(seed: u64, image_id: &str, gt_node: NodeId) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.update((gt_node.0 as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum RunMode {
    Probing { gamma: GammaPolicy },
    NonProbing { grid: GridPolicy, nms: NmsConfig, max_levels: usize },
}

/// Result for one image of a batch.
#[derive(Debug)]
pub struct ImageRun {
    pub image_id: String,
    pub result: Result<RecognitionTree, String>,
    pub log: Vec<LogEntry>,
}

/// Runs every image in parallel against one shared backend.
pub fn run_batch(
    gts: &[RecognitionTree],
    kb: Arc<KbVersion>,
    backend: Arc<dyn Predictor>,
    mode: &RunMode,
) -> Vec<ImageRun> {
    gts.par_iter()
        .map(|gt| {
            let start = match RecognitionTree::new(gt.image_id.clone(), gt.width(), gt.height(), &kb) {
                Ok(mut t) => {
                    t.active_classes = gt.active_classes.clone();
                    t
                }
                Err(e) => return ImageRun { image_id: gt.image_id.clone(), result: Err(e.to_string()), log: vec![] },
            };
            let mut s = Session::new(start, kb.clone(), Some(backend.clone()));
            let r = match mode {
                RunMode::Probing { gamma } => s.run_probing(gt, gamma),
                RunMode::NonProbing { grid, nms, max_levels } => s.run_non_probing(grid, nms, *max_levels),
            };
            let (tree, log) = s.into_parts();
            ImageRun { image_id: gt.image_id.clone(), result: r.map(|_| tree).map_err(|e| e.to_string()), log }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbBuilder;
    use crate::predict::OracleBackend;
    use crate::request::parse_requests;
    use crate::tree::ChildSpec;
    use proptest::prelude::*;

    fn fixture() -> (Arc<KbVersion>, RecognitionTree) {
        let mut b = KbBuilder::new();
        let road = b.child(ConceptId::SCENE, "road", false);
        let car = b.child(ConceptId::SCENE, "car", true);
        b.child(car, "window", false);
        b.child(car, "wheel", false);
        let kb = b.build().unwrap();
        let (w, h) = (32, 16);
        let mut t = RecognitionTree::new("img", w, h, &kb).unwrap();
        let sem = |m, class| ChildSpec { mask: m, class, is_instance: false, probe: None };
        let r = t
            .attach_children(
                &kb,
                NodeId::ROOT,
                vec![
                    sem(BinaryMask::rect(w, h, 0, 0, 32, 8).unwrap(), road),
                    sem(BinaryMask::rect(w, h, 0, 8, 32, 16).unwrap(), car),
                ],
            )
            .unwrap();
        let inst = |a0, a1| ChildSpec {
            mask: BinaryMask::rect(w, h, a0, 8, a1, 16).unwrap(),
            class: car,
            is_instance: true,
            probe: None,
        };
        let cars = t.attach_children(&kb, r[1], vec![inst(0, 16), inst(16, 32)]).unwrap();
        let window = kb.find("window").unwrap();
        let wheel = kb.find("wheel").unwrap();
        t.attach_children(
            &kb,
            cars[0],
            vec![
                sem(BinaryMask::rect(w, h, 0, 8, 16, 12).unwrap(), window),
                sem(BinaryMask::rect(w, h, 0, 12, 16, 16).unwrap(), wheel),
            ],
        )
        .unwrap();
        (Arc::new(kb), t)
    }

    fn session(kb: &Arc<KbVersion>, gt: &RecognitionTree) -> Session {
        let start = RecognitionTree::new("img", gt.width(), gt.height(), kb).unwrap();
        Session::new(start, kb.clone(), Some(Arc::new(OracleBackend::new([gt.clone()]))))
    }

    #[test]
    fn oracle_run_all_is_isomorphic() {
        let (kb, gt) = fixture();
        let mut s = session(&kb, &gt);
        let reqs: Vec<Request> = parse_requests(&gt, &kb).unwrap().into_iter().map(|p| p.0).collect();
        s.run_all(&reqs).unwrap();
        assert!(s.tree().isomorphic(&gt));
        assert!(s.tree().validate(Some(&kb)).is_empty());
        s.close();
        assert!(matches!(s.step(&reqs[0]), Err(ExecError::Closed)));
    }

    #[test]
    fn empty_script_leaves_root() {
        let (kb, gt) = fixture();
        let mut s = session(&kb, &gt);
        s.run_script(&[]).unwrap();
        assert_eq!(s.tree().len(), 1);
    }

    #[test]
    fn lost_is_logged_not_fatal() {
        let (kb, gt) = fixture();
        let mut s = session(&kb, &gt);
        let car = kb.find("car").unwrap();
        let road = kb.find("road").unwrap();
        let ids = s.step(&Request::TypeI { node: NodeId::ROOT, active_classes: vec![road, car] }).unwrap();
        assert_eq!(ids.len(), 2);
        let got = s.step(&Request::TypeII { node: ids[0], probe: Probe::new(1, 1), class: road }).unwrap();
        assert!(got.is_empty());
        assert!(matches!(s.log().last(), Some(LogEntry::Miss { .. })));
    }

    #[test]
    fn probing_run_with_oracle_matches_gt() {
        let (kb, gt) = fixture();
        for gamma in [0.0, 0.5, 1.0] {
            let mut s = session(&kb, &gt);
            s.run_probing(&gt, &GammaPolicy::new(gamma, 7).unwrap()).unwrap();
            assert!(s.tree().isomorphic(&gt), "gamma {gamma}");
        }
    }

    #[test]
    fn non_probing_with_oracle_finds_both_cars() {
        let (kb, gt) = fixture();
        let mut s = session(&kb, &gt);
        s.run_non_probing(&GridPolicy::new(4).unwrap(), &NmsConfig::default(), 8).unwrap();
        assert!(s.tree().isomorphic(&gt));
    }

    #[test]
    fn nms_defaults() {
        let c = NmsConfig::default();
        assert_eq!((c.threshold, c.mode, c.disjoint), (0.6, NmsMode::Greedy, false));
    }

    #[test]
    fn nms_hand_case() {
        let iou = [[1.0, 0.7, 0.3], [0.7, 1.0, 0.3], [0.3, 0.3, 1.0]];
        assert_eq!(greedy_nms(&[0.9, 0.8, 0.7], |i, j| iou[i][j], DEFAULT_NMS_THRESHOLD), vec![0, 2]);
        // identical masks collapse, disjoint ones survive
        assert_eq!(greedy_nms(&[0.5, 0.5], |_, _| 1.0, 0.6), vec![0]);
        assert_eq!(greedy_nms(&[0.5, 0.5], |i, j| if i == j { 1.0 } else { 0.0 }, 0.6), vec![0, 1]);
        assert_eq!(greedy_nms(&[], |_, _| 0.0, 0.6), Vec::<usize>::new());
    }

    #[test]
    fn batch_reports_missing_images() {
        let (kb, gt) = fixture();
        let mut other = gt.clone();
        other.image_id = "other".into();
        let backend: Arc<dyn Predictor> = Arc::new(OracleBackend::new([gt.clone()]));
        let runs = run_batch(&[gt, other], kb, backend, &RunMode::Probing { gamma: GammaPolicy::default() });
        assert_eq!(runs.len(), 2);
        assert!(runs[0].result.as_ref().unwrap().len() > 1);
        // the missing image yields a root-only tree with a logged miss
        assert_eq!(runs[1].result.as_ref().unwrap().len(), 1);
        assert!(matches!(runs[1].log[0], LogEntry::Miss { .. }));
    }

    fn random_boxes(n: usize, seed: u64) -> (Vec<BinaryMask>, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let boxes = (0..n)
            .map(|_| {
                let a0 = rng.random_range(0..12);
                let b0 = rng.random_range(0..12);
                BinaryMask::rect(16, 16, a0, b0, a0 + rng.random_range(1..5), b0 + rng.random_range(1..5)).unwrap()
            })
            .collect();
        (boxes, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn greedy_count_is_not_monotone() {
        // rectangles where a lower threshold keeps more: #5 suppresses #4 at
        // 0.128 but #4 then no longer suppresses #0 and #1
        let r = |a0, b0, a1, b1| BinaryMask::rect(16, 16, a0, b0, a1, b1).unwrap();
        let boxes = [
            r(0, 10, 2, 14),
            r(2, 8, 5, 11),
            r(10, 7, 14, 9),
            r(4, 6, 8, 7),
            r(0, 8, 5, 12),
            r(8, 6, 10, 7),
            r(0, 5, 2, 9),
        ];
        let scores = [0.731, 0.458, 0.132, 0.377, 0.849, 0.883, 0.918];
        let iou = |i: usize, j: usize| boxes[i].iou_or_zero(&boxes[j]).unwrap();
        assert_eq!(greedy_nms(&scores, iou, 0.0297).len(), 6);
        assert_eq!(greedy_nms(&scores, iou, 0.1284).len(), 5);
        assert!(fast_nms(&scores, iou, 0.0297).len() <= fast_nms(&scores, iou, 0.1284).len());
    }

    proptest! {
        #[test]
        fn greedy_kept_set_is_sound(n in 0usize..9, seed in any::<u64>(), t in 0.0f64..1.0) {
            let (boxes, scores) = random_boxes(n, seed);
            let iou = |i: usize, j: usize| boxes[i].iou_or_zero(&boxes[j]).unwrap();
            let kept = greedy_nms(&scores, iou, t);
            for (x, &i) in kept.iter().enumerate() {
                for &j in &kept[x + 1..] {
                    prop_assert!(iou(i, j) <= t);
                }
            }
            for d in (0..n).filter(|d| !kept.contains(d)) {
                prop_assert!(kept.iter().any(|&k| scores[k] >= scores[d] && iou(k, d) > t));
            }
            prop_assert_eq!(greedy_nms(&scores, iou, 1.0).len(), n);
        }

        #[test]
        fn fast_nms_shrinks_with_threshold(n in 0usize..9, seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (boxes, scores) = random_boxes(n, seed);
            let iou = |i: usize, j: usize| boxes[i].iou_or_zero(&boxes[j]).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let small = fast_nms(&scores, iou, lo);
            let big = fast_nms(&scores, iou, hi);
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }
    }
}
