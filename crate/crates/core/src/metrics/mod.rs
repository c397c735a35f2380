//! Hierarchical panoptic quality and companions: PQ, PartPQ and per-level
//! mIoU.
//!
//! Scores are computed on units. Below an instance, a non-countable child
//! class contributes its single semantic region; a countable one
//! contributes the instances annotated inside its region, or the region
//! itself when the ground truth annotates no instances there. At the root
//! the units of every image are pooled per class, which makes HPQ on flat
//! trees coincide with PQ.

mod miou;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ConceptId, KbResolver, KbVersion};
use crate::mask::MaskError;
use crate::tree::{NodeId, RecognitionTree, TreeNode};

pub use miou::{miou_per_level, LevelIou};
pub use report::{ClassRow, Counts, MetricKind, MetricReport, Provenance, Subset};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("class mismatch: gt {gt} vs pred {pred}")]
    ClassMismatch { gt: ConceptId, pred: ConceptId },
    #[error("knowledge base version {0} cannot be resolved")]
    VersionMismatch(String),
    #[error("pair {0}: {1}")]
    PairMismatch(String, String),
    #[error("tree {0} is deeper than instance -> parts")]
    DepthExceeded(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Pairs form when mask IoU is strictly above this.
    pub match_threshold: f64,
    /// A matched pair is a true positive when its score is at least this.
    pub tp_threshold: f64,
    /// Count predicted children of classes the ground truth left unlabeled
    /// under a node as false positives.
    pub strict_fp: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { match_threshold: 0.5, tp_threshold: 0.5, strict_fp: false }
    }
}

/// TP/FP/FN outcome for one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSets {
    /// `(gt node, pred node, pair score)`.
    pub tp: Vec<(NodeId, NodeId, f64)>,
    pub fp: Vec<NodeId>,
    pub fn_: Vec<NodeId>,
}

impl MatchSets {
    /// `Σ score / (|TP| + ½|FP| + ½|FN|)`, `None` when every set is empty.
    pub fn quality(&self) -> Option<f64> {
        Accum::from(self).quality()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Accum {
    sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl From<&MatchSets> for Accum {
    fn from(m: &MatchSets) -> Self {
        Accum { sum: m.tp.iter().map(|t| t.2).sum(), tp: m.tp.len(), fp: m.fp.len(), fn_: m.fn_.len() }
    }
}

impl Accum {
    fn add(&mut self, o: Accum) {
        self.sum += o.sum;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    fn quality(&self) -> Option<f64> {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        (d > 0.0).then(|| self.sum / d)
    }
}

/// Pairs each gt unit with at most one pred unit by mask IoU above the
/// match threshold (highest IoU first), scores pairs with `score`, and
/// demotes pairs scoring below the TP threshold to FP + FN.
pub fn match_units(
    gt: &[&TreeNode],
    pred: &[&TreeNode],
    cfg: &MetricConfig,
    mut score: impl FnMut(&TreeNode, &TreeNode) -> Result<f64, MetricError>,
) -> Result<MatchSets, MetricError> {
    let mut cands = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let iou = g.mask.iou_or_zero(&p.mask)?;
            if iou > cfg.match_threshold {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut out = MatchSets::default();
    for (_, i, j) in cands {
        if gt_used[i] || pred_used[j] {
            continue;
        }
        gt_used[i] = true;
        pred_used[j] = true;
        let s = score(gt[i], pred[j])?;
        if s >= cfg.tp_threshold {
            out.tp.push((gt[i].id, pred[j].id, s));
        } else {
            out.fp.push(pred[j].id);
            out.fn_.push(gt[i].id);
        }
    }
    out.fn_.extend(gt.iter().zip(&gt_used).filter(|(_, u)| !**u).map(|(g, _)| g.id));
    out.fp.extend(pred.iter().zip(&pred_used).filter(|(_, u)| !**u).map(|(p, _)| p.id));
    Ok(out)
}

/// Whether a class is allowed in a tree's vocabulary.
fn in_vocab(t: &RecognitionTree, kb: &KbVersion, c: ConceptId) -> bool {
    kb.contains(c) && t.active_classes.as_ref().is_none_or(|a| a.contains(&c))
}

/// Child units of class `class` under instance `inst`, using `instances`
/// to choose between instance and region units.
fn class_units<'t>(t: &'t RecognitionTree, inst: &TreeNode, class: ConceptId, instances: bool) -> Vec<&'t TreeNode> {
    let Some(region) = t.children(inst.id).find(|r| r.class == class && !r.is_instance) else {
        return vec![];
    };
    if instances {
        t.children(region.id).filter(|k| k.is_instance).collect()
    } else {
        vec![region]
    }
}

/// Instance units for a countable class unless the gt region exists and
/// carries no instances.
fn use_instances(kb: &KbVersion, gt: &RecognitionTree, g_inst: &TreeNode, class: ConceptId) -> bool {
    kb.is_countable(class)
        && gt
            .children(g_inst.id)
            .find(|r| r.class == class && !r.is_instance)
            .is_none_or(|r| gt.children(r.id).any(|k| k.is_instance))
}

struct Scorer<'a> {
    gt: &'a RecognitionTree,
    pred: &'a RecognitionTree,
    kb: &'a KbVersion,
    cfg: &'a MetricConfig,
}

impl Scorer<'_> {
    /// Recursive pair score.
    fn node(&self, g: &TreeNode, p: &TreeNode) -> Result<f64, MetricError> {
        if g.class != p.class {
            return Err(MetricError::ClassMismatch { gt: g.class, pred: p.class });
        }
        if g.children.is_empty() {
            return Ok(g.mask.iou_or_zero(&p.mask)?);
        }
        if !g.is_instance {
            // a region whose instances are its units
            let gu: Vec<&TreeNode> = self.gt.children(g.id).collect();
            let pu: Vec<&TreeNode> = self.pred.children(p.id).filter(|k| k.class == g.class).collect();
            let m = match_units(&gu, &pu, self.cfg, |a, b| self.node(a, b))?;
            return Ok(m.quality().unwrap_or(0.0));
        }
        let mut classes: BTreeSet<ConceptId> = self.gt.children(g.id).map(|r| r.class).collect();
        if self.cfg.strict_fp {
            classes.extend(self.pred.children(p.id).map(|r| r.class).filter(|c| in_vocab(self.gt, self.kb, *c)));
        }
        let mut total = 0.0;
        for &c in &classes {
            let inst = use_instances(self.kb, self.gt, g, c);
            let gu = class_units(self.gt, g, c, inst);
            let pu = class_units(self.pred, p, c, inst);
            let m = match_units(&gu, &pu, self.cfg, |a, b| self.node(a, b))?;
            total += m.quality().unwrap_or(0.0);
        }
        Ok(total / classes.len() as f64)
    }
}

/// HPQ of a matched gt/pred pair, recursing through labeled descendants.
pub fn node_hpq(
    gt: &RecognitionTree,
    g: NodeId,
    pred: &RecognitionTree,
    p: NodeId,
    kb: &KbVersion,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    let s = Scorer { gt, pred, kb, cfg };
    let (gn, pn) = (gt.node(g).map_err(|e| pair_err(gt, e))?, pred.node(p).map_err(|e| pair_err(pred, e))?);
    s.node(gn, pn)
}

fn pair_err(t: &RecognitionTree, e: impl std::fmt::Display) -> MetricError {
    MetricError::PairMismatch(t.image_id.clone(), e.to_string())
}

/// Pair score used at the root for each metric.
#[derive(Clone, Copy)]
enum PairScore {
    Hpq,
    Pq,
    PartPq,
}

fn part_pq_score(gt: &RecognitionTree, pred: &RecognitionTree, g: &TreeNode, p: &TreeNode) -> Result<f64, MetricError> {
    let parts: Vec<&TreeNode> = gt.children(g.id).collect();
    if !g.is_instance || parts.is_empty() {
        return Ok(g.mask.iou_or_zero(&p.mask)?);
    }
    let mut total = 0.0;
    for gp in &parts {
        let iou = match pred.children(p.id).find(|x| x.class == gp.class) {
            Some(pp) => gp.mask.iou_or_zero(&pp.mask)?,
            None => 0.0,
        };
        total += iou;
    }
    Ok(total / parts.len() as f64)
}

fn check_two_level(t: &RecognitionTree) -> Result<(), MetricError> {
    // instance -> parts only: parts (level-2 regions) have no children
    let deep = t.nodes().iter().any(|n| !n.is_instance && t.level(n.id) >= 2 && !n.children.is_empty());
    if deep {
        return Err(MetricError::DepthExceeded(t.image_id.clone()));
    }
    Ok(())
}

/// Root-level units of one image for `class`.
fn root_units<'t>(
    kb: &KbVersion,
    gt: &'t RecognitionTree,
    pred: &'t RecognitionTree,
    class: ConceptId,
    dagger: bool,
    cfg: &MetricConfig,
) -> Result<(Vec<&'t TreeNode>, Vec<&'t TreeNode>), MetricError> {
    let inst = use_instances(kb, gt, gt.root(), class);
    let mut gu = class_units(gt, gt.root(), class, inst);
    let mut pu = class_units(pred, pred.root(), class, inst);
    if dagger && inst && kb.has_parts(class) {
        let (keep, drop): (Vec<&TreeNode>, Vec<&TreeNode>) = gu.into_iter().partition(|g| !g.children.is_empty());
        gu = keep;
        let mut kept = Vec::with_capacity(pu.len());
        for p in pu {
            let mut hit = false;
            for d in &drop {
                hit |= d.mask.iou_or_zero(&p.mask)? > cfg.match_threshold;
            }
            if !hit {
                kept.push(p);
            }
        }
        pu = kept;
    }
    Ok((gu, pu))
}

/// Per-class accumulators, class labels, and the KB versions seen.
type Pooled = (BTreeMap<ConceptId, Accum>, BTreeMap<ConceptId, String>, BTreeSet<String>);

fn pooled(
    pairs: &[(RecognitionTree, RecognitionTree)],
    kbs: &dyn KbResolver,
    cfg: &MetricConfig,
    how: PairScore,
    dagger: bool,
) -> Result<Pooled, MetricError> {
    let mut acc: BTreeMap<ConceptId, Accum> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut versions = BTreeSet::new();
    for (gt, pred) in pairs {
        if gt.image_id != pred.image_id || gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(MetricError::PairMismatch(gt.image_id.clone(), format!("paired with {}", pred.image_id)));
        }
        let kb = kbs.resolve(gt.kb_version()).ok_or_else(|| MetricError::VersionMismatch(gt.kb_version().into()))?;
        versions.insert(gt.kb_version().to_string());
        if matches!(how, PairScore::PartPq) {
            check_two_level(gt)?;
            check_two_level(pred)?;
        }
        let mut classes: BTreeSet<ConceptId> = gt.children(NodeId::ROOT).map(|r| r.class).collect();
        classes.extend(pred.children(NodeId::ROOT).map(|r| r.class));
        classes.retain(|c| in_vocab(gt, &kb, *c));
        let s = Scorer { gt, pred, kb: &kb, cfg };
        for c in classes {
            let (gu, pu) = root_units(&kb, gt, pred, c, dagger, cfg)?;
            let m = match_units(&gu, &pu, cfg, |a, b| match how {
                PairScore::Hpq => s.node(a, b),
                PairScore::Pq => Ok(a.mask.iou_or_zero(&b.mask)?),
                PairScore::PartPq => part_pq_score(gt, pred, a, b),
            })?;
            let a = Accum::from(&m);
            if a.tp + a.fp + a.fn_ > 0 {
                acc.entry(c).or_default().add(a);
                labels.entry(c).or_insert_with(|| kb.label_path(c).unwrap_or_else(|| c.to_string()));
            }
        }
    }
    Ok((acc, labels, versions))
}

fn build_report(
    kind: MetricKind,
    pairs: &[(RecognitionTree, RecognitionTree)],
    kbs: &dyn KbResolver,
    cfg: &MetricConfig,
    how: PairScore,
) -> Result<MetricReport, MetricError> {
    let (acc, labels, versions) = pooled(pairs, kbs, cfg, how, false)?;
    let (dagger_acc, _, _) = pooled(pairs, kbs, cfg, how, true)?;
    let has_parts =
        |c: ConceptId| pairs.iter().any(|(g, _)| kbs.resolve(g.kb_version()).is_some_and(|kb| kb.has_parts(c)));
    let rows = acc
        .iter()
        .filter_map(|(&c, a)| {
            a.quality().map(|score| ClassRow {
                class: c,
                label: labels[&c].clone(),
                subset: if has_parts(c) { Subset::P } else { Subset::Np },
                score,
                pq_dagger: dagger_acc.get(&c).and_then(|d| d.quality()),
                counts: Counts { tp: a.tp, fp: a.fp, fn_: a.fn_ },
            })
        })
        .collect();
    Ok(MetricReport::from_rows(
        kind,
        rows,
        Provenance { kb_versions: versions.into_iter().collect(), images: pairs.len(), config: *cfg },
    ))
}

/// Dataset HPQ with per-class rows and NP / P / P† subsets.
pub fn dataset_hpq(
    pairs: &[(RecognitionTree, RecognitionTree)],
    kbs: &dyn KbResolver,
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    build_report(MetricKind::Hpq, pairs, kbs, cfg, PairScore::Hpq)
}

/// PQ over root-level units, ignoring everything below them.
pub fn dataset_pq(
    pairs: &[(RecognitionTree, RecognitionTree)],
    kbs: &dyn KbResolver,
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    build_report(MetricKind::Pq, pairs, kbs, cfg, PairScore::Pq)
}

/// PartPQ for trees no deeper than instance -> parts. Matched instances
/// with labeled parts score the mean part IoU, ungated.
pub fn part_pq(
    pairs: &[(RecognitionTree, RecognitionTree)],
    kbs: &dyn KbResolver,
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    let cfg = MetricConfig { tp_threshold: f64::NEG_INFINITY, ..*cfg };
    build_report(MetricKind::PartPq, pairs, kbs, &cfg, PairScore::PartPq)
}

/// PartPQ score of one matched instance pair.
pub fn part_pq_pair(gt: &RecognitionTree, g: NodeId, pred: &RecognitionTree, p: NodeId) -> Result<f64, MetricError> {
    let (gn, pn) = (gt.node(g).map_err(|e| pair_err(gt, e))?, pred.node(p).map_err(|e| pair_err(pred, e))?);
    part_pq_score(gt, pred, gn, pn)
}
