use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::kb::ConceptId;
use crate::mask::BinaryMask;
use crate::tree::RecognitionTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelIou {
    pub level: usize,
    /// `(class, intersection, union)` pooled over the dataset.
    pub classes: Vec<(ConceptId, u64, u64)>,
    pub mean: Option<f64>,
}

impl LevelIou {
    pub fn iou(&self, class: ConceptId) -> Option<f64> {
        self.classes.iter().find(|c| c.0 == class).map(|&(_, i, u)| i as f64 / u as f64)
    }
}

/// Union of each class's semantic regions at `level`.
fn level_masks(t: &RecognitionTree, level: usize) -> Result<BTreeMap<ConceptId, BinaryMask>, MetricError> {
    let mut out: BTreeMap<ConceptId, BinaryMask> = BTreeMap::new();
    for n in t.nodes().iter().filter(|n| !n.is_instance && t.level(n.id) == level) {
        match out.get_mut(&n.class) {
            Some(m) => *m = m.union(&n.mask)?,
            None => {
                out.insert(n.class, n.mask.clone());
            }
        }
    }
    Ok(out)
}

/// Pooled per-class IoU of semantic regions at one level. Pixels no
/// ground-truth region covers at that level are ignored.
pub fn miou_per_level(pairs: &[(RecognitionTree, RecognitionTree)], level: usize) -> Result<LevelIou, MetricError> {
    let mut acc: BTreeMap<ConceptId, (u64, u64)> = BTreeMap::new();
    for (gt, pred) in pairs {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(MetricError::PairMismatch(gt.image_id.clone(), "image sizes differ".into()));
        }
        let g = level_masks(gt, level)?;
        let p = level_masks(pred, level)?;
        let mut valid = BinaryMask::empty(gt.width(), gt.height())?;
        for m in g.values() {
            valid = valid.union(m)?;
        }
        let empty = BinaryMask::empty(gt.width(), gt.height())?;
        let classes: std::collections::BTreeSet<ConceptId> = g.keys().chain(p.keys()).copied().collect();
        for c in classes {
            let gm = g.get(&c).unwrap_or(&empty);
            let pm = p.get(&c).unwrap_or(&empty).intersection(&valid)?;
            let e = acc.entry(c).or_default();
            e.0 += gm.intersection_count(&pm)? as u64;
            e.1 += gm.union_count(&pm)? as u64;
        }
    }
    let classes: Vec<(ConceptId, u64, u64)> =
        acc.into_iter().filter(|(_, (_, u))| *u > 0).map(|(c, (i, u))| (c, i, u)).collect();
    let mean = (!classes.is_empty())
        .then(|| classes.iter().map(|&(_, i, u)| i as f64 / u as f64).sum::<f64>() / classes.len() as f64);
    Ok(LevelIou { level, classes, mean })
}
