use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::split_seed;
use crate::tree::RecognitionTree;

/// Semantic regions seen and kept by a subsampling pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SubsampleStats {
    pub considered: usize,
    pub kept: usize,
}

impl SubsampleStats {
    fn add(&mut self, o: SubsampleStats) {
        self.considered += o.considered;
        self.kept += o.kept;
    }
}

fn rng_for(seed: u64, tag: &str, image_id: &str) -> ChaCha8Rng {
    let salt = split_seed(seed, image_id, 0);
    ChaCha8Rng::seed_from_u64(split_seed(salt, tag, 0))
}

fn thin(
    t: &RecognitionTree,
    ratio: f64,
    rng: &mut ChaCha8Rng,
    pick: impl Fn(&RecognitionTree, usize) -> bool,
) -> (RecognitionTree, SubsampleStats) {
    let mut stats = SubsampleStats::default();
    let out = t.retain(|n| {
        if n.is_instance || !pick(t, n.id.0) {
            return true;
        }
        stats.considered += 1;
        // draw even at ratio 0 or 1 so streams do not depend on the ratio
        let keep = rng.random::<f64>() < ratio;
        stats.kept += usize::from(keep);
        keep
    });
    (out, stats)
}

fn check_ratio(r: f64) -> f64 {
    assert!((0.0..=1.0).contains(&r), "ratio must lie in [0, 1]");
    r
}

/// Keep each part region (a semantic region below a non-root instance)
/// with probability `ratio`; a dropped region takes its subtree along.
pub fn subsample_parts(trees: &[RecognitionTree], ratio: f64, seed: u64) -> (Vec<RecognitionTree>, SubsampleStats) {
    let ratio = check_ratio(ratio);
    let mut total = SubsampleStats::default();
    let out = trees
        .iter()
        .map(|t| {
            let mut rng = rng_for(seed, "parts", &t.image_id);
            let (o, s) = thin(t, ratio, &mut rng, |t, i| t.level(t.nodes()[i].id) >= 2);
            total.add(s);
            o
        })
        .collect();
    (out, total)
}

/// Keep each scene-level semantic region with probability `semantic_ratio`,
/// then each surviving part region with probability `part_ratio`. The
/// per-image vocabulary becomes the set of classes still labeled.
pub fn subsample_semantic_and_parts(
    trees: &[RecognitionTree],
    semantic_ratio: f64,
    part_ratio: f64,
    seed: u64,
) -> (Vec<RecognitionTree>, SubsampleStats, SubsampleStats) {
    let (sr, pr) = (check_ratio(semantic_ratio), check_ratio(part_ratio));
    let (mut s1, mut s2) = (SubsampleStats::default(), SubsampleStats::default());
    let out = trees
        .iter()
        .map(|t| {
            let mut rng = rng_for(seed, "semantic", &t.image_id);
            let (a, x) = thin(t, sr, &mut rng, |t, i| t.level(t.nodes()[i].id) == 1);
            let mut rng = rng_for(seed, "parts", &t.image_id);
            let (mut b, y) = thin(&a, pr, &mut rng, |t, i| t.level(t.nodes()[i].id) >= 2);
            s1.add(x);
            s2.add(y);
            let mut active = b.labeled_classes();
            active.remove(&crate::kb::ConceptId::SCENE);
            b.active_classes = Some(active);
            b
        })
        .collect();
    (out, s1, s2)
}
