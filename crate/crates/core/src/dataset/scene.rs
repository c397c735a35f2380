use std::collections::{BTreeSet, HashMap};
use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Rgb};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split_seed;
use crate::kb::{ConceptId, KbBuilder, KbError, KbVersion};
use crate::mask::{BinaryMask, MaskError};
use crate::tree::{ChildSpec, NodeId, RecognitionTree, TreeError};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

fn default_cell() -> u32 {
    16
}
fn default_max_classes() -> usize {
    6
}
fn default_max_instances() -> usize {
    8
}
fn default_depth() -> usize {
    1
}
fn default_part_prob() -> f64 {
    1.0
}
fn default_thing_prob() -> f64 {
    0.5
}

/// Layout knobs. The image is tiled into `cell`-sized squares; each square
/// goes to a stuff region or holds one thing instance, and instances with
/// parts are cut into bands along their longer side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_cell")]
    pub cell: u32,
    /// Root-level classes drawn per image, at most.
    #[serde(default = "default_max_classes")]
    pub max_classes: usize,
    /// Instances per image, at most.
    #[serde(default = "default_max_instances")]
    pub max_instances: usize,
    /// Instance levels below the root that may receive parts.
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    /// Chance an instance gets parts when its class has any.
    #[serde(default = "default_part_prob")]
    pub part_prob: f64,
    /// Chance a cell holds a thing when both kinds were drawn.
    #[serde(default = "default_thing_prob")]
    pub thing_prob: f64,
    /// Fail instead of skipping parts that do not fit.
    #[serde(default)]
    pub parts_required: bool,
    #[serde(default)]
    pub perturb: Option<Perturbation>,
}

impl SceneSpec {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            cell: default_cell(),
            max_classes: default_max_classes(),
            max_instances: default_max_instances(),
            max_depth: default_depth(),
            part_prob: default_part_prob(),
            thing_prob: default_thing_prob(),
            parts_required: false,
            perturb: None,
        }
    }

    fn check(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InfeasibleSpec(m.into()));
        if self.width == 0 || self.height == 0 {
            return bad("image has no pixels");
        }
        if self.cell == 0 || self.cell > self.width || self.cell > self.height {
            return bad("cell must be between 1 and the image size");
        }
        if self.max_classes == 0 {
            return bad("max_classes must be positive");
        }
        for p in [self.part_prob, self.thing_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if let Some(p) = &self.perturb {
            if !(0.0..=1.0).contains(&p.class_flip) || !(0.0..=1.0).contains(&p.drop) {
                return bad("perturbation probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// How a prediction is derived from ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Each mask is dilated or eroded by a radius drawn from
    /// `-morph_radius..=morph_radius`.
    #[serde(default)]
    pub morph_radius: u32,
    /// Chance a leaf semantic region takes another unused sibling class.
    #[serde(default)]
    pub class_flip: f64,
    /// Chance any node is dropped with its subtree.
    #[serde(default)]
    pub drop: f64,
}

/// A multi-depth vocabulary for synthetic scenes.
pub fn synthetic_kb() -> KbVersion {
    let mut b = KbBuilder::new();
    let s = ConceptId::SCENE;
    for stuff in ["road", "sky", "vegetation"] {
        b.child(s, stuff, false);
    }
    let car = b.child(s, "car", true);
    b.child(car, "window", false);
    b.child(car, "light", false);
    let wheel = b.child(car, "wheel", true);
    b.child(wheel, "rim", false);
    b.child(wheel, "tire", false);
    let person = b.child(s, "person", true);
    for p in ["head", "torso", "arm", "leg"] {
        b.child(person, p, false);
    }
    b.child(s, "pole", true);
    b.build().expect("synthetic kb is valid")
}

#[derive(Clone, Copy)]
struct Rect {
    a0: u32,
    b0: u32,
    a1: u32,
    b1: u32,
}

impl Rect {
    fn mask(&self, w: u32, h: u32) -> Result<BinaryMask, MaskError> {
        BinaryMask::rect(w, h, self.a0, self.b0, self.a1, self.b1)
    }

    /// `n` bands across the longer side, or `None` when it is too short.
    fn bands(&self, n: u32, across: bool) -> Option<Vec<Rect>> {
        let horizontal = (self.a1 - self.a0 >= self.b1 - self.b0) != across;
        let (lo, hi) = if horizontal { (self.a0, self.a1) } else { (self.b0, self.b1) };
        if n == 0 || hi - lo < n {
            return None;
        }
        let len = hi - lo;
        Some(
            (0..n)
                .map(|i| {
                    let (s, e) = (lo + len * i / n, lo + len * (i + 1) / n);
                    if horizontal {
                        Rect { a0: s, a1: e, ..*self }
                    } else {
                        Rect { b0: s, b1: e, ..*self }
                    }
                })
                .collect(),
        )
    }
}

struct Gen<'a> {
    spec: &'a SceneSpec,
    kb: &'a KbVersion,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn decorate(&mut self, t: &mut RecognitionTree, inst: NodeId, rect: Rect, depth: usize) -> Result<(), GenError> {
        let class = t.node(inst)?.class;
        let sub = self.kb.sub_knowledge_ids(class)?.to_vec();
        if sub.is_empty() || depth > self.spec.max_depth || !self.rng.random_bool(self.spec.part_prob) {
            return Ok(());
        }
        let want = self.rng.random_range(1..=sub.len());
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut self.rng, sub.len(), want).into_vec();
        picked.sort_unstable();
        let bands = match rect.bands(picked.len() as u32, false) {
            Some(b) => b,
            None if self.spec.parts_required => {
                return Err(GenError::InfeasibleSpec(format!("{} parts do not fit in an instance", picked.len())))
            }
            None => return Ok(()),
        };
        let (w, h) = (t.width(), t.height());
        let specs = picked
            .iter()
            .zip(&bands)
            .map(|(&i, r)| Ok(ChildSpec { mask: r.mask(w, h)?, class: sub[i], is_instance: false, probe: None }))
            .collect::<Result<Vec<_>, MaskError>>()?;
        let regions = t.attach_children(self.kb, inst, specs)?;
        for (region, band) in regions.into_iter().zip(bands) {
            let c = t.node(region)?.class;
            if !self.kb.is_countable(c) {
                continue;
            }
            let k = self.rng.random_range(1..=3u32);
            let Some(cells) = band.bands(k, true).or_else(|| band.bands(1, true)) else { continue };
            let specs = cells
                .iter()
                .map(|r| Ok(ChildSpec { mask: r.mask(w, h)?, class: c, is_instance: true, probe: None }))
                .collect::<Result<Vec<_>, MaskError>>()?;
            let ids = t.attach_children(self.kb, region, specs)?;
            for (id, r) in ids.into_iter().zip(cells) {
                self.decorate(t, id, r, depth + 1)?;
            }
        }
        Ok(())
    }

    fn scene(&mut self, image_id: &str) -> Result<RecognitionTree, GenError> {
        let (w, h, cell) = (self.spec.width, self.spec.height, self.spec.cell);
        let mut t = RecognitionTree::new(image_id, w, h, self.kb)?;
        let roots = self.kb.sub_knowledge_ids(ConceptId::SCENE)?.to_vec();
        if roots.is_empty() {
            return Err(GenError::InfeasibleSpec("knowledge base has no scene classes".into()));
        }
        let n = self.rng.random_range(1..=self.spec.max_classes.min(roots.len()));
        let mut chosen: Vec<ConceptId> = roots.choose_multiple(&mut self.rng, n).copied().collect();
        chosen.sort();
        let stuff: Vec<ConceptId> = chosen.iter().copied().filter(|c| !self.kb.is_countable(*c)).collect();
        let things: Vec<ConceptId> = chosen.iter().copied().filter(|c| self.kb.is_countable(*c)).collect();

        let mut stuff_masks: HashMap<ConceptId, BinaryMask> = HashMap::new();
        let mut insts: Vec<(ConceptId, Rect)> = Vec::new();
        let mut cells: Vec<(u32, u32)> = (0..h / cell).flat_map(|y| (0..w / cell).map(move |x| (x, y))).collect();
        cells.shuffle(&mut self.rng);
        for (x, y) in cells {
            let r = Rect { a0: x * cell, b0: y * cell, a1: (x + 1) * cell, b1: (y + 1) * cell };
            let thing = !things.is_empty()
                && insts.len() < self.spec.max_instances
                && (stuff.is_empty() || self.rng.random_bool(self.spec.thing_prob));
            if thing {
                let c = *things.choose(&mut self.rng).expect("nonempty");
                let q = cell / 4;
                let a0 = r.a0 + self.rng.random_range(0..=q);
                let b0 = r.b0 + self.rng.random_range(0..=q);
                let a1 = r.a1 - self.rng.random_range(0..=q);
                let b1 = r.b1 - self.rng.random_range(0..=q);
                insts.push((c, Rect { a0, b0, a1: a1.max(a0 + 1), b1: b1.max(b0 + 1) }));
            } else if !stuff.is_empty() {
                let c = *stuff.choose(&mut self.rng).expect("nonempty");
                let m = r.mask(w, h)?;
                let e = stuff_masks.entry(c).or_insert_with(|| BinaryMask::empty(w, h).expect("valid dims"));
                *e = e.union(&m)?;
            }
        }

        let mut specs = Vec::new();
        let mut thing_order = Vec::new();
        for &c in &chosen {
            if let Some(m) = stuff_masks.remove(&c) {
                specs.push(ChildSpec { mask: m, class: c, is_instance: false, probe: None });
            } else if self.kb.is_countable(c) {
                let mine: Vec<Rect> = insts.iter().filter(|(k, _)| *k == c).map(|(_, r)| *r).collect();
                if mine.is_empty() {
                    continue;
                }
                let mut m = BinaryMask::empty(w, h)?;
                for r in &mine {
                    m = m.union(&r.mask(w, h)?)?;
                }
                specs.push(ChildSpec { mask: m, class: c, is_instance: false, probe: None });
                thing_order.push((c, mine));
            }
        }
        let regions = t.attach_children(self.kb, NodeId::ROOT, specs)?;
        for region in regions {
            let c = t.node(region)?.class;
            let Some((_, rects)) = thing_order.iter().find(|(k, _)| *k == c) else { continue };
            let rects = rects.clone();
            let specs = rects
                .iter()
                .map(|r| Ok(ChildSpec { mask: r.mask(w, h)?, class: c, is_instance: true, probe: None }))
                .collect::<Result<Vec<_>, MaskError>>()?;
            let ids = t.attach_children(self.kb, region, specs)?;
            for (id, r) in ids.into_iter().zip(rects) {
                self.decorate(&mut t, id, r, 1)?;
            }
        }
        Ok(t)
    }

    fn perturb(&mut self, gt: &RecognitionTree, p: &Perturbation) -> Result<RecognitionTree, GenError> {
        let mut pred = RecognitionTree::new(gt.image_id.clone(), gt.width(), gt.height(), self.kb)?;
        pred.active_classes = gt.active_classes.clone();
        let mut queue = std::collections::VecDeque::from([(NodeId::ROOT, NodeId::ROOT)]);
        while let Some((g, q)) = queue.pop_front() {
            let parent_mask = pred.node(q)?.mask.clone();
            let parent_class = gt.node(g)?.class;
            let mut claimed = BinaryMask::empty(gt.width(), gt.height())?;
            let gt_classes: BTreeSet<ConceptId> = gt.children(g).map(|k| k.class).collect();
            let mut used = BTreeSet::new();
            let mut specs = Vec::new();
            let mut origin = Vec::new();
            for k in gt.children(g) {
                if p.drop > 0.0 && self.rng.random_bool(p.drop) {
                    continue;
                }
                let r = p.morph_radius as i32;
                let radius = if r > 0 { self.rng.random_range(-r..=r) } else { 0 };
                let mut mask = k.mask.morph(radius).intersection(&parent_mask)?;
                let mut class = k.class;
                if !k.is_instance {
                    mask = mask.difference(&claimed)?;
                    if k.children.is_empty() && p.class_flip > 0.0 && self.rng.random_bool(p.class_flip) {
                        let options: Vec<ConceptId> = self
                            .kb
                            .sub_knowledge_ids(parent_class)?
                            .iter()
                            .copied()
                            .filter(|c| !self.kb.is_countable(*c) && !gt_classes.contains(c) && !used.contains(c))
                            .collect();
                        if let Some(&c) = options.choose(&mut self.rng) {
                            class = c;
                        }
                    }
                }
                if mask.is_empty() {
                    continue;
                }
                if !k.is_instance {
                    claimed = claimed.union(&mask)?;
                    used.insert(class);
                }
                specs.push(ChildSpec { mask, class, is_instance: k.is_instance, probe: None });
                origin.push((k.id, class == k.class));
            }
            let ids = pred.attach_children(self.kb, q, specs)?;
            for (id, (gk, same)) in ids.into_iter().zip(origin) {
                if same {
                    queue.push_back((gk, id));
                }
            }
        }
        Ok(pred)
    }
}

/// One ground-truth scene and, when `spec.perturb` is set, a perturbed
/// prediction. Deterministic in `(spec, kb, seed)`.
pub fn generate_scene(
    spec: &SceneSpec,
    kb: &KbVersion,
    image_id: &str,
    seed: u64,
) -> Result<(RecognitionTree, Option<RecognitionTree>), GenError> {
    spec.check()?;
    let mut g = Gen { spec, kb, rng: ChaCha8Rng::seed_from_u64(seed) };
    let gt = g.scene(image_id)?;
    let pred = match &spec.perturb {
        Some(p) => Some(g.perturb(&gt, p)?),
        None => None,
    };
    Ok((gt, pred))
}

/// `n` scenes named `img00000`, `img00001`, ..., each on its own seed
/// stream.
pub fn generate_corpus(
    spec: &SceneSpec,
    kb: &KbVersion,
    n: usize,
    seed: u64,
) -> Result<Vec<(RecognitionTree, Option<RecognitionTree>)>, GenError> {
    (0..n).map(|i| generate_scene(spec, kb, &format!("img{i:05}"), split_seed(seed, "scene", i as u64))).collect()
}

fn color(class: ConceptId) -> [u8; 3] {
    let x = (class.0 as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(x >> 16) as u8 | 0x20, (x >> 32) as u8 | 0x20, (x >> 48) as u8 | 0x20]
}

/// A false-color PNG of the tree, deeper nodes painted over shallower ones.
pub fn render_png(t: &RecognitionTree) -> Result<Vec<u8>, image::ImageError> {
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(t.width(), t.height());
    for id in t.bfs().into_iter().skip(1) {
        let n = &t.nodes()[id.0];
        let mut c = color(n.class);
        if n.is_instance {
            let shade = (id.0 as u8).wrapping_mul(37) % 48;
            c = c.map(|v| v.saturating_sub(shade));
        }
        for (a, b) in n.mask.iter_set() {
            img.put_pixel(a, b, Rgb(c));
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
