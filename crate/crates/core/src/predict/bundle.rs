//! On-disk prediction bundles and the `files` and `linear` backends built on
//! them.
//!
//! A bundle is a directory `<root>/<image_id>/` holding any of:
//! `level{L}.png` (16-bit label maps, value = concept id + 1, 0 = void),
//! `candidates.jsonl` with `candidate_features.vrtb`, `feature_map.vrtb`
//! of shape `(H', W', D)`, and `bundle.json` (`{"feature_stride": s}`).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::candidates::CandidateStore;
use super::embedding::{EmbeddingTable, DEFAULT_TYPE2_TEMPERATURE};
use super::features::{classify_cells, dot, CellLabel, FeatureMap};
use super::tensor::Tensor;
use super::{embedding_row, PredictError, Predictor};
use crate::kb::{ConceptId, KbVersion};
use crate::mask::{BinaryMask, LabelMap};
use crate::probe::Probe;
use crate::request::{Answer, AnswerChild};
use crate::tree::{NodeId, RecognitionTree};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_stride: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    /// Label maps by instance level (the root is level 1).
    pub label_maps: BTreeMap<usize, LabelMap>,
    pub candidates: Option<CandidateStore>,
    pub feature_map: Option<FeatureMap>,
}

fn io_err(path: &Path, e: std::io::Error) -> PredictError {
    PredictError::Backend(format!("{}: {e}", path.display()))
}

fn read_opt(path: &Path) -> Result<Option<Vec<u8>>, PredictError> {
    match std::fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

impl Bundle {
    pub fn load(dir: &Path, width: u32, height: u32) -> Result<Self, PredictError> {
        if !dir.is_dir() {
            return Err(PredictError::MissingPrediction(format!("no bundle at {}", dir.display())));
        }
        let mut b = Bundle::default();
        for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(level) =
                name.strip_prefix("level").and_then(|s| s.strip_suffix(".png")).and_then(|s| s.parse().ok())
            else {
                continue;
            };
            let lm = LabelMap::from_png(&std::fs::read(entry.path()).map_err(|e| io_err(&entry.path(), e))?)?;
            if (lm.width(), lm.height()) != (width, height) {
                return Err(PredictError::DimMismatch(format!(
                    "{name} is {}x{}, image is {width}x{height}",
                    lm.width(),
                    lm.height()
                )));
            }
            b.label_maps.insert(level, lm);
        }
        let meta: BundleMeta = match read_opt(&dir.join("bundle.json"))? {
            Some(bytes) => {
                serde_json::from_slice(&bytes).map_err(|e| PredictError::Backend(format!("bundle.json: {e}")))?
            }
            None => BundleMeta::default(),
        };
        if let Some(text) = read_opt(&dir.join("candidates.jsonl"))? {
            let blob_path = dir.join("candidate_features.vrtb");
            let blob = read_opt(&blob_path)?
                .ok_or_else(|| PredictError::MissingPrediction(format!("{} is missing", blob_path.display())))?;
            let text = String::from_utf8(text).map_err(|e| PredictError::Backend(format!("candidates.jsonl: {e}")))?;
            b.candidates = Some(CandidateStore::from_jsonl(&text, &Tensor::decode(&blob)?, width, height)?);
        }
        if let Some(blob) = read_opt(&dir.join("feature_map.vrtb"))? {
            let mut f = FeatureMap::from_tensor(Tensor::decode(&blob)?)?;
            f.level_stride = meta.feature_stride;
            b.feature_map = Some(f);
        }
        Ok(b)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PredictError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| io_err(&p, e))
        };
        for (level, lm) in &self.label_maps {
            write(&format!("level{level}.png"), &lm.to_png()?)?;
        }
        if let Some(c) = &self.candidates {
            let (text, blob) = c.to_jsonl();
            write("candidates.jsonl", text.as_bytes())?;
            write("candidate_features.vrtb", &blob.encode())?;
        }
        if let Some(f) = &self.feature_map {
            write("feature_map.vrtb", &f.to_tensor().encode())?;
            let meta = BundleMeta { feature_stride: f.level_stride };
            write("bundle.json", serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())?;
        }
        Ok(())
    }
}

/// Lazily loaded, cached bundles under one root directory.
#[derive(Debug)]
pub struct BundleStore {
    root: Option<PathBuf>,
    cache: RwLock<HashMap<String, Arc<Bundle>>>,
}

impl BundleStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), cache: RwLock::new(HashMap::new()) }
    }

    /// A store backed only by the given bundles.
    pub fn in_memory(bundles: impl IntoIterator<Item = (String, Bundle)>) -> Self {
        let cache = bundles.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Self { root: None, cache: RwLock::new(cache) }
    }

    pub fn get(&self, image_id: &str, width: u32, height: u32) -> Result<Arc<Bundle>, PredictError> {
        if let Some(b) = self.cache.read().expect("bundle cache poisoned").get(image_id) {
            return Ok(b.clone());
        }
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| PredictError::MissingPrediction(format!("no bundle for image {image_id:?}")))?;
        if image_id.is_empty() || image_id.contains(['/', '\\']) || image_id == ".." {
            return Err(PredictError::Backend(format!("invalid image id {image_id:?}")));
        }
        let b = Arc::new(Bundle::load(&root.join(image_id), width, height)?);
        self.cache.write().expect("bundle cache poisoned").insert(image_id.to_string(), b.clone());
        Ok(b)
    }
}

/// Best candidate at the probe's feature locations, clipped to `region`.
/// Candidates whose clipped mask is empty are skipped; ties keep the finer
/// level.
fn pick_candidate(
    bundle: &Bundle,
    probe: Probe,
    class: ConceptId,
    region: &BinaryMask,
    score: impl Fn(&[f32], f32) -> f64,
) -> Result<Answer, PredictError> {
    let store = bundle
        .candidates
        .as_ref()
        .ok_or_else(|| PredictError::MissingPrediction("bundle has no candidate store".into()))?;
    let found = store.gather(probe);
    if found.is_empty() {
        return Err(PredictError::NoCandidate(probe));
    }
    let mut scored: Vec<(f64, &BinaryMask)> =
        found.iter().map(|(_, c)| (score(&c.feature, c.confidence), &c.mask)).collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    for (s, m) in scored {
        let mask = m.clip(region)?;
        if !mask.is_empty() {
            return Ok(Answer { children: vec![AnswerChild { mask, class, is_instance: true, score: Some(s) }] });
        }
    }
    Err(PredictError::Lost)
}

fn type2_scorer<'a>(
    e: &'a EmbeddingTable,
    kb: &KbVersion,
    class: ConceptId,
    temperature: f32,
) -> Result<impl Fn(&[f32], f32) -> f64 + 'a, PredictError> {
    let (row, label) = embedding_row(e, kb, class)?;
    let bias = e.bias(&label) as f64;
    Ok(move |f: &[f32], _conf: f32| dot(row, f) / temperature as f64 + bias)
}

/// Reads precomputed label maps and candidate stores.
#[derive(Debug)]
pub struct FilesBackend {
    bundles: BundleStore,
    embeddings: Option<EmbeddingTable>,
    type2_temperature: f32,
}

impl FilesBackend {
    /// Without an embedding table, Type-II candidates are ranked by their
    /// stored confidence.
    pub fn new(bundles: BundleStore, embeddings: Option<EmbeddingTable>) -> Self {
        Self { bundles, embeddings, type2_temperature: DEFAULT_TYPE2_TEMPERATURE }
    }
}

impl Predictor for FilesBackend {
    fn name(&self) -> &'static str {
        "files"
    }

    fn answer_type1(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        classes: &[ConceptId],
        _kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let b = self.bundles.get(&tree.image_id, tree.width(), tree.height())?;
        let level = tree.level(node);
        let lm = b.label_maps.get(&level).ok_or_else(|| {
            PredictError::MissingPrediction(format!("{}: no label map for level {level}", tree.image_id))
        })?;
        let target = &tree.node(node)?.mask;
        let mut children = Vec::new();
        for &c in classes {
            let Ok(code) = u16::try_from(c.0 + 1) else { continue };
            let mask = lm.class_mask(code).intersection(target)?;
            if !mask.is_empty() {
                children.push(AnswerChild { mask, class: c, is_instance: false, score: None });
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
        kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let b = self.bundles.get(&tree.image_id, tree.width(), tree.height())?;
        let region = &tree.node(node)?.mask;
        match &self.embeddings {
            Some(e) => pick_candidate(&b, probe, class, region, type2_scorer(e, kb, class, self.type2_temperature)?),
            None => pick_candidate(&b, probe, class, region, |_, conf| conf as f64),
        }
    }
}

/// Classifies feature cells against text embeddings and ranks candidates by
/// embedding score.
#[derive(Debug)]
pub struct LinearBackend {
    bundles: BundleStore,
    embeddings: EmbeddingTable,
    type2_temperature: f32,
}

impl LinearBackend {
    pub fn new(bundles: BundleStore, embeddings: EmbeddingTable) -> Self {
        Self { bundles, embeddings, type2_temperature: DEFAULT_TYPE2_TEMPERATURE }
    }

    pub fn with_type2_temperature(mut self, t: f32) -> Result<Self, PredictError> {
        if !t.is_finite() || t <= 0.0 {
            return Err(PredictError::Backend(format!("temperature must be positive, got {t}")));
        }
        self.type2_temperature = t;
        Ok(self)
    }
}

/// Image pixel at the center of cell `(x, y)`.
fn cell_center(f: &FeatureMap, x: u32, y: u32, w: u32, h: u32) -> (u32, u32) {
    let (a, b) = match f.level_stride {
        Some(s) if s > 0 => (x as u64 * s as u64 + s as u64 / 2, y as u64 * s as u64 + s as u64 / 2),
        _ => (
            (2 * x as u64 + 1) * w as u64 / (2 * f.width as u64),
            (2 * y as u64 + 1) * h as u64 / (2 * f.height as u64),
        ),
    };
    ((a as u32).min(w - 1), (b as u32).min(h - 1))
}

impl Predictor for LinearBackend {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn answer_type1(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        classes: &[ConceptId],
        kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let b = self.bundles.get(&tree.image_id, tree.width(), tree.height())?;
        let f = b
            .feature_map
            .as_ref()
            .ok_or_else(|| PredictError::MissingPrediction(format!("{}: no feature map", tree.image_id)))?;
        let (w, h) = (tree.width(), tree.height());
        let target = &tree.node(node)?.mask;
        let mut names = Vec::with_capacity(classes.len());
        for &c in classes {
            names.push(embedding_row(&self.embeddings, kb, c)?.1);
        }
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let cells = classify_cells(f, &self.embeddings, &names, |x, y| {
            let (a, b) = cell_center(f, x, y, w, h);
            target.get(a, b)
        })?;
        let mut masks = vec![BinaryMask::empty(w, h)?; classes.len()];
        for (a, b) in target.iter_set() {
            let (x, y) = f.cell_of(a, b, w, h);
            if let CellLabel::Class(i) = cells.get(x, y) {
                masks[i].set(a, b, true);
            }
        }
        let children = classes
            .iter()
            .zip(masks)
            .filter(|(_, m)| !m.is_empty())
            .map(|(&class, mask)| AnswerChild { mask, class, is_instance: false, score: None })
            .collect();
        Ok(Answer { children })
    }

    fn answer_type2(
        &self,
        tree: &RecognitionTree,
        node: NodeId,
        probe: Probe,
        class: ConceptId,
        kb: &KbVersion,
    ) -> Result<Answer, PredictError> {
        let b = self.bundles.get(&tree.image_id, tree.width(), tree.height())?;
        let region = &tree.node(node)?.mask;
        pick_candidate(&b, probe, class, region, type2_scorer(&self.embeddings, kb, class, self.type2_temperature)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbBuilder;
    use crate::predict::candidates::{Candidate, FeatureLoc, DEFAULT_STRIDES};
    use crate::tree::ChildSpec;

    fn kb() -> (KbVersion, ConceptId, ConceptId, ConceptId) {
        let mut b = KbBuilder::new();
        let road = b.child(ConceptId::SCENE, "road", false);
        let sky = b.child(ConceptId::SCENE, "sky", false);
        let car = b.child(ConceptId::SCENE, "car", true);
        (b.build().unwrap(), road, sky, car)
    }

    fn orthonormal() -> EmbeddingTable {
        EmbeddingTable::new(
            vec!["road".into(), "sky".into(), "car".into()],
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            0.07,
            None,
        )
        .unwrap()
    }

    #[test]
    fn linear_recovers_stripes() {
        let (kb, road, sky, car) = kb();
        let (w, h, s) = (16u32, 8u32, 4u32);
        // columns of cells: road, sky, car, road
        let pattern = [0usize, 1, 2, 0];
        let mut data = Vec::new();
        for _y in 0..h / s {
            for x in 0..w / s {
                let mut v = [0.0f32; 3];
                v[pattern[x as usize]] = 1.0;
                data.extend(v);
            }
        }
        let mut f = FeatureMap::new(w / s, h / s, 3, data).unwrap();
        f.level_stride = Some(s);
        let bundle = Bundle { feature_map: Some(f), ..Default::default() };
        let backend = LinearBackend::new(BundleStore::in_memory([("img".into(), bundle)]), orthonormal());
        let t = RecognitionTree::new("img", w, h, &kb).unwrap();
        let ans = backend.answer_type1(&t, NodeId::ROOT, &[road, sky, car], &kb).unwrap();
        let got: Vec<(ConceptId, BinaryMask)> = ans.children.into_iter().map(|c| (c.class, c.mask)).collect();
        let road_mask =
            BinaryMask::rect(w, h, 0, 0, 4, h).unwrap().union(&BinaryMask::rect(w, h, 12, 0, 16, h).unwrap()).unwrap();
        assert_eq!(
            got,
            vec![
                (road, road_mask),
                (sky, BinaryMask::rect(w, h, 4, 0, 8, h).unwrap()),
                (car, BinaryMask::rect(w, h, 8, 0, 12, h).unwrap()),
            ]
        );
    }

    #[test]
    fn higher_scoring_candidate_wins() {
        let (kb, road, _sky, car) = kb();
        let (w, h) = (32u32, 32u32);
        let mut store = CandidateStore::new(&DEFAULT_STRIDES);
        let small = BinaryMask::rect(w, h, 0, 16, 8, 24).unwrap();
        let big = BinaryMask::rect(w, h, 0, 16, 16, 32).unwrap();
        store
            .insert(
                FeatureLoc { stride: 8, y: 2, x: 0 },
                Candidate { mask: small, feature: vec![0.0, 0.0, 0.4], confidence: 0.9 },
            )
            .unwrap();
        store
            .insert(
                FeatureLoc { stride: 16, y: 1, x: 0 },
                Candidate { mask: big.clone(), feature: vec![0.0, 0.0, 2.1], confidence: 0.1 },
            )
            .unwrap();
        let bundle = Bundle { candidates: Some(store), ..Default::default() };
        let mut t = RecognitionTree::new("img", w, h, &kb).unwrap();
        let ids = t
            .attach_children(
                &kb,
                NodeId::ROOT,
                vec![
                    ChildSpec {
                        mask: BinaryMask::rect(w, h, 0, 16, 32, 32).unwrap(),
                        class: car,
                        is_instance: false,
                        probe: None,
                    },
                    ChildSpec {
                        mask: BinaryMask::rect(w, h, 0, 0, 32, 16).unwrap(),
                        class: road,
                        is_instance: false,
                        probe: None,
                    },
                ],
            )
            .unwrap();
        let linear = LinearBackend::new(BundleStore::in_memory([("img".into(), bundle.clone())]), orthonormal());
        let ans = linear.answer_type2(&t, ids[0], Probe::new(2, 18), car, &kb).unwrap();
        assert_eq!(ans.children[0].mask, big);
        assert_eq!(ans.children[0].score, Some(2.1f32 as f64));
        // confidence ranking without embeddings prefers the other one
        let files = FilesBackend::new(BundleStore::in_memory([("img".into(), bundle)]), None);
        let ans = files.answer_type2(&t, ids[0], Probe::new(2, 18), car, &kb).unwrap();
        assert_eq!(ans.children[0].mask.count(), 64);
        assert!(matches!(
            files.answer_type2(&t, ids[0], Probe::new(30, 30), car, &kb),
            Err(PredictError::NoCandidate(_))
        ));
        // candidates clipped away from the region are lost
        assert!(matches!(files.answer_type2(&t, ids[1], Probe::new(2, 18), road, &kb), Err(PredictError::Lost)));
    }

    #[test]
    fn files_bundle_on_disk() {
        let (kb, road, sky, car) = kb();
        let (w, h) = (8u32, 4u32);
        let mut lm = LabelMap::void(w, h).unwrap();
        for b in 0..h {
            for a in 0..w {
                lm.set(a, b, if b < 2 { sky.0 as u16 + 1 } else { road.0 as u16 + 1 });
            }
        }
        let bundle = Bundle { label_maps: BTreeMap::from([(1, lm)]), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        bundle.save(&dir.path().join("img")).unwrap();
        let files = FilesBackend::new(BundleStore::open(dir.path()), None);
        let t = RecognitionTree::new("img", w, h, &kb).unwrap();
        let ans = files.answer_type1(&t, NodeId::ROOT, &[road, sky, car], &kb).unwrap();
        let classes: Vec<ConceptId> = ans.children.iter().map(|c| c.class).collect();
        assert_eq!(classes, vec![road, sky]);
        assert_eq!(ans.children[0].mask, BinaryMask::rect(w, h, 0, 2, w, h).unwrap());

        let other = RecognitionTree::new("missing", w, h, &kb).unwrap();
        assert!(matches!(
            files.answer_type1(&other, NodeId::ROOT, &[road], &kb),
            Err(PredictError::MissingPrediction(_))
        ));
        let no_level = FilesBackend::new(BundleStore::in_memory([("img".into(), Bundle::default())]), None);
        assert!(matches!(
            no_level.answer_type1(&t, NodeId::ROOT, &[road], &kb),
            Err(PredictError::MissingPrediction(_))
        ));
    }
}
