//! Checks shared by the fuzz targets and the seed-corpus test. Each takes
//! raw bytes, must never panic, asserts a round trip whenever the input is
//! accepted, and reports whether it was.

use virreq_core::dataset::{generate_scene, synthetic_kb, SceneSpec};
use virreq_core::predict::{CandidateStore, EmbeddingTable, Tensor};
use virreq_core::request::{read_stream, write_stream};
use virreq_core::{KbVersion, LabelMap, RecognitionTree, Rle};

/// A check: true when the input was accepted.
pub type Check = fn(&[u8]) -> bool;

/// Targets by name; seeds live in `fuzz/corpus/<name>/`.
pub const TARGETS: &[(&str, Check)] = &[
    ("rle_json", rle_json),
    ("tree_json", tree_json),
    ("kb_json", kb_json),
    ("request_stream", request_stream),
    ("tensor_blob", tensor_blob),
    ("embedding_table", embedding_table),
    ("candidates_jsonl", candidates_jsonl),
    ("label_map_png", label_map_png),
    ("scene_spec", scene_spec),
];

/// Keeps per-input work small enough for a fuzzer's time budget.
const MAX_FUZZ_PIXELS: u64 = 1 << 16;

fn small(w: u32, h: u32) -> bool {
    w as u64 * h as u64 <= MAX_FUZZ_PIXELS
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn rle_json(data: &[u8]) -> bool {
    let Some(s) = text(data) else { return false };
    let Ok(rle) = Rle::from_json(s) else { return false };
    if !small(rle.width, rle.height) {
        return false;
    }
    if let Ok(mask) = rle.decode() {
        let again = Rle::encode(&mask);
        assert_eq!(again.decode().expect("own encoding decodes"), mask);
        assert_eq!(Rle::from_json(&again.to_json()).expect("own json parses"), again);
        return true;
    }
    false
}

pub fn tree_json(data: &[u8]) -> bool {
    let Ok(t) = RecognitionTree::parse(data, None) else { return false };
    let bytes = t.to_bytes();
    let back = RecognitionTree::parse(&bytes, None).expect("canonical tree parses");
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.hash(), t.hash());
    true
}

pub fn kb_json(data: &[u8]) -> bool {
    let Some(s) = text(data) else { return false };
    let Ok(kb) = KbVersion::from_json(s) else { return false };
    let back = KbVersion::from_json(&kb.to_json()).expect("own kb parses");
    assert_eq!(back.version_id(), kb.version_id());
    true
}

pub fn request_stream(data: &[u8]) -> bool {
    let Some(s) = text(data) else { return false };
    let Ok((header, pairs)) = read_stream(s) else { return false };
    let out = write_stream(&header, &pairs);
    let (h2, p2) = read_stream(&out).expect("own stream parses");
    assert_eq!(write_stream(&h2, &p2), out);
    true
}

pub fn tensor_blob(data: &[u8]) -> bool {
    let Ok(t) = Tensor::decode(data) else { return false };
    assert_eq!(t.encode(), data);
    true
}

/// Input: header JSON, a NUL byte, then the tensor blob.
pub fn embedding_table(data: &[u8]) -> bool {
    let Some(split) = data.iter().position(|&b| b == 0) else { return false };
    let Some(header) = text(&data[..split]) else { return false };
    EmbeddingTable::from_parts(header, &data[split + 1..]).is_ok()
}

/// Input: u16 width, u16 height, u32 blob length (all little-endian), the
/// feature blob, then candidate JSON lines.
pub fn candidates_jsonl(data: &[u8]) -> bool {
    if data.len() < 8 {
        return false;
    }
    let w = u16::from_le_bytes([data[0], data[1]]) as u32;
    let h = u16::from_le_bytes([data[2], data[3]]) as u32;
    let n = u32::from_le_bytes([data[4], data[5], data[6], data[7]]) as usize;
    let rest = &data[8..];
    if n > rest.len() || !small(w, h) {
        return false;
    }
    let Ok(features) = Tensor::decode(&rest[..n]) else { return false };
    let Some(lines) = text(&rest[n..]) else { return false };
    CandidateStore::from_jsonl(lines, &features, w, h).is_ok()
}

pub fn label_map_png(data: &[u8]) -> bool {
    let Ok(map) = LabelMap::from_png(data) else { return false };
    let png = map.to_png().expect("decoded map encodes");
    assert_eq!(LabelMap::from_png(&png).expect("own png decodes"), map);
    true
}

pub fn scene_spec(data: &[u8]) -> bool {
    let Ok(spec) = serde_json::from_slice::<SceneSpec>(data) else { return false };
    if !small(spec.width, spec.height) {
        return false;
    }
    let kb = synthetic_kb();
    if let Ok((gt, pred)) = generate_scene(&spec, &kb, "fuzz", 0) {
        RecognitionTree::parse(&gt.to_bytes(), None).expect("generated tree parses");
        if let Some(p) = pred {
            RecognitionTree::parse(&p.to_bytes(), None).expect("perturbed tree parses");
        }
        return true;
    }
    false
}
