use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::PredictError;
use crate::mask::{BinaryMask, Rle};
use crate::probe::Probe;

/// Pyramid strides of the candidate store.
pub const DEFAULT_STRIDES: [u32; 5] = [8, 16, 32, 64, 128];
/// Candidates gathered per probe, one per pyramid level.
pub const MAX_GATHER: usize = 5;

/// A cell on one pyramid level: `x = ⌊a/s⌋`, `y = ⌊b/s⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureLoc {
    pub stride: u32,
    pub y: u32,
    pub x: u32,
}

pub fn feature_locations(probe: Probe, strides: &[u32]) -> Vec<FeatureLoc> {
    strides.iter().filter(|&&s| s > 0).map(|&s| FeatureLoc { stride: s, y: probe.b / s, x: probe.a / s }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub mask: BinaryMask,
    pub feature: Vec<f32>,
    pub confidence: f32,
}

/// One line of `candidates.jsonl`. `level` is the stride in pixels and
/// `feature_offset` the row in the feature blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    pub level: u32,
    pub y: u32,
    pub x: u32,
    pub confidence: f32,
    pub rle: Rle,
    pub feature_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateStore {
    strides: Vec<u32>,
    entries: BTreeMap<FeatureLoc, Candidate>,
}

impl CandidateStore {
    pub fn new(strides: &[u32]) -> Self {
        Self { strides: strides.to_vec(), entries: BTreeMap::new() }
    }

    pub fn strides(&self) -> &[u32] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, loc: FeatureLoc, c: Candidate) -> Result<(), PredictError> {
        if !self.strides.contains(&loc.stride) {
            return Err(PredictError::Backend(format!("stride {} is not a pyramid level", loc.stride)));
        }
        self.entries.insert(loc, c);
        Ok(())
    }

    pub fn get(&self, loc: &FeatureLoc) -> Option<&Candidate> {
        self.entries.get(loc)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureLoc, &Candidate)> {
        self.entries.iter()
    }

    /// Stored candidates at the probe's mapped cell on each level, finest
    /// level first.
    pub fn gather(&self, probe: Probe) -> Vec<(FeatureLoc, &Candidate)> {
        feature_locations(probe, &self.strides)
            .into_iter()
            .filter_map(|l| self.entries.get(&l).map(|c| (l, c)))
            .take(MAX_GATHER)
            .collect()
    }

    /// Parses `candidates.jsonl` against the `(N, D)` feature blob.
    pub fn from_jsonl(text: &str, features: &Tensor, width: u32, height: u32) -> Result<Self, PredictError> {
        let (rows, dim) = match features.dims.as_slice() {
            &[n, d] => (n as usize, d as usize),
            other => return Err(PredictError::DimMismatch(format!("candidate features must be 2-D, got {other:?}"))),
        };
        let mut store = Self::new(&DEFAULT_STRIDES);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: CandidateLine = serde_json::from_str(line)
                .map_err(|e| PredictError::Backend(format!("candidates.jsonl line {}: {e}", i + 1)))?;
            if l.feature_offset >= rows {
                return Err(PredictError::DimMismatch(format!(
                    "line {}: feature_offset {} beyond {rows} rows",
                    i + 1,
                    l.feature_offset
                )));
            }
            if (l.rle.width, l.rle.height) != (width, height) {
                return Err(PredictError::DimMismatch(format!(
                    "line {}: candidate mask size differs from image",
                    i + 1
                )));
            }
            let feature = features.data[l.feature_offset * dim..(l.feature_offset + 1) * dim].to_vec();
            let loc = FeatureLoc { stride: l.level, y: l.y, x: l.x };
            store.insert(loc, Candidate { mask: l.rle.decode()?, feature, confidence: l.confidence })?;
        }
        Ok(store)
    }

    /// Inverse of [`CandidateStore::from_jsonl`]: JSON lines and the
    /// feature blob.
    pub fn to_jsonl(&self) -> (String, Tensor) {
        let dim = self.entries.values().next().map_or(0, |c| c.feature.len());
        let mut text = String::new();
        let mut data = Vec::new();
        for (i, (loc, c)) in self.entries.iter().enumerate() {
            let line = CandidateLine {
                level: loc.stride,
                y: loc.y,
                x: loc.x,
                confidence: c.confidence,
                rle: Rle::encode(&c.mask),
                feature_offset: i,
            };
            text.push_str(&serde_json::to_string(&line).expect("candidate line serializes"));
            text.push('\n');
            data.extend_from_slice(&c.feature);
        }
        (text, Tensor { dims: vec![self.entries.len() as u32, dim as u32], data })
    }
}
