//! Probe pixels for Type-II requests: γ-centerness sampling (simulated
//! clicks) and stride-grid sampling (dense, non-probing inference).

use num_traits::{Float, Num};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

/// A pixel `(a, b)` = (column, row). Serialized as `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Probe {
    pub a: u32,
    pub b: u32,
}

impl Probe {
    pub fn new(a: u32, b: u32) -> Self {
        Self { a, b }
    }
}

impl From<[u32; 2]> for Probe {
    fn from([a, b]: [u32; 2]) -> Self {
        Self { a, b }
    }
}

impl From<Probe> for [u32; 2] {
    fn from(p: Probe) -> Self {
        [p.a, p.b]
    }
}

impl From<(u32, u32)> for Probe {
    fn from((a, b): (u32, u32)) -> Self {
        Self { a, b }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("sampling region is empty")]
    EmptyRegion,
    #[error("gamma {0} is outside [0, 1]")]
    InvalidGamma(f64),
    #[error("stride must be at least 1")]
    InvalidStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPolicy {
    pub gamma: f64,
    pub seed: u64,
}

impl GammaPolicy {
    pub fn new(gamma: f64, seed: u64) -> Result<Self, ProbeError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ProbeError::InvalidGamma(gamma));
        }
        Ok(Self { gamma, seed })
    }
}

impl Default for GammaPolicy {
    fn default() -> Self {
        Self { gamma: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub stride: u32,
    /// Offset of the first grid point on both axes.
    pub anchor: u32,
}

impl GridPolicy {
    pub const DEFAULT_STRIDE: u32 = 16;

    /// Grid with the anchor centered in the first cell, `⌊stride/2⌋`.
    pub fn new(stride: u32) -> Result<Self, ProbeError> {
        if stride == 0 {
            return Err(ProbeError::InvalidStride);
        }
        Ok(Self { stride, anchor: stride / 2 })
    }

    pub fn with_anchor(mut self, anchor: u32) -> Self {
        self.anchor = anchor;
        self
    }
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self { stride: Self::DEFAULT_STRIDE, anchor: Self::DEFAULT_STRIDE / 2 }
    }
}

/// Box `(a0, b0, a1, b1)` with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleBox<T> {
    pub a0: T,
    pub b0: T,
    pub a1: T,
    pub b1: T,
}

/// Shrinks `bx` toward `mass` by `gamma`: γ=0 collapses onto the mass
/// center, γ=1 returns the box unchanged. Generic so the same closed form
/// can run on exact rationals.
pub fn shrink_box<T: Num + Copy>(bx: SampleBox<T>, mass: (T, T), gamma: T) -> SampleBox<T> {
    let (am, bm) = mass;
    SampleBox {
        a0: am - gamma * (am - bx.a0),
        a1: am + gamma * (bx.a1 - am),
        b0: bm - gamma * (bm - bx.b0),
        b1: bm + gamma * (bx.b1 - bm),
    }
}

/// A sampled probe. `off_region` is set when no region pixel fell inside the
/// shrunken box and the probe was drawn from the box alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledProbe {
    pub probe: Probe,
    pub off_region: bool,
}

/// Integer pixels covered by `[lo, hi]`; an interval containing no integer
/// maps to the nearest one, rounding halves down.
fn pixel_span<T: Float>(lo: T, hi: T) -> (i64, i64) {
    let (l, h) = (lo.ceil(), hi.floor());
    if l <= h {
        (l.to_i64().unwrap_or(0), h.to_i64().unwrap_or(0))
    } else {
        let two = T::one() + T::one();
        let mid = (lo + hi) / two;
        let r = (mid - T::one() / two).ceil().to_i64().unwrap_or(0);
        (r, r)
    }
}

/// Draws a probe from `region ∩ B̂`, falling back to `B̂` alone when that
/// intersection has no pixel. Uniform over candidates, seeded.
pub fn sample_probe(region: &BinaryMask, policy: &GammaPolicy) -> Result<SampledProbe, ProbeError> {
    GammaPolicy::new(policy.gamma, policy.seed)?;
    let mc = region.mass_center().map_err(|_| ProbeError::EmptyRegion)?;
    let bb = region.bbox().ok_or(ProbeError::EmptyRegion)?;
    let bx = SampleBox { a0: bb.a0 as f64, b0: bb.b0 as f64, a1: bb.a1 as f64, b1: bb.b1 as f64 };
    let hat = shrink_box(bx, (mc.a, mc.b), policy.gamma);
    let (a_lo, a_hi) = pixel_span(hat.a0, hat.a1);
    let (b_lo, b_hi) = pixel_span(hat.b0, hat.b1);
    let clamp_a = |v: i64| v.clamp(0, region.width() as i64 - 1) as u32;
    let clamp_b = |v: i64| v.clamp(0, region.height() as i64 - 1) as u32;
    let (a_lo, a_hi, b_lo, b_hi) = (clamp_a(a_lo), clamp_a(a_hi), clamp_b(b_lo), clamp_b(b_hi));

    let inside: Vec<Probe> = (b_lo..=b_hi)
        .flat_map(|b| (a_lo..=a_hi).map(move |a| Probe::new(a, b)))
        .filter(|p| region.get(p.a, p.b))
        .collect();
    let single_box = a_lo == a_hi && b_lo == b_hi;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    if !inside.is_empty() {
        let probe = if inside.len() == 1 { inside[0] } else { inside[rng.random_range(0..inside.len())] };
        return Ok(SampledProbe { probe, off_region: false });
    }
    let probe = if single_box {
        Probe::new(a_lo, b_lo)
    } else {
        Probe::new(rng.random_range(a_lo..=a_hi), rng.random_range(b_lo..=b_hi))
    };
    Ok(SampledProbe { probe, off_region: true })
}

/// Where a simulated click may land: the predicted semantic region
/// intersected with the ground-truth instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvaluationRegion {
    Region(BinaryMask),
    /// The instance cannot be clicked and scores IoU 0.
    Lost,
}

pub fn evaluation_region(
    pred_semantic: &BinaryMask,
    gt_instance: &BinaryMask,
) -> Result<EvaluationRegion, crate::mask::MaskError> {
    let inter = pred_semantic.intersection(gt_instance)?;
    Ok(if inter.is_empty() { EvaluationRegion::Lost } else { EvaluationRegion::Region(inter) })
}

/// Grid points `anchor + k·stride` inside `region`, row-major.
pub fn grid_probes(region: &BinaryMask, policy: &GridPolicy) -> Vec<Probe> {
    let s = policy.stride.max(1);
    let anchor = policy.anchor;
    let mut out = Vec::new();
    let mut b = anchor;
    while b < region.height() {
        let mut a = anchor;
        while a < region.width() {
            if region.get(a, b) {
                out.push(Probe::new(a, b));
            }
            a = match a.checked_add(s) {
                Some(v) => v,
                None => break,
            };
        }
        b = match b.checked_add(s) {
            Some(v) => v,
            None => break,
        };
    }
    out
}
