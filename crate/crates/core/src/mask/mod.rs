//! Binary masks, the mask algebra used throughout the toolkit, and the
//! run-length / label-map codecs.
//!
//! Coordinates follow the probe convention: `a` is the column (x), `b` is
//! the row (y). Bits are stored row-major, packed into `u64` words; bits past
//! `width * height` are always zero.

mod label_map;
mod rle;

pub use label_map::{LabelMap, LabelMapError, VOID};
pub use rle::{Rle, RleError, RleOrder};

use thiserror::Error;

/// Largest number of pixels accepted when a mask is built from untrusted
/// input (RLE, PNG, tree files).
pub const MAX_PIXELS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("IoU is undefined for two empty masks")]
    BothEmpty,
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid mask dimensions {0}x{1}")]
    InvalidDimensions(u32, u32),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

/// Real-valued centroid of a mask plus the set pixel nearest to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassCenter {
    pub a: f64,
    pub b: f64,
    pub inside: (u32, u32),
}

/// Inclusive pixel bounding box `(a0, b0)..=(a1, b1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub a0: u32,
    pub b0: u32,
    pub a1: u32,
    pub b1: u32,
}

fn check_dims(width: u32, height: u32) -> Result<(), MaskError> {
    if width == 0 || height == 0 || (width as u64) * (height as u64) > MAX_PIXELS {
        return Err(MaskError::InvalidDimensions(width, height));
    }
    Ok(())
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let n = width as usize * height as usize;
        Ok(Self { width, height, words: vec![0; n.div_ceil(64)] })
    }

    pub fn full(width: u32, height: u32) -> Result<Self, MaskError> {
        let mut m = Self::empty(width, height)?;
        m.words.iter_mut().for_each(|w| *w = u64::MAX);
        m.trim_tail();
        Ok(m)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self, MaskError> {
        let mut m = Self::empty(width, height)?;
        for b in 0..height {
            for a in 0..width {
                if f(a, b) {
                    m.set(a, b, true);
                }
            }
        }
        Ok(m)
    }

    /// Builds a mask from a row-major slice of booleans.
    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Result<Self, MaskError> {
        let mut m = Self::empty(width, height)?;
        if bits.len() != m.len() {
            return Err(MaskError::InvalidDimensions(width, height));
        }
        for (i, &v) in bits.iter().enumerate() {
            if v {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    /// Axis-aligned rectangle `[a0, a1) x [b0, b1)`, clamped to the image.
    pub fn rect(width: u32, height: u32, a0: u32, b0: u32, a1: u32, b1: u32) -> Result<Self, MaskError> {
        let (a1, b1) = (a1.min(width), b1.min(height));
        let mut m = Self::empty(width, height)?;
        for b in b0..b1 {
            for a in a0..a1 {
                m.set(a, b, true);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of pixels (`width * height`).
    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.len()
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, a: u32, b: u32) -> bool {
        if a >= self.width || b >= self.height {
            return false;
        }
        let i = b as usize * self.width as usize + a as usize;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Bit at row-major index `i`.
    pub fn get_index(&self, i: usize) -> bool {
        i < self.len() && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, a: u32, b: u32, value: bool) {
        assert!(a < self.width && b < self.height, "pixel ({a},{b}) out of bounds");
        let i = b as usize * self.width as usize + a as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn trim_tail(&mut self) {
        let rem = self.len() % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    fn ensure_same(&self, other: &Self) -> Result<(), MaskError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch(self.width, self.height, other.width, other.height))
        }
    }

    fn zip_words(&self, other: &Self, op: impl Fn(u64, u64) -> u64) -> Result<Self, MaskError> {
        self.ensure_same(other)?;
        let words = self.words.iter().zip(&other.words).map(|(&x, &y)| op(x, y)).collect();
        Ok(Self { width: self.width, height: self.height, words })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_words(other, |x, y| x & y)
    }

    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_words(other, |x, y| x | y)
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_words(other, |x, y| x & !y)
    }

    pub fn complement(&self) -> Self {
        let mut m = Self { width: self.width, height: self.height, words: self.words.iter().map(|w| !w).collect() };
        m.trim_tail();
        m
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize, MaskError> {
        self.ensure_same(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(x, y)| (x & y).count_ones() as usize).sum())
    }

    pub fn union_count(&self, other: &Self) -> Result<usize, MaskError> {
        self.ensure_same(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(x, y)| (x | y).count_ones() as usize).sum())
    }

    /// `|a ∩ b| / |a ∪ b|`. Two empty masks have no defined IoU.
    pub fn iou(&self, other: &Self) -> Result<f64, MaskError> {
        let inter = self.intersection_count(other)?;
        let uni = self.union_count(other)?;
        if uni == 0 {
            return Err(MaskError::BothEmpty);
        }
        Ok(inter as f64 / uni as f64)
    }

    /// IoU with the empty/empty case mapped to 0.
    pub fn iou_or_zero(&self, other: &Self) -> Result<f64, MaskError> {
        match self.iou(other) {
            Err(MaskError::BothEmpty) => Ok(0.0),
            r => r,
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> Result<bool, MaskError> {
        self.ensure_same(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(x, y)| x & !y == 0))
    }

    pub fn is_disjoint(&self, other: &Self) -> Result<bool, MaskError> {
        Ok(self.intersection_count(other)? == 0)
    }

    /// Set pixels in row-major order as `(a, b)`.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let bit = word.trailing_zeros() as usize;
                word &= word - 1;
                let i = wi * 64 + bit;
                Some(((i % w) as u32, (i / w) as u32))
            })
        })
    }

    pub fn bbox(&self) -> Option<PixelBox> {
        let mut it = self.iter_set();
        let (a, b) = it.next()?;
        let mut bx = PixelBox { a0: a, b0: b, a1: a, b1: b };
        for (a, b) in it {
            bx.a0 = bx.a0.min(a);
            bx.a1 = bx.a1.max(a);
            bx.b1 = bx.b1.max(b);
        }
        Some(bx)
    }

    pub fn mass_center(&self) -> Result<MassCenter, MaskError> {
        let (mut sa, mut sb, mut n) = (0f64, 0f64, 0usize);
        for (a, b) in self.iter_set() {
            sa += a as f64;
            sb += b as f64;
            n += 1;
        }
        if n == 0 {
            return Err(MaskError::EmptyMask);
        }
        let (ca, cb) = (sa / n as f64, sb / n as f64);
        let mut best = (f64::INFINITY, (0, 0));
        // iter_set is row-major, so strict `<` keeps the first of tied pixels
        for (a, b) in self.iter_set() {
            let d = (a as f64 - ca).powi(2) + (b as f64 - cb).powi(2);
            if d < best.0 {
                best = (d, (a, b));
            }
        }
        Ok(MassCenter { a: ca, b: cb, inside: best.1 })
    }

    /// Top-down filtering: the part of `self` inside `parent`.
    pub fn clip(&self, parent: &Self) -> Result<Self, MaskError> {
        self.intersection(parent)
    }

    /// Square-structuring-element dilation (`radius > 0`) or erosion
    /// (`radius < 0`) with Chebyshev distance.
    pub fn morph(&self, radius: i32) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.unsigned_abs() as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        let dilate = radius > 0;
        let mut out = Self { width: self.width, height: self.height, words: vec![0; self.words.len()] };
        for b in 0..h {
            for a in 0..w {
                let mut hit = !dilate;
                'scan: for db in -r..=r {
                    for da in -r..=r {
                        let (x, y) = (a + da, b + db);
                        let v = x >= 0 && y >= 0 && x < w && y < h && self.get(x as u32, y as u32);
                        if dilate && v {
                            hit = true;
                            break 'scan;
                        }
                        if !dilate && !v {
                            hit = false;
                            break 'scan;
                        }
                    }
                }
                if hit {
                    out.set(a as u32, b as u32, true);
                }
            }
        }
        out
    }

    /// Row-major bools, mostly for tests and codecs.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(w: u32, h: u32, r0: u32, r1: u32) -> BinaryMask {
        BinaryMask::rect(w, h, 0, r0, w, r1 + 1).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = rows(8, 8, 0, 3);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        let b = rows(8, 8, 4, 7);
        assert_eq!(a.iou(&b).unwrap(), 0.0);
    }

    #[test]
    fn iou_overlapping_rows() {
        // rows 0-3 and 2-5: 16 shared pixels over 48 covered
        let a = rows(8, 8, 0, 3);
        let b = rows(8, 8, 2, 5);
        assert_eq!(a.intersection_count(&b).unwrap(), 16);
        assert_eq!(a.union_count(&b).unwrap(), 48);
        assert!((a.iou(&b).unwrap() - 16.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn iou_errors() {
        let e = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(e.iou(&e), Err(MaskError::BothEmpty));
        let other = BinaryMask::empty(4, 5).unwrap();
        assert!(matches!(e.iou(&other), Err(MaskError::DimensionMismatch(..))));
    }

    #[test]
    fn mass_center_cases() {
        let mut m = BinaryMask::empty(10, 10).unwrap();
        m.set(5, 7, true);
        let c = m.mass_center().unwrap();
        assert_eq!((c.a, c.b, c.inside), (5.0, 7.0, (5, 7)));

        let full = BinaryMask::full(4, 4).unwrap();
        let c = full.mass_center().unwrap();
        assert_eq!((c.a, c.b), (1.5, 1.5));
        assert_eq!(c.inside, (1, 1));

        assert_eq!(BinaryMask::empty(3, 3).unwrap().mass_center(), Err(MaskError::EmptyMask));
    }

    #[test]
    fn mass_center_u_shape_falls_back_inside() {
        // 5x5 U: left and right columns plus the bottom row
        let u = BinaryMask::from_fn(5, 5, |a, b| a == 0 || a == 4 || b == 4).unwrap();
        let c = u.mass_center().unwrap();
        assert!(!u.get(c.a.round() as u32, c.b.round() as u32));
        // brute force nearest set pixel with row-major tie-break
        let mut best: Option<((u32, u32), f64)> = None;
        for b in 0..5 {
            for a in 0..5 {
                if u.get(a, b) {
                    let d = (a as f64 - c.a).hypot(b as f64 - c.b);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some(((a, b), d));
                    }
                }
            }
        }
        assert_eq!(c.inside, best.unwrap().0);
        assert!(u.get(c.inside.0, c.inside.1));
    }

    #[test]
    fn clip_cases() {
        let parent = rows(8, 8, 3, 7);
        let child = rows(8, 8, 4, 5);
        assert_eq!(child.clip(&parent).unwrap(), child);
        let disjoint = rows(8, 8, 0, 1);
        assert!(disjoint.clip(&parent).unwrap().is_empty());
        let wide = rows(8, 8, 0, 5);
        assert_eq!(wide.clip(&parent).unwrap(), rows(8, 8, 3, 5));
    }

    #[test]
    fn morph_rect() {
        let m = BinaryMask::rect(10, 10, 3, 3, 6, 6).unwrap();
        assert_eq!(m.morph(1), BinaryMask::rect(10, 10, 2, 2, 7, 7).unwrap());
        assert_eq!(m.morph(-1), BinaryMask::rect(10, 10, 4, 4, 5, 5).unwrap());
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(BinaryMask::empty(0, 4).is_err());
        assert!(BinaryMask::empty(1 << 20, 1 << 20).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1u32..20, 1u32..20).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)).prop_map(
                move |(x, y)| (BinaryMask::from_bools(w, h, &x).unwrap(), BinaryMask::from_bools(w, h, &y).unwrap()),
            )
        })
    }

    proptest! {
        #[test]
        fn iou_properties((a, b) in arb_pair()) {
            if !a.is_empty() {
                prop_assert_eq!(a.iou(&a).unwrap(), 1.0);
            }
            if let Ok(v) = a.iou(&b) {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v, b.iou(&a).unwrap());
                prop_assert_eq!(v == 1.0, a == b);
            } else {
                prop_assert!(a.is_empty() && b.is_empty());
            }
        }

        #[test]
        fn clip_is_subset_of_both((c, p) in arb_pair()) {
            let k = c.clip(&p).unwrap();
            prop_assert!(k.is_subset_of(&p).unwrap());
            prop_assert!(k.is_subset_of(&c).unwrap());
        }

        #[test]
        fn iter_set_matches_get((a, _) in arb_pair()) {
            let listed: Vec<_> = a.iter_set().collect();
            let brute: Vec<_> = (0..a.height())
                .flat_map(|b| (0..a.width()).map(move |x| (x, b)))
                .filter(|&(x, y)| a.get(x, y))
                .collect();
            prop_assert_eq!(listed, brute);
        }
    }
}
