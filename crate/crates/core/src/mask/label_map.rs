use std::collections::BTreeMap;
use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Luma};
use thiserror::Error;

use super::{BinaryMask, MaskError, MAX_PIXELS};

/// Label value reserved for unlabeled pixels.
pub const VOID: u16 = 0;

#[derive(Debug, Error)]
pub enum LabelMapError {
    #[error("label map has {got} labels, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("label {0} is not in the class table")]
    UnknownLabel(u16),
    #[error("class masks overlap at ({0},{1})")]
    Overlap(u32, u32),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Dense per-pixel class codes, row-major. `VOID` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Result<Self, LabelMapError> {
        BinaryMask::empty(width, height)?;
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(LabelMapError::LengthMismatch { got: labels.len(), expected });
        }
        Ok(Self { width, height, labels })
    }

    pub fn void(width: u32, height: u32) -> Result<Self, LabelMapError> {
        Self::new(width, height, vec![VOID; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, a: u32, b: u32) -> u16 {
        self.labels[b as usize * self.width as usize + a as usize]
    }

    pub fn set(&mut self, a: u32, b: u32, label: u16) {
        let w = self.width as usize;
        self.labels[b as usize * w + a as usize] = label;
    }

    /// Checks every non-void label against `table`.
    pub fn validate(&self, table: &[u16]) -> Result<(), LabelMapError> {
        match self.labels.iter().find(|&&l| l != VOID && !table.contains(&l)) {
            Some(&l) => Err(LabelMapError::UnknownLabel(l)),
            None => Ok(()),
        }
    }

    pub fn class_mask(&self, label: u16) -> BinaryMask {
        let bits: Vec<bool> = self.labels.iter().map(|&l| l == label).collect();
        BinaryMask::from_bools(self.width, self.height, &bits).expect("dims already validated")
    }

    /// One mask per non-void label present.
    pub fn class_masks(&self) -> BTreeMap<u16, BinaryMask> {
        let mut present: Vec<u16> = self.labels.iter().copied().filter(|&l| l != VOID).collect();
        present.sort_unstable();
        present.dedup();
        present.into_iter().map(|l| (l, self.class_mask(l))).collect()
    }

    pub fn from_class_masks<'a>(
        width: u32,
        height: u32,
        masks: impl IntoIterator<Item = (u16, &'a BinaryMask)>,
    ) -> Result<Self, LabelMapError> {
        let mut map = Self::void(width, height)?;
        for (label, mask) in masks {
            if mask.width() != width || mask.height() != height {
                return Err(MaskError::DimensionMismatch(width, height, mask.width(), mask.height()).into());
            }
            for (a, b) in mask.iter_set() {
                if map.get(a, b) != VOID {
                    return Err(LabelMapError::Overlap(a, b));
                }
                map.set(a, b, label);
            }
        }
        Ok(map)
    }

    /// Encodes as a 16-bit single-channel PNG.
    pub fn to_png(&self) -> Result<Vec<u8>, LabelMapError> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.labels.clone()).expect("buffer size");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| LabelMapError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes a single-channel PNG; 8-bit inputs are widened.
    pub fn from_png(bytes: &[u8]) -> Result<Self, LabelMapError> {
        let mut reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
        let mut limits = image::Limits::default();
        limits.max_alloc = Some(MAX_PIXELS * 2);
        reader.limits(limits);
        let img = reader.decode().map_err(|e| LabelMapError::Png(e.to_string()))?;
        let (w, h) = (img.width(), img.height());
        if w as u64 * h as u64 > MAX_PIXELS {
            return Err(MaskError::InvalidDimensions(w, h).into());
        }
        let labels = match img {
            image::DynamicImage::ImageLuma16(buf) => buf.into_raw(),
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
            other => return Err(LabelMapError::Png(format!("expected grayscale PNG, got {:?}", other.color()))),
        };
        Self::new(w, h, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn png_round_trip_keeps_wide_labels() {
        let labels: Vec<u16> = (0..12).map(|i| if i % 3 == 0 { VOID } else { 300 + i as u16 }).collect();
        let map = LabelMap::new(4, 3, labels).unwrap();
        let back = LabelMap::from_png(&map.to_png().unwrap()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn validate_table() {
        let map = LabelMap::new(2, 1, vec![VOID, 7]).unwrap();
        assert!(map.validate(&[7]).is_ok());
        assert!(matches!(map.validate(&[3]), Err(LabelMapError::UnknownLabel(7))));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let a = BinaryMask::rect(4, 4, 0, 0, 2, 2).unwrap();
        let b = BinaryMask::rect(4, 4, 1, 1, 3, 3).unwrap();
        assert!(matches!(LabelMap::from_class_masks(4, 4, [(1, &a), (2, &b)]), Err(LabelMapError::Overlap(1, 1))));
    }

    #[test]
    fn garbage_png_is_an_error() {
        assert!(LabelMap::from_png(b"\x89PNG\r\n\x1a\nnope").is_err());
    }

    proptest! {
        #[test]
        fn decompose_recompose(w in 1u32..16, h in 1u32..16, raw in proptest::collection::vec(0u16..5, 256)) {
            let labels = raw[..(w * h) as usize].to_vec();
            let map = LabelMap::new(w, h, labels).unwrap();
            let masks = map.class_masks();
            let total: usize = masks.values().map(|m| m.count()).sum();
            prop_assert_eq!(total, map.labels().iter().filter(|&&l| l != VOID).count());
            let back = LabelMap::from_class_masks(w, h, masks.iter().map(|(l, m)| (*l, m))).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
