use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BinaryMask, MaskError, MAX_PIXELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RleOrder {
    #[default]
    #[serde(rename = "row-major")]
    RowMajor,
    /// COCO-style ordering; accepted on import only.
    #[serde(rename = "column-major")]
    ColumnMajor,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RleError {
    #[error("malformed RLE: {0}")]
    Malformed(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Uncompressed run-length encoding. Runs alternate starting with zeros, so
/// a mask whose first pixel is set begins with a `0` count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRle")]
pub struct Rle {
    pub order: RleOrder,
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRle {
    #[serde(default)]
    order: RleOrder,
    width: u32,
    height: u32,
    counts: Vec<i64>,
}

impl TryFrom<RawRle> for Rle {
    type Error = RleError;

    fn try_from(raw: RawRle) -> Result<Self, RleError> {
        let counts = raw
            .counts
            .into_iter()
            .map(|c| u64::try_from(c).map_err(|_| RleError::Malformed(format!("negative count {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let rle = Rle { order: raw.order, width: raw.width, height: raw.height, counts };
        rle.check()?;
        Ok(rle)
    }
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for i in 0..mask.len() {
            let v = mask.get_index(i);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Rle { order: RleOrder::RowMajor, width: mask.width(), height: mask.height(), counts }
    }

    fn check(&self) -> Result<(), RleError> {
        let n = self.width as u64 * self.height as u64;
        if self.width == 0 || self.height == 0 || n > MAX_PIXELS {
            return Err(RleError::Malformed(format!("bad dimensions {}x{}", self.width, self.height)));
        }
        if let Some(i) = self.counts.iter().skip(1).position(|&c| c == 0) {
            return Err(RleError::Malformed(format!("zero-length run at index {}", i + 1)));
        }
        let total = self.counts.iter().try_fold(0u64, |acc, &c| acc.checked_add(c));
        match total {
            Some(t) if t == n => Ok(()),
            Some(t) => Err(RleError::Malformed(format!("counts sum to {t}, expected {n}"))),
            None => Err(RleError::Malformed("counts overflow".into())),
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, RleError> {
        self.check()?;
        let mut mask = BinaryMask::empty(self.width, self.height)?;
        let (w, h) = (self.width as u64, self.height as u64);
        let mut pos = 0u64;
        for (k, &run) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for i in pos..pos + run {
                    let (a, b) = match self.order {
                        RleOrder::RowMajor => (i % w, i / w),
                        RleOrder::ColumnMajor => (i / h, i % h),
                    };
                    mask.set(a as u32, b as u32, true);
                }
            }
            pos += run;
        }
        Ok(mask)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("rle serializes")
    }

    pub fn from_json(s: &str) -> Result<Rle, RleError> {
        serde_json::from_str(s).map_err(|e| RleError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_counts() {
        let zeros = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(Rle::encode(&zeros).counts, vec![16]);
        let ones = BinaryMask::full(4, 4).unwrap();
        assert_eq!(Rle::encode(&ones).counts, vec![0, 16]);
        let mut m = BinaryMask::empty(2, 2).unwrap();
        m.set(0, 0, true);
        assert_eq!(Rle::encode(&m).counts, vec![0, 1, 3]);
    }

    #[test]
    fn json_shape() {
        let mut m = BinaryMask::empty(2, 2).unwrap();
        m.set(1, 1, true);
        assert_eq!(Rle::encode(&m).to_json(), r#"{"order":"row-major","width":2,"height":2,"counts":[3,1]}"#);
    }

    #[test]
    fn malformed_inputs() {
        for bad in [
            r#"{"order":"row-major","width":2,"height":2,"counts":[3]}"#,
            r#"{"order":"row-major","width":2,"height":2,"counts":[5,-1]}"#,
            r#"{"order":"row-major","width":2,"height":2,"counts":[1,0,3]}"#,
            r#"{"order":"row-major","width":0,"height":2,"counts":[]}"#,
            r#"{"order":"diagonal","width":2,"height":2,"counts":[4]}"#,
            r#"{"width":2,"height":2,"counts":[18446744073709551615,5]}"#,
        ] {
            assert!(Rle::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn column_major_import() {
        // 2x2 column-major stream 1,1,0,0 sets the left column
        let r = Rle { order: RleOrder::ColumnMajor, width: 2, height: 2, counts: vec![0, 2, 2] };
        let m = r.decode().unwrap();
        assert!(m.get(0, 0) && m.get(0, 1) && !m.get(1, 0) && !m.get(1, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]
        #[test]
        fn round_trip(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
            let mut s = seed | 1;
            let m = BinaryMask::from_fn(w, h, |_, _| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                s % 3 == 0
            }).unwrap();
            let r = Rle::encode(&m);
            prop_assert_eq!(r.counts.iter().sum::<u64>(), (w * h) as u64);
            prop_assert_eq!(r.decode().unwrap(), m);
        }
    }
}
