//! `VRTB` tensor blobs: magic, u32 version (1), u32 ndim, u32 dims, then a
//! little-endian f32 payload in row-major order.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::PredictError;

pub const MAGIC: &[u8; 4] = b"VRTB";
pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;
/// Payload cap for untrusted blobs (256M floats).
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self, PredictError> {
        let n = element_count(&dims)?;
        if n != data.len() as u64 {
            return Err(PredictError::DimMismatch(format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.dims.len() as u32).unwrap();
        for &d in &self.dims {
            out.write_u32::<LittleEndian>(d).unwrap();
        }
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PredictError> {
        let bad = |m: &str| PredictError::MalformedBlob(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated version"))?;
        if version != VERSION {
            return Err(PredictError::MalformedBlob(format!("unsupported version {version}")));
        }
        let ndim = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated ndim"))?;
        if ndim > MAX_NDIM {
            return Err(PredictError::MalformedBlob(format!("ndim {ndim} too large")));
        }
        let dims = (0..ndim)
            .map(|_| cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated dims")))
            .collect::<Result<Vec<_>, _>>()?;
        let n = element_count(&dims).map_err(|e| PredictError::MalformedBlob(e.to_string()))?;
        let rest = bytes.len() as u64 - cur.position();
        if rest != n * 4 {
            return Err(PredictError::MalformedBlob(format!("payload has {rest} bytes, expected {}", n * 4)));
        }
        let mut data = vec![0f32; n as usize];
        cur.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated payload"))?;
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u32]) -> Result<u64, PredictError> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64).filter(|&n| n <= MAX_ELEMENTS))
        .ok_or_else(|| PredictError::DimMismatch(format!("dims {dims:?} exceed the element limit")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..4], b"VRTB");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn rejects_bad_blobs() {
        let good = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().encode();
        assert!(Tensor::decode(&good[..good.len() - 1]).is_err());
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(Tensor::decode(&v2).is_err());
        let mut huge = good.clone();
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Tensor::decode(&huge).is_err());
        assert!(Tensor::decode(b"NOPE").is_err());
        assert!(Tensor::new(vec![3], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(0u32..5, 0..4), seed in any::<u32>()) {
            let n: u32 = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i ^ seed) as f32 * 0.25 - 3.0).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
