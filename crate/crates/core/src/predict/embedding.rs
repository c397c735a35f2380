use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::PredictError;

/// Temperature used for Type-I logits unless the table says otherwise.
pub const DEFAULT_TYPE1_TEMPERATURE: f32 = 0.07;
/// Type-II scoring runs at unit temperature with an additive bias.
pub const DEFAULT_TYPE2_TEMPERATURE: f32 = 1.0;

fn default_temperature() -> f32 {
    DEFAULT_TYPE1_TEMPERATURE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    labels: Vec<String>,
    dim: u32,
    #[serde(default = "default_temperature")]
    temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f32>>,
}

/// Text embeddings keyed by concept label, pre-projected to the visual
/// feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    labels: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    temperature: f32,
    bias: Option<Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(
        labels: Vec<String>,
        dim: usize,
        vectors: Vec<f32>,
        temperature: f32,
        bias: Option<Vec<f32>>,
    ) -> Result<Self, PredictError> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(PredictError::Backend(format!("temperature must be positive, got {temperature}")));
        }
        if vectors.len() != labels.len() * dim {
            return Err(PredictError::DimMismatch(format!(
                "{} labels of dim {dim} need {} values, got {}",
                labels.len(),
                labels.len() * dim,
                vectors.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != labels.len()) {
            return Err(PredictError::DimMismatch("bias length differs from label count".into()));
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(PredictError::Backend(format!("duplicate embedding label {l:?}")));
            }
        }
        Ok(Self { dim, labels, index, vectors, temperature, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, label: &str) -> Result<&[f32], PredictError> {
        let i = *self.index.get(label).ok_or_else(|| PredictError::UnknownLabel(label.into()))?;
        Ok(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn bias(&self, label: &str) -> f32 {
        match (&self.bias, self.index.get(label)) {
            (Some(b), Some(&i)) => b[i],
            _ => 0.0,
        }
    }

    /// Parses the JSON header together with its tensor blob of shape
    /// `(labels, dim)`.
    pub fn from_parts(header_json: &str, blob: &[u8]) -> Result<Self, PredictError> {
        let h: Header =
            serde_json::from_str(header_json).map_err(|e| PredictError::Backend(format!("embedding header: {e}")))?;
        let t = Tensor::decode(blob)?;
        if t.dims != [h.labels.len() as u32, h.dim] {
            return Err(PredictError::DimMismatch(format!(
                "blob shape {:?} but header says ({}, {})",
                t.dims,
                h.labels.len(),
                h.dim
            )));
        }
        Self::new(h.labels, h.dim as usize, t.data, h.temperature, h.bias)
    }

    /// Loads `path` (JSON header) and the blob next to it with a `.vrtb`
    /// extension.
    pub fn load(path: &Path) -> Result<Self, PredictError> {
        let header =
            std::fs::read_to_string(path).map_err(|e| PredictError::Backend(format!("{}: {e}", path.display())))?;
        let blob_path = path.with_extension("vrtb");
        let blob =
            std::fs::read(&blob_path).map_err(|e| PredictError::Backend(format!("{}: {e}", blob_path.display())))?;
        Self::from_parts(&header, &blob)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let h = Header {
            labels: self.labels.clone(),
            dim: self.dim as u32,
            temperature: self.temperature,
            bias: self.bias.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&h)?)?;
        let t = Tensor { dims: vec![self.labels.len() as u32, self.dim as u32], data: self.vectors.clone() };
        std::fs::write(path.with_extension("vrtb"), t.encode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_round_trip() {
        let e = EmbeddingTable::new(
            vec!["car".into(), "road".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            0.07,
            Some(vec![0.5, -0.5]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.json");
        e.save(&p).unwrap();
        let back = EmbeddingTable::load(&p).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.row("road").unwrap(), &[0.0, 1.0]);
        assert_eq!(back.bias("car"), 0.5);
        assert!(matches!(back.row("sky"), Err(PredictError::UnknownLabel(_))));
    }

    #[test]
    fn header_defaults_and_shape_check() {
        let blob = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap().encode();
        let e = EmbeddingTable::from_parts(r#"{"labels":["a"],"dim":3}"#, &blob).unwrap();
        assert_eq!(e.temperature(), DEFAULT_TYPE1_TEMPERATURE);
        assert!(EmbeddingTable::from_parts(r#"{"labels":["a","b"],"dim":3}"#, &blob).is_err());
        assert!(EmbeddingTable::from_parts(r#"{"labels":["a"],"dim":3,"temperature":0}"#, &blob).is_err());
    }
}
