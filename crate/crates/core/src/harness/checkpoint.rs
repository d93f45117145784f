//! Checkpoint file: a magic line, one JSON header line, then the parameters
//! as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use crate::error::{Error, Result};
use crate::models::{LabelSpace, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::text::{Preprocessor, Vocabulary};

pub const MAGIC: &str = "ARMI-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    label_space: LabelSpace,
    vocabulary: Vocabulary,
    preprocessor: Preprocessor,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// A trained model with everything needed to run it on new text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocabulary: Vocabulary,
    pub label_space: LabelSpace,
    /// Normalization applied to training text, reused on new text.
    pub preprocessor: Preprocessor,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    /// Rounds the model's parameters to `f32`, the stored precision, so the
    /// in-memory model and a reloaded one agree exactly.
    pub fn new(
        mut model: Model,
        vocabulary: Vocabulary,
        preprocessor: Preprocessor,
        metadata: TrainingMetadata,
    ) -> Result<Self> {
        if vocabulary.len() != model.spec().encoder.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the encoder expects {}",
                vocabulary.len(),
                model.spec().encoder.vocab_size
            )));
        }
        model.params_mut().round_to_f32();
        Ok(Self {
            model,
            vocabulary,
            label_space: LabelSpace::default(),
            preprocessor,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut payload = Vec::with_capacity(4 * params.num_scalars());
        for v in params.values() {
            for &x in v.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: *self.model.spec(),
            label_space: self.label_space.clone(),
            vocabulary: self.vocabulary.clone(),
            preprocessor: self.preprocessor,
            metadata: self.metadata.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing checkpoint magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("checkpoint magic is not text".into()))?;
        if magic != format!("{MAGIC} {FORMAT_VERSION}") {
            return Err(bad(format!("not a version {FORMAT_VERSION} checkpoint (found {magic:?})")));
        }
        let rest = &bytes[nl + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("invalid checkpoint header: {e}")))?;
        let payload = &rest[nl + 1..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("checkpoint payload does not match its SHA-256".into()));
        }
        if header.label_space != LabelSpace::default() {
            return Err(bad("checkpoint label space differs from this build's label space".into()));
        }

        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * expected {
            return Err(bad(format!(
                "payload holds {} bytes, header declares {} values",
                payload.len(),
                expected
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let entries = header
            .tensors
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                let data: Vec<f64> = floats.by_ref().take(n).collect();
                Ok((t.name.clone(), Tensor::new(t.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut model = Model::new(header.spec)?;
        model.params_mut().load_values(entries)?;
        if header.vocabulary.len() != header.spec.encoder.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens but the encoder expects {}",
                header.vocabulary.len(),
                header.spec.encoder.vocab_size
            )));
        }
        Ok(Self {
            model,
            vocabulary: header.vocabulary,
            label_space: header.label_space,
            preprocessor: header.preprocessor,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
