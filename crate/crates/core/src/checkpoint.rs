//! Versioned JSON checkpoints. Tensors are stored as base64 strings of
//! little-endian f64 bytes so values survive bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kg::{Edge, RelationId};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Priors,
    Fitness,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        EncodedTensor {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::data(format!("bad tensor payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::data("tensor payload is not a whole number of f64 values"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub epochs_completed: usize,
    pub final_losses: BTreeMap<String, f64>,
    /// Edges held out of training for link evaluation.
    pub test_edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    /// Relations with GNN modules, in module order.
    pub relations: Vec<RelationId>,
    pub params: BTreeMap<String, EncodedTensor>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        config: RunConfig,
        relations: Vec<RelationId>,
        params: &ParamSet,
        metadata: Metadata,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind,
            config,
            relations,
            params: params.iter().map(|(k, t)| (k.clone(), EncodedTensor::encode(t))).collect(),
            metadata,
        }
    }

    pub fn param_set(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (k, t) in &self.params {
            p.insert(k.clone(), t.decode()?);
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        for (k, v) in &self.metadata.final_losses {
            if !v.is_finite() {
                return Err(Error::Divergence(format!("final loss `{k}` is {v}")));
            }
        }
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::data(format!("checkpoint is not JSON: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::data(format!(
                    "checkpoint format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::data("checkpoint lacks a format_version")),
        }
        serde_json::from_value(value).map_err(|e| Error::data(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
