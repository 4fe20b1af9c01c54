use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{MicroDenseNet, ModelConfig, Param};
use crate::data::{LabelSet, NormalizationStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "micro-densenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    /// Little-endian f32 bytes, base64.
    data: String,
}

/// On-disk checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub normalization: NormalizationStats,
    #[serde(default)]
    pub trained: bool,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &MicroDenseNet) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| {
                let bytes: Vec<u8> = p.tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                StoredParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: *model.config(),
            labels: model.labels().clone(),
            normalization: model.normalization().clone(),
            trained: model.is_trained(),
            params,
        }
    }

    pub fn into_model(self) -> Result<MicroDenseNet> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not a model checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let params = self
            .params
            .into_iter()
            .map(|p| {
                let bytes = B64
                    .decode(p.data.as_bytes())
                    .map_err(|e| Error::validation(format!("parameter {}: {e}", p.name)))?;
                if bytes.len() % 4 != 0 {
                    return Err(Error::validation(format!("parameter {} has a truncated payload", p.name)));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(Param {
                    tensor: Tensor::new(p.shape, data)?,
                    name: p.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MicroDenseNet::from_parts(self.config, self.labels, self.normalization, params, self.trained)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }
}

/// Write `model` to `path`; returns the hex SHA-256 of the bytes written.
pub fn save_checkpoint(model: &MicroDenseNet, path: &Path) -> Result<String> {
    let json = Checkpoint::from_model(model).to_json();
    std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    Ok(crate::sha256_hex(json.as_bytes()))
}

pub fn load_checkpoint(path: &Path) -> Result<MicroDenseNet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    ckpt.into_model()
}
