//! Checkpoint container: a small binary format holding a JSON header
//! (training stage, vocabulary, model topology, tensor table) followed by
//! all parameters as little-endian f32.
//!
//! The header makes a checkpoint self-describing: decoding can rebuild an
//! ensemble of differently sized models without consulting the configs
//! they were trained with. Values round-trip through f32, so saving and
//! reloading quantizes parameters; training continues from the quantized
//! values, which keeps rerun artifacts byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ParamStore};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"AVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Si,
    Sd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Si => "si",
            Stage::Sd => "sd",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub stage: Stage,
    /// Set only for speaker-dependent (sd) checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    /// Digest of the speaker-independent checkpoint an sd model came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_digest: Option<String>,
    /// Digest of the config the producing run was launched with.
    pub config_digest: String,
    pub vocabulary: Vocabulary,
    pub model: ModelDims,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, counted in f32 elements.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::CheckpointFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Serializes `params` behind a header. The tensor table follows the
/// store's name order, so identical inputs produce identical bytes.
pub fn save(
    path: &Path,
    stage: Stage,
    speaker_id: Option<&str>,
    parent_digest: Option<&str>,
    config_digest: &str,
    vocabulary: &Vocabulary,
    model: &ModelDims,
    params: &ParamStore,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in params.iter() {
        let len = tensor.numel() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        stage,
        speaker_id: speaker_id.map(str::to_owned),
        parent_digest: parent_digest.map(str::to_owned),
        config_digest: config_digest.to_owned(),
        vocabulary: vocabulary.clone(),
        model: model.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| format_err(path, e.to_string()))?;

    let payload_elems = offset as usize;
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload_elems * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(path, "file shorter than fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| format_err(path, format!("header JSON: {e}")))?;

    let payload = &bytes[header_end..];
    let total_elems: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total_elems as usize * 4 {
        return Err(format_err(
            path,
            format!(
                "payload holds {} bytes but tensor table requires {}",
                payload.len(),
                total_elems * 4
            ),
        ));
    }

    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.len {
            return Err(format_err(
                path,
                format!("tensor {} shape does not match its length", entry.name),
            ));
        }
        let start = entry.offset as usize * 4;
        let end = start + entry.len as usize * 4;
        if end > payload.len() {
            return Err(format_err(
                path,
                format!("tensor {} extends past end of payload", entry.name),
            ));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| format_err(path, format!("tensor {}: {e}", entry.name)))?;
        params.set(&entry.name, tensor);
    }
    Ok(Checkpoint { header, params })
}

/// SHA-256 of the checkpoint file, hex encoded. Used to link sd
/// checkpoints to their parent and to identify ensemble members.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Rounds every parameter through f32, matching what a save/load cycle
/// produces. Training quantizes before writing artifacts so that resumed
/// and freshly trained states agree bit for bit.
pub fn quantize_params(params: &mut ParamStore) {
    for (_, tensor) in params.iter_mut() {
        for v in tensor.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
