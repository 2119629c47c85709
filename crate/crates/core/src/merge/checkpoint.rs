use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MergeError;
use crate::numerics::Tensor;
use crate::policy::{ModelConfig, PolicyParams};

pub const FORMAT_VERSION: u64 = 1;
const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub config: ModelConfig,
    pub config_fingerprint: String,
    pub tensors: Vec<TensorEntry>,
}

/// Rounds every parameter to the nearest f32, the precision checkpoints
/// store.
pub fn round_to_f32(params: &PolicyParams) -> PolicyParams {
    let tensors = params
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|&v| v as f32 as f64).collect();
            Tensor::new(t.shape().to_vec(), data).expect("rounding a finite tensor keeps its shape")
        })
        .collect();
    params.with_tensors(tensors).expect("rounding keeps names and shapes")
}

/// Serializes to the checkpoint byte layout.
pub fn encode_checkpoint(params: &PolicyParams) -> Result<Vec<u8>, MergeError> {
    let mut entries = Vec::with_capacity(params.names().len());
    let mut payload = Vec::with_capacity(params.num_params() * 4);
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(MergeError::Config(format!("tensor {name} overflows f32")));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        config_fingerprint: params.config().fingerprint(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| MergeError::CorruptManifest(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams, MergeError> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| MergeError::CorruptManifest("file shorter than the length header".into()))?;
    let manifest_len = usize::try_from(u64::from_le_bytes(header))
        .map_err(|_| MergeError::CorruptManifest("manifest length does not fit in memory".into()))?;
    let manifest_end = 8usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| MergeError::CorruptManifest(format!("manifest of {manifest_len} bytes runs past end of file")))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[8..manifest_end]).map_err(|e| MergeError::CorruptManifest(e.to_string()))?;
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(MergeError::UnsupportedVersion(v)),
        None => return Err(MergeError::CorruptManifest("missing format_version".into())),
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| MergeError::CorruptManifest(e.to_string()))?;
    let fp = manifest.config.fingerprint();
    if fp != manifest.config_fingerprint {
        return Err(MergeError::FingerprintMismatch { expected: manifest.config_fingerprint, found: fp });
    }

    let payload = &bytes[manifest_end..];
    let mut cursor = 0u64;
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(MergeError::CorruptManifest(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel as u64 * 4 {
            return Err(MergeError::Layout(format!("tensor {} has length {} for shape {:?}", e.name, e.length, e.shape)));
        }
        if e.offset < cursor {
            return Err(MergeError::Overlap { name: e.name.clone() });
        }
        if e.offset > cursor {
            return Err(MergeError::Layout(format!("gap before tensor {}", e.name)));
        }
        cursor += e.length;
    }
    let actual = payload.len() as u64;
    if actual < cursor {
        return Err(MergeError::Truncated { expected: cursor, actual });
    }
    if actual > cursor {
        return Err(MergeError::TrailingBytes { expected: cursor, actual });
    }

    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let data: Vec<f64> = payload[start..start + e.length as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| MergeError::Layout(format!("tensor {}: {err}", e.name)))?;
        named.push((e.name.clone(), t));
    }
    PolicyParams::from_tensors(manifest.config, named).map_err(|e| MergeError::Incompatible(e.to_string()))
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), MergeError> {
    let bytes = encode_checkpoint(params)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, MergeError> {
    let bytes = fs::read(path).map_err(|e| MergeError::io(path, &e))?;
    decode_checkpoint(&bytes)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MergeError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| MergeError::io(tmp, &e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| MergeError::io(tmp, &e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| MergeError::io(path, &e))
}
