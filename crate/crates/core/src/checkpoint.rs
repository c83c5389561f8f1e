//! Checkpoint container: magic, length-prefixed JSON header, raw
//! little-endian f32 blobs.
//!
//! Layout: `SIMUK1` | u32 LE header length | header JSON | tensor data.
//! Manifest offsets are relative to the start of the data section and must
//! be contiguous, non-overlapping and in bounds. A vocabulary fingerprint
//! mismatch at load time is a hard error.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Arch, ModelError, SeqModel};
use crate::params::Params;
use crate::pervasive::{PaConfig, PaModel};
use crate::tensor::{Real, Tensor};
use crate::transformer::{TransformerConfig, TransformerModel};

pub const MAGIC: &[u8; 6] = b"SIMUK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CkptError {
    Io { path: String, source: std::io::Error },
    BadMagic,
    BadHeader(String),
    Manifest(String),
    FingerprintMismatch { expected: String, found: String },
    Model(ModelError),
}

impl fmt::Display for CkptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CkptError::Io { path, source } => write!(f, "{path}: {source}"),
            CkptError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CkptError::BadHeader(msg) => write!(f, "bad checkpoint header: {msg}"),
            CkptError::Manifest(msg) => write!(f, "bad tensor manifest: {msg}"),
            CkptError::FingerprintMismatch { expected, found } => write!(
                f,
                "vocabulary fingerprint mismatch: checkpoint has {found}, expected {expected}"
            ),
            CkptError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CkptError {}

impl From<ModelError> for CkptError {
    fn from(e: ModelError) -> Self {
        CkptError::Model(e)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: Arch,
    config: serde_json::Value,
    vocab_fingerprint: String,
    src_eos: bool,
    tensors: Vec<TensorEntry>,
}

pub fn save<F: Real>(
    path: &Path,
    model: &SeqModel<F>,
    vocab_fingerprint: &str,
    src_eos: bool,
) -> Result<(), CkptError> {
    let config = match model {
        SeqModel::Tf(m) => serde_json::to_value(&m.cfg).expect("config serialization"),
        SeqModel::Pa(m) => serde_json::to_value(&m.cfg).expect("config serialization"),
    };
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::with_capacity(model.params().total_values() * 4);
    for (name, tensor) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            dims: tensor.dims().to_vec(),
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: model.arch(),
        config,
        vocab_fingerprint: vocab_fingerprint.to_string(),
        src_eos,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub struct LoadedCheckpoint<F: Real> {
    pub model: SeqModel<F>,
    pub vocab_fingerprint: String,
    pub src_eos: bool,
}

pub fn load<F: Real>(
    path: &Path,
    expect_fingerprint: Option<&str>,
) -> Result<LoadedCheckpoint<F>, CkptError> {
    let bytes = fs::read(path).map_err(|e| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_end = 10 + hlen;
    if bytes.len() < header_end {
        return Err(CkptError::BadHeader("truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[10..header_end])
        .map_err(|e| CkptError::BadHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CkptError::BadHeader(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if let Some(expected) = expect_fingerprint {
        if expected != header.vocab_fingerprint {
            return Err(CkptError::FingerprintMismatch {
                expected: expected.to_string(),
                found: header.vocab_fingerprint.clone(),
            });
        }
    }
    let blob = &bytes[header_end..];
    let mut params = Params::new();
    let mut cursor = 0u64;
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(CkptError::Manifest(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if entry.offset != cursor {
            return Err(CkptError::Manifest(format!(
                "{}: offset {} overlaps or leaves a gap (expected {})",
                entry.name, entry.offset, cursor
            )));
        }
        let count: usize = entry.dims.iter().product();
        let nbytes = count * 4;
        let start = entry.offset as usize;
        if start + nbytes > blob.len() {
            return Err(CkptError::Manifest(format!(
                "{}: data out of bounds",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..start + nbytes].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            data.push(F::of(v as f64));
        }
        params.insert(entry.name.clone(), Tensor::new(entry.dims.clone(), data).unwrap());
        cursor += nbytes as u64;
    }
    if cursor as usize != blob.len() {
        return Err(CkptError::Manifest(format!(
            "trailing bytes: manifest covers {cursor} of {}",
            blob.len()
        )));
    }
    let model = match header.arch {
        Arch::Transformer => {
            let cfg: TransformerConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| CkptError::BadHeader(e.to_string()))?;
            validate_schema(&params, &reference_manifest_tf(&cfg)?)?;
            SeqModel::Tf(TransformerModel::from_parts(cfg, params)?)
        }
        Arch::Pa => {
            let cfg: PaConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| CkptError::BadHeader(e.to_string()))?;
            validate_schema(&params, &reference_manifest_pa(&cfg)?)?;
            SeqModel::Pa(PaModel::from_parts(cfg, params)?)
        }
    };
    Ok(LoadedCheckpoint {
        model,
        vocab_fingerprint: header.vocab_fingerprint,
        src_eos: header.src_eos,
    })
}

fn reference_manifest_tf(cfg: &TransformerConfig) -> Result<Vec<(String, Vec<usize>)>, CkptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference: TransformerModel<f32> = TransformerModel::new(cfg.clone(), &mut rng)?;
    Ok(manifest_of(&reference.params))
}

fn reference_manifest_pa(cfg: &PaConfig) -> Result<Vec<(String, Vec<usize>)>, CkptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference: PaModel<f32> = PaModel::new(cfg.clone(), &mut rng)?;
    Ok(manifest_of(&reference.params))
}

fn manifest_of<F: Real>(params: &Params<F>) -> Vec<(String, Vec<usize>)> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), t.dims().to_vec()))
        .collect()
}

/// The loaded tensor list must match the schema the config implies, name
/// for name, shape for shape, in order.
fn validate_schema<F: Real>(
    params: &Params<F>,
    expected: &[(String, Vec<usize>)],
) -> Result<(), CkptError> {
    let got = manifest_of(params);
    if got.len() != expected.len() {
        return Err(CkptError::Manifest(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((gn, gd), (en, ed)) in got.iter().zip(expected) {
        if gn != en || gd != ed {
            return Err(CkptError::Manifest(format!(
                "tensor {gn} {gd:?} does not match expected {en} {ed:?}"
            )));
        }
    }
    Ok(())
}
