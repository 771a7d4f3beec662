//! Self-describing binary container for trained pipelines.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `SEQCRF\0M` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `n` (`u64`) |
//! | n | JSON header: provenance, labels, extractor config, tap, array lengths |
//! | 8·m | `f64` arrays: extractor parameters, running statistics, CRF parameters, scaler mean, scaler inverse std |
//! | 32 | SHA-256 of everything above |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{CrfModel, LabelSet};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, ExtractorModel};
use crate::pipeline::{FeatureScaler, FeatureTap, Provenance, TrainedPipeline};

pub const MODEL_MAGIC: &[u8; 8] = b"SEQCRF\0M";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    provenance: Provenance,
    labels: LabelSet,
    extractor: ExtractorConfig,
    feature_tap: FeatureTap,
    crf_dim: usize,
    extractor_params: usize,
    extractor_buffers: usize,
    crf_params: usize,
    scaler_dim: Option<usize>,
}

pub fn encode_model(p: &TrainedPipeline) -> Vec<u8> {
    let scaler = p.scaler();
    let header = Header {
        provenance: p.provenance().clone(),
        labels: p.label_set().clone(),
        extractor: p.extractor().config().clone(),
        feature_tap: p.feature_tap(),
        crf_dim: p.crf().dim(),
        extractor_params: p.extractor().params().len(),
        extractor_buffers: p.extractor().buffers().len(),
        crf_params: p.crf().params().len(),
        scaler_dim: scaler.map(|s| s.mean.len()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = [p.extractor().params(), p.extractor().buffers(), p.crf().params()];
    let scaler_arrays = scaler.map(|s| [&s.mean[..], &s.inv_std[..]]);
    for a in arrays.iter().chain(scaler_arrays.iter().flatten()) {
        a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedPipeline> {
    let corrupt = |m: &str| Error::CorruptModel(m.to_string());
    if bytes.len() < MODEL_MAGIC.len() + 4 || &bytes[..8] != MODEL_MAGIC {
        return Err(corrupt("not a model file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(corrupt("file truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| corrupt("header truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::CorruptModel(format!("header: {e}")))?;
    let mut rest = &body[20 + header_len..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .filter(|l| *l <= rest.len())
            .ok_or_else(|| corrupt("arrays truncated"))?;
        let (head, tail) = rest.split_at(len);
        rest = tail;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let params = take(header.extractor_params)?;
    let buffers = take(header.extractor_buffers)?;
    let crf_params = take(header.crf_params)?;
    let scaler = match header.scaler_dim {
        Some(d) => Some(FeatureScaler {
            mean: take(d)?,
            inv_std: take(d)?,
        }),
        None => None,
    };
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes after arrays"));
    }
    let extractor = ExtractorModel::from_parts(header.extractor, params, buffers)?;
    let crf = CrfModel::from_params(header.labels, header.crf_dim, crf_params)?;
    TrainedPipeline::new(extractor, crf, header.feature_tap, scaler, header.provenance)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_model(pipeline: &TrainedPipeline, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(pipeline))
}

pub fn load_model(path: &Path) -> Result<TrainedPipeline> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
