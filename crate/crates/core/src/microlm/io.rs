//! Binary model and weight-delta files.
//!
//! Both share one framing:
//!
//! ```text
//! magic        8 bytes   b"PEAKLM\0\x01" (model) or b"PEAKDW\0\x01" (delta)
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 LE values, row-major, tensors in canonical order
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! The model header is `{"format", "version", "config", "tensors": [{name,
//! len}], "provenance": {..}}`. A delta header is `{"format", "version",
//! "base_checksum", "weight", "rows", "cols", "provenance"}` and its payload
//! is the full replacement matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{tensor_names, Matrix, ModelConfig, ModelParams, WeightId};
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"PEAKLM\0\x01";
const DELTA_MAGIC: &[u8; 8] = b"PEAKDW\0\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeltaHeader {
    format: String,
    version: u32,
    base_checksum: String,
    weight: WeightId,
    rows: usize,
    cols: usize,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

/// A model snapshot plus free-form provenance (training seed, corpus hash).
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub params: ModelParams,
    pub provenance: BTreeMap<String, String>,
}

/// One replaced weight matrix relative to a base snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub base_checksum: String,
    pub weight: WeightId,
    pub value: Matrix,
    pub provenance: BTreeMap<String, String>,
}

impl WeightDelta {
    /// Reconstructs the edited snapshot. Fails when `base` is not the model the
    /// delta was produced from.
    pub fn apply(&self, base: &ModelParams) -> Result<ModelParams> {
        let sum = base.checksum();
        if sum != self.base_checksum {
            return Err(Error::Validation(format!(
                "delta was made against base {}, got {}",
                self.base_checksum, sum
            )));
        }
        base.with_weight(self.weight, self.value.clone())
    }
}

fn frame(magic: &[u8; 8], header: &[u8], payload: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Checks magic and checksum; returns `(header bytes, payload values)`.
fn unframe<'a>(path: &Path, magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], Vec<f64>)> {
    let corrupt = |detail: &str| Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 + 8 + 32 {
        return Err(corrupt("file is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &body[16..];
    if header_len > rest.len() {
        return Err(corrupt("header length exceeds file"));
    }
    let (header, payload) = rest.split_at(header_len);
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn model_bytes(params: &ModelParams, provenance: &BTreeMap<String, String>) -> Vec<u8> {
    let names = tensor_names(params.config.n_layers);
    let tensors = params.tensors();
    let header = ModelHeader {
        format: "peaklab-model".into(),
        version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors: names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
        provenance: provenance.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    frame(MODEL_MAGIC, &header, tensors.into_iter().flat_map(|t| t.iter().copied()))
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    save_model_with(params, &BTreeMap::new(), path)
}

pub fn save_model_with(params: &ModelParams, provenance: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &model_bytes(params, provenance))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    load_model_file(path).map(|f| f.params)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (header, values) = unframe(path, MODEL_MAGIC, &bytes)?;
    let header: ModelHeader = serde_json::from_slice(header).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: format!("header: {e}"),
    })?;
    if header.format != "peaklab-model" || header.version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported model format {} v{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let mut params = super::params::init_shape(&header.config);
    let names = tensor_names(header.config.n_layers);
    let expected: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let declared_ok = header.tensors.len() == expected.len()
        && header
            .tensors
            .iter()
            .zip(&expected)
            .zip(&names)
            .all(|((e, &n), name)| e.len == n && &e.name == name);
    if !declared_ok || values.len() != expected.iter().sum::<usize>() {
        return Err(Error::Validation(format!(
            "{}: tensor layout does not match the declared config",
            path.display()
        )));
    }
    let mut offset = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    if !params.all_finite() {
        return Err(Error::Validation(format!("{}: non-finite weights", path.display())));
    }
    Ok(ModelFile {
        params,
        provenance: header.provenance,
    })
}

/// Loads a model and checks that it matches `expected`.
pub fn load_model_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_model(path.as_ref())?;
    if &params.config != expected {
        return Err(Error::Validation(format!(
            "{}: model config {:?} does not match expected {:?}",
            path.as_ref().display(),
            params.config,
            expected
        )));
    }
    Ok(params)
}

pub fn delta_bytes(delta: &WeightDelta) -> Vec<u8> {
    let header = DeltaHeader {
        format: "peaklab-delta".into(),
        version: FORMAT_VERSION,
        base_checksum: delta.base_checksum.clone(),
        weight: delta.weight,
        rows: delta.value.rows,
        cols: delta.value.cols,
        provenance: delta.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    frame(DELTA_MAGIC, &header, delta.value.data.iter().copied())
}

pub fn save_delta(delta: &WeightDelta, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &delta_bytes(delta))
}

pub fn load_delta(path: impl AsRef<Path>) -> Result<WeightDelta> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (header, values) = unframe(path, DELTA_MAGIC, &bytes)?;
    let header: DeltaHeader = serde_json::from_slice(header).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: format!("header: {e}"),
    })?;
    if header.format != "peaklab-delta" || header.version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported delta format {} v{}",
            header.format, header.version
        )));
    }
    let value = Matrix::from_vec(header.rows, header.cols, values)
        .map_err(|_| Error::Validation(format!("{}: payload does not match declared shape", path.display())))?;
    Ok(WeightDelta {
        base_checksum: header.base_checksum,
        weight: header.weight,
        value,
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::params::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 6,
            max_seq_len: 5,
            seed: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = init_model(&cfg()).unwrap();
        let mut prov = BTreeMap::new();
        prov.insert("train_seed".to_string(), "7".to_string());
        save_model_with(&m, &prov, &p).unwrap();
        let back = load_model_file(&p).unwrap();
        assert_eq!(back.params.checksum(), m.checksum());
        assert_eq!(back.params, m);
        assert_eq!(back.provenance, prov);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = init_model(&cfg()).unwrap();
        save_model(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&init_model(&cfg()).unwrap(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn declared_config_must_match_payload() {
        // Re-frame a valid payload under a header that claims a wider model;
        // the checksum is valid, so only layout validation can catch it.
        let m = init_model(&cfg()).unwrap();
        let mut lying = m.config.clone();
        lying.d_model = 8;
        let names = tensor_names(1);
        let header = ModelHeader {
            format: "peaklab-model".into(),
            version: FORMAT_VERSION,
            config: lying,
            tensors: names
                .into_iter()
                .zip(m.tensors())
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
            provenance: BTreeMap::new(),
        };
        let bytes = frame(
            MODEL_MAGIC,
            &serde_json::to_vec(&header).unwrap(),
            m.tensors().into_iter().flat_map(|t| t.iter().copied()),
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn expecting_other_config_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&init_model(&cfg()).unwrap(), &p).unwrap();
        let other = ModelConfig { seed: 99, ..cfg() };
        assert!(matches!(load_model_expecting(&p, &other), Err(Error::Validation(_))));
        assert!(load_model_expecting(&p, &cfg()).is_ok());
    }

    #[test]
    fn delta_round_trip_and_base_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let m = init_model(&cfg()).unwrap();
        let mut w = m.weight(WeightId::MlpProj(0)).unwrap().clone();
        w.data[0] = 1.5;
        let delta = WeightDelta {
            base_checksum: m.checksum(),
            weight: WeightId::MlpProj(0),
            value: w,
            provenance: BTreeMap::new(),
        };
        save_delta(&delta, &p).unwrap();
        let back = load_delta(&p).unwrap();
        assert_eq!(back, delta);
        let edited = back.apply(&m).unwrap();
        assert_eq!(edited.layers[0].w_proj.data[0], 1.5);
        let other = init_model(&ModelConfig { seed: 5, ..cfg() }).unwrap();
        assert!(back.apply(&other).is_err());
    }
}
