use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Token = u32;

/// Architecture and seed of a micro model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) is not divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds the token id range".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Row-major dense matrix; `y = W x` maps `cols` inputs to `rows` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        super::math::matvec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNorm {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// One pre-norm decoder block. Attention projections are `d_model × d_model`;
/// `w_fc` is `d_ff × d_model` and `w_proj` is `d_model × d_ff`, both applied
/// as `y = W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln_attn: LayerNorm,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_mlp: LayerNorm,
    pub w_fc: Matrix,
    pub w_proj: Matrix,
}

/// Names a single weight matrix of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "matrix", content = "layer", rename_all = "snake_case")]
pub enum WeightId {
    AttnQ(usize),
    AttnK(usize),
    AttnV(usize),
    AttnO(usize),
    MlpFc(usize),
    MlpProj(usize),
}

impl WeightId {
    pub fn layer(self) -> usize {
        match self {
            WeightId::AttnQ(l)
            | WeightId::AttnK(l)
            | WeightId::AttnV(l)
            | WeightId::AttnO(l)
            | WeightId::MlpFc(l)
            | WeightId::MlpProj(l) => l,
        }
    }
}

/// Snapshot of every weight of a micro model. The output head is tied to
/// `tok_emb`.
///
/// Edits never mutate a snapshot in place; they clone and replace.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub ln_final: LayerNorm,
}

const INIT_STD: f64 = 0.02;

pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let tok_emb = Matrix::random(config.vocab_size, d, INIT_STD, &mut rng);
    let pos_emb = Matrix::random(config.max_seq_len, d, INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln_attn: LayerNorm::identity(d),
            w_q: Matrix::random(d, d, INIT_STD, &mut rng),
            w_k: Matrix::random(d, d, INIT_STD, &mut rng),
            w_v: Matrix::random(d, d, INIT_STD, &mut rng),
            w_o: Matrix::random(d, d, resid_std, &mut rng),
            ln_mlp: LayerNorm::identity(d),
            w_fc: Matrix::random(config.d_ff, d, INIT_STD, &mut rng),
            w_proj: Matrix::random(d, config.d_ff, resid_std, &mut rng),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        ln_final: LayerNorm::identity(d),
    })
}

impl ModelParams {
    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        init_shape(&self.config)
    }

    pub fn weight(&self, id: WeightId) -> Result<&Matrix> {
        let layer = self
            .layers
            .get(id.layer())
            .ok_or_else(|| Error::Input(format!("layer {} out of range", id.layer())))?;
        Ok(match id {
            WeightId::AttnQ(_) => &layer.w_q,
            WeightId::AttnK(_) => &layer.w_k,
            WeightId::AttnV(_) => &layer.w_v,
            WeightId::AttnO(_) => &layer.w_o,
            WeightId::MlpFc(_) => &layer.w_fc,
            WeightId::MlpProj(_) => &layer.w_proj,
        })
    }

    pub fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix> {
        let n = self.layers.len();
        let layer = self
            .layers
            .get_mut(id.layer())
            .ok_or_else(|| Error::Input(format!("layer {} out of range ({n} layers)", id.layer())))?;
        Ok(match id {
            WeightId::AttnQ(_) => &mut layer.w_q,
            WeightId::AttnK(_) => &mut layer.w_k,
            WeightId::AttnV(_) => &mut layer.w_v,
            WeightId::AttnO(_) => &mut layer.w_o,
            WeightId::MlpFc(_) => &mut layer.w_fc,
            WeightId::MlpProj(_) => &mut layer.w_proj,
        })
    }

    /// New snapshot with one matrix replaced.
    pub fn with_weight(&self, id: WeightId, value: Matrix) -> Result<ModelParams> {
        let current = self.weight(id)?;
        if current.rows != value.rows || current.cols != value.cols {
            return Err(Error::Input(format!(
                "replacement for {id:?} is {}x{}, expected {}x{}",
                value.rows, value.cols, current.rows, current.cols
            )));
        }
        let mut next = self.clone();
        *next.weight_mut(id)? = value;
        Ok(next)
    }

    /// Every tensor in a fixed canonical order. The order defines the model
    /// file layout and the checksum.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.tok_emb.data, &self.pos_emb.data];
        for l in &self.layers {
            out.extend([
                &l.ln_attn.gain[..],
                &l.ln_attn.bias[..],
                &l.w_q.data[..],
                &l.w_k.data[..],
                &l.w_v.data[..],
                &l.w_o.data[..],
                &l.ln_mlp.gain[..],
                &l.ln_mlp.bias[..],
                &l.w_fc.data[..],
                &l.w_proj.data[..],
            ]);
        }
        out.push(&self.ln_final.gain);
        out.push(&self.ln_final.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln_attn.gain[..],
                &mut l.ln_attn.bias[..],
                &mut l.w_q.data[..],
                &mut l.w_k.data[..],
                &mut l.w_v.data[..],
                &mut l.w_o.data[..],
                &mut l.ln_mlp.gain[..],
                &mut l.ln_mlp.bias[..],
                &mut l.w_fc.data[..],
                &mut l.w_proj.data[..],
            ]);
        }
        out.push(&mut self.ln_final.gain);
        out.push(&mut self.ln_final.bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the config and the little-endian bytes of every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Identifiers of every weight matrix that differs bitwise from `other`.
    pub fn changed_weights(&self, other: &ModelParams) -> Vec<String> {
        let names = tensor_names(self.config.n_layers);
        self.tensors()
            .iter()
            .zip(other.tensors())
            .zip(names)
            .filter(|((a, b), _)| {
                a.len() != b.len() || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .map(|(_, name)| name)
            .collect()
    }
}

/// All-zero parameters with the shapes implied by `config`.
pub(crate) fn init_shape(c: &ModelConfig) -> ModelParams {
    let d = c.d_model;
    ModelParams {
        config: c.clone(),
        tok_emb: Matrix::zeros(c.vocab_size, d),
        pos_emb: Matrix::zeros(c.max_seq_len, d),
        layers: (0..c.n_layers)
            .map(|_| LayerParams {
                ln_attn: LayerNorm::zeros(d),
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
                w_o: Matrix::zeros(d, d),
                ln_mlp: LayerNorm::zeros(d),
                w_fc: Matrix::zeros(c.d_ff, d),
                w_proj: Matrix::zeros(d, c.d_ff),
            })
            .collect(),
        ln_final: LayerNorm::zeros(d),
    }
}

pub(crate) fn tensor_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for l in 0..n_layers {
        for part in [
            "ln_attn.gain",
            "ln_attn.bias",
            "w_q",
            "w_k",
            "w_v",
            "w_o",
            "ln_mlp.gain",
            "ln_mlp.bias",
            "w_fc",
            "w_proj",
        ] {
            names.push(format!("layers.{l}.{part}"));
        }
    }
    names.push("ln_final.gain".into());
    names.push("ln_final.bias".into());
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 1,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn seed_changes_weights() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&ModelConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 12,
            n_heads: 5,
            ..small()
        };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = ModelConfig { d_ff: 0, ..small() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn with_weight_touches_one_matrix() {
        let a = init_model(&small()).unwrap();
        let mut w = a.weight(WeightId::MlpProj(1)).unwrap().clone();
        w.data[3] += 1.0;
        let b = a.with_weight(WeightId::MlpProj(1), w).unwrap();
        assert_eq!(b.changed_weights(&a), vec!["layers.1.w_proj".to_string()]);
        assert!(a.with_weight(WeightId::MlpProj(1), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn tensor_names_align_with_tensors() {
        let a = init_model(&small()).unwrap();
        assert_eq!(a.tensors().len(), tensor_names(2).len());
    }
}
