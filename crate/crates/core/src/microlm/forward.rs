use serde::{Deserialize, Serialize};

use super::math::{self, dot, gelu, log_softmax_in_place};
use super::params::{ModelParams, Token};
use crate::error::{Error, Result};

/// Where an activation patch is applied: the MLP output of `layer` at token
/// `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSite {
    pub layer: usize,
    pub position: usize,
}

/// A patch site together with the vector substituted for the MLP output.
#[derive(Debug, Clone, Copy)]
pub struct Patch<'a> {
    pub site: PatchSite,
    pub value: &'a [f64],
}

/// Cached activations of one decoder block for one sequence. All per-token
/// buffers are row-major `seq_len × width`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the block (`h` of the previous layer).
    pub input: Vec<f64>,
    pub(crate) ln_attn_hat: Vec<f64>,
    pub(crate) ln_attn_rstd: Vec<f64>,
    pub(crate) ln_attn_out: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Attention probabilities, `n_heads × seq_len × seq_len`, causal.
    pub(crate) att: Vec<f64>,
    pub(crate) mix: Vec<f64>,
    /// Attention output `a` added to the residual stream.
    pub attn_out: Vec<f64>,
    /// Residual stream after attention, `h + a`.
    pub mid: Vec<f64>,
    pub(crate) ln_mlp_hat: Vec<f64>,
    pub(crate) ln_mlp_rstd: Vec<f64>,
    /// MLP input after layer norm.
    pub mlp_in: Vec<f64>,
    pub(crate) pre_act: Vec<f64>,
    /// Activation after `W_fc` and GELU; `seq_len × d_ff`. These are the keys.
    pub key: Vec<f64>,
    /// MLP output `m` (the patched value at a patched site).
    pub mlp_out: Vec<f64>,
    /// Residual stream leaving the block.
    pub output: Vec<f64>,
}

/// All activations of one forward pass.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    pub tokens: Vec<Token>,
    pub layers: Vec<LayerTrace>,
    pub(crate) final_hat: Vec<f64>,
    pub(crate) final_rstd: Vec<f64>,
    pub(crate) final_out: Vec<f64>,
    pub patch: Option<PatchSite>,
    /// Positions for which the output head was evaluated.
    pub head_positions: Vec<usize>,
    /// Next-token log-probabilities, one row per entry of `head_positions`.
    pub log_probs: Vec<Vec<f64>>,
}

impl HiddenTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Key vector (post-activation MLP hidden) at `layer`, `position`.
    pub fn key_at(&self, layer: usize, position: usize) -> &[f64] {
        let lt = &self.layers[layer];
        let d_ff = lt.key.len() / self.tokens.len();
        &lt.key[position * d_ff..(position + 1) * d_ff]
    }

    /// MLP output at `layer`, `position`.
    pub fn mlp_out_at(&self, layer: usize, position: usize) -> &[f64] {
        let lt = &self.layers[layer];
        let d = lt.mlp_out.len() / self.tokens.len();
        &lt.mlp_out[position * d..(position + 1) * d]
    }

    pub fn log_probs_at(&self, position: usize) -> Option<&[f64]> {
        self.head_positions
            .iter()
            .position(|&p| p == position)
            .map(|i| &self.log_probs[i][..])
    }
}

/// Which rows of the output head to evaluate.
#[derive(Debug, Clone)]
pub(crate) enum Heads {
    All,
    At(Vec<usize>),
    None,
}

pub(crate) fn validate_tokens(params: &ModelParams, tokens: &[Token]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Input("token sequence is empty".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} is outside the vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn validate_patch(params: &ModelParams, len: usize, patch: &Patch<'_>) -> Result<()> {
    let cfg = &params.config;
    if patch.site.layer >= cfg.n_layers {
        return Err(Error::Input(format!(
            "patch layer {} out of range ({} layers)",
            patch.site.layer, cfg.n_layers
        )));
    }
    if patch.site.position >= len {
        return Err(Error::Input(format!(
            "patch position {} out of range for a {len}-token sequence",
            patch.site.position
        )));
    }
    if patch.value.len() != cfg.d_model {
        return Err(Error::Input(format!(
            "patch vector has length {}, expected d_model = {}",
            patch.value.len(),
            cfg.d_model
        )));
    }
    Ok(())
}

pub(crate) fn run(
    params: &ModelParams,
    tokens: &[Token],
    patch: Option<Patch<'_>>,
    heads: Heads,
) -> Result<HiddenTrace> {
    validate_tokens(params, tokens)?;
    let t_len = tokens.len();
    if let Some(p) = &patch {
        validate_patch(params, t_len, p)?;
    }
    let cfg = &params.config;
    let d = cfg.d_model;

    let mut h = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = params.tok_emb.row(tok as usize);
        let p = params.pos_emb.row(t);
        for j in 0..d {
            h[t * d + j] = e[j] + p[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let patch_here = patch.filter(|p| p.site.layer == l);
        let lt = layer_forward(params, lp, h, patch_here);
        h = lt.output.clone();
        layers.push(lt);
    }

    let mut final_hat = vec![0.0; t_len * d];
    let mut final_out = vec![0.0; t_len * d];
    let mut final_rstd = vec![0.0; t_len];
    for t in 0..t_len {
        final_rstd[t] = math::layer_norm(
            &h[t * d..(t + 1) * d],
            &params.ln_final.gain,
            &params.ln_final.bias,
            &mut final_hat[t * d..(t + 1) * d],
            &mut final_out[t * d..(t + 1) * d],
        );
    }

    let head_positions: Vec<usize> = match heads {
        Heads::All => (0..t_len).collect(),
        Heads::At(ps) => ps,
        Heads::None => Vec::new(),
    };
    let mut log_probs = Vec::with_capacity(head_positions.len());
    for &t in &head_positions {
        if t >= t_len {
            return Err(Error::Input(format!("head position {t} out of range")));
        }
        let mut logits = params.tok_emb.mul_vec(&final_out[t * d..(t + 1) * d]);
        log_softmax_in_place(&mut logits);
        log_probs.push(logits);
    }

    Ok(HiddenTrace {
        tokens: tokens.to_vec(),
        layers,
        final_hat,
        final_rstd,
        final_out,
        patch: patch.map(|p| p.site),
        head_positions,
        log_probs,
    })
}

fn layer_forward(params: &ModelParams, lp: &super::params::LayerParams, input: Vec<f64>, patch: Option<Patch<'_>>) -> LayerTrace {
    let cfg = &params.config;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let t_len = input.len() / d;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut ln_attn_hat = vec![0.0; t_len * d];
    let mut ln_attn_out = vec![0.0; t_len * d];
    let mut ln_attn_rstd = vec![0.0; t_len];
    let mut q = vec![0.0; t_len * d];
    let mut k = vec![0.0; t_len * d];
    let mut v = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = t * d..(t + 1) * d;
        ln_attn_rstd[t] = math::layer_norm(
            &input[row.clone()],
            &lp.ln_attn.gain,
            &lp.ln_attn.bias,
            &mut ln_attn_hat[row.clone()],
            &mut ln_attn_out[row.clone()],
        );
        let x = &ln_attn_out[row.clone()];
        math::matvec(&lp.w_q.data, d, d, x, &mut q[row.clone()]);
        math::matvec(&lp.w_k.data, d, d, x, &mut k[row.clone()]);
        math::matvec(&lp.w_v.data, d, d, x, &mut v[row]);
    }

    let mut att = vec![0.0; n_heads * t_len * t_len];
    let mut mix = vec![0.0; t_len * d];
    for hh in 0..n_heads {
        let c0 = hh * hd;
        for t in 0..t_len {
            let base = (hh * t_len + t) * t_len;
            let qt = &q[t * d + c0..t * d + c0 + hd];
            let mut max = f64::NEG_INFINITY;
            for u in 0..=t {
                let s = dot(qt, &k[u * d + c0..u * d + c0 + hd]) * scale;
                att[base + u] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for u in 0..=t {
                let e = (att[base + u] - max).exp();
                att[base + u] = e;
                sum += e;
            }
            for u in 0..=t {
                att[base + u] /= sum;
                let p = att[base + u];
                for j in 0..hd {
                    mix[t * d + c0 + j] += p * v[u * d + c0 + j];
                }
            }
        }
    }

    let mut attn_out = vec![0.0; t_len * d];
    let mut mid = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = t * d..(t + 1) * d;
        math::matvec(&lp.w_o.data, d, d, &mix[row.clone()], &mut attn_out[row.clone()]);
        for j in row {
            mid[j] = input[j] + attn_out[j];
        }
    }

    let mut ln_mlp_hat = vec![0.0; t_len * d];
    let mut mlp_in = vec![0.0; t_len * d];
    let mut ln_mlp_rstd = vec![0.0; t_len];
    let mut pre_act = vec![0.0; t_len * d_ff];
    let mut key = vec![0.0; t_len * d_ff];
    let mut mlp_out = vec![0.0; t_len * d];
    let mut output = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = t * d..(t + 1) * d;
        let frow = t * d_ff..(t + 1) * d_ff;
        ln_mlp_rstd[t] = math::layer_norm(
            &mid[row.clone()],
            &lp.ln_mlp.gain,
            &lp.ln_mlp.bias,
            &mut ln_mlp_hat[row.clone()],
            &mut mlp_in[row.clone()],
        );
        math::matvec(&lp.w_fc.data, d_ff, d, &mlp_in[row.clone()], &mut pre_act[frow.clone()]);
        for j in frow.clone() {
            key[j] = gelu(pre_act[j]);
        }
        match patch {
            Some(p) if p.site.position == t => mlp_out[row.clone()].copy_from_slice(p.value),
            _ => math::matvec(&lp.w_proj.data, d, d_ff, &key[frow], &mut mlp_out[row.clone()]),
        }
        for j in row {
            output[j] = mid[j] + mlp_out[j];
        }
    }

    LayerTrace {
        input,
        ln_attn_hat,
        ln_attn_rstd,
        ln_attn_out,
        q,
        k,
        v,
        att,
        mix,
        attn_out,
        mid,
        ln_mlp_hat,
        ln_mlp_rstd,
        mlp_in,
        pre_act,
        key,
        mlp_out,
        output,
    }
}

/// Full forward pass: next-token distribution at every position plus the
/// activation trace.
pub fn forward(params: &ModelParams, tokens: &[Token]) -> Result<(Vec<Vec<f64>>, HiddenTrace)> {
    let trace = run(params, tokens, None, Heads::All)?;
    let dists = trace
        .log_probs
        .iter()
        .map(|row| row.iter().map(|lp| lp.exp()).collect())
        .collect();
    Ok((dists, trace))
}

/// Forward pass with an activation patch, returning the trace only.
pub fn forward_patched(params: &ModelParams, tokens: &[Token], patch: Option<Patch<'_>>) -> Result<HiddenTrace> {
    run(params, tokens, patch, Heads::All)
}

/// Concatenates prompt and answer and lists the head positions that predict
/// each answer token.
pub(crate) fn teacher_forced(prompt: &[Token], answer: &[Token]) -> (Vec<Token>, Vec<usize>) {
    let mut seq = Vec::with_capacity(prompt.len() + answer.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(answer);
    let positions = (0..answer.len()).map(|j| prompt.len() + j - 1).collect();
    (seq, positions)
}

/// Length-normalized answer log-probability,
/// `(1/|a|) Σ_t log P(a_t | prompt, a_<t)`, optionally under a patch.
pub fn answer_logprob(params: &ModelParams, prompt: &[Token], answer: &[Token], patch: Option<Patch<'_>>) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::Input("answer is empty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    if let Some(p) = &patch {
        if p.site.position >= prompt.len() {
            return Err(Error::Input(format!(
                "patch position {} is not inside the {}-token prompt",
                p.site.position,
                prompt.len()
            )));
        }
    }
    let (seq, positions) = teacher_forced(prompt, answer);
    let trace = run(params, &seq, patch, Heads::At(positions))?;
    Ok(sequence_logprob(&trace, answer))
}

pub(crate) fn sequence_logprob(trace: &HiddenTrace, answer: &[Token]) -> f64 {
    let total: f64 = trace
        .log_probs
        .iter()
        .zip(answer)
        .map(|(row, &a)| row[a as usize])
        .sum();
    total / answer.len() as f64
}

/// Length-normalized log-probabilities of several answers to one prompt.
/// Single-token answers share a single forward pass over the prompt.
pub fn answer_logprobs(params: &ModelParams, prompt: &[Token], answers: &[Vec<Token>]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let mut next: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(answers.len());
    for answer in answers {
        match answer.as_slice() {
            [] => return Err(Error::Input("answer is empty".into())),
            [tok] => {
                if next.is_none() {
                    let mut trace = run(params, prompt, None, Heads::At(vec![prompt.len() - 1]))?;
                    next = trace.log_probs.pop();
                }
                let row = next.as_ref().expect("computed above");
                let lp = row.get(*tok as usize).ok_or_else(|| {
                    Error::Input(format!("token id {tok} is outside the vocabulary of size {}", row.len()))
                })?;
                out.push(*lp);
            }
            _ => out.push(answer_logprob(params, prompt, answer, None)?),
        }
    }
    Ok(out)
}

/// Forward pass that keeps the activation trace but skips the output head.
pub fn hidden_states(params: &ModelParams, tokens: &[Token]) -> Result<HiddenTrace> {
    run(params, tokens, None, Heads::None)
}

/// `exp(answer_logprob)`: the geometric mean of the per-token probabilities.
pub fn answer_probability(params: &ModelParams, prompt: &[Token], answer: &[Token]) -> Result<f64> {
    answer_logprob(params, prompt, answer, None).map(f64::exp)
}
