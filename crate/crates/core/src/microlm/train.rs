use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, HeadSeed, Stop};
use super::forward::{run, Heads};
use super::params::{ModelParams, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Decay of the running second-moment estimate.
    pub second_moment_decay: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 100,
            second_moment_decay: 0.99,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.second_moment_decay) {
            return Err(Error::Config("second_moment_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Momentum-free adaptive step: each coordinate is scaled by the root of a
/// bias-corrected running mean of its squared gradient.
#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    decay: f64,
    epsilon: f64,
    step: i32,
    second: Vec<Vec<f64>>,
}

impl AdaptiveStep {
    pub fn new(shapes: &[usize], decay: f64, epsilon: f64) -> Self {
        AdaptiveStep {
            decay,
            epsilon,
            step: 0,
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn apply(&mut self, values: Vec<&mut [f64]>, grads: Vec<&[f64]>, rate: f64) {
        self.step += 1;
        let correction = 1.0 - self.decay.powi(self.step);
        for ((vals, g), s) in values.into_iter().zip(grads).zip(&mut self.second) {
            for i in 0..vals.len() {
                s[i] = self.decay * s[i] + (1.0 - self.decay) * g[i] * g[i];
                let denom = (s[i] / correction).sqrt() + self.epsilon;
                vals[i] -= rate * g[i] / denom;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss per step.
    pub batch_losses: Vec<f64>,
}

/// Mean next-token cross-entropy over every predicted position of `corpus`.
pub fn corpus_loss(params: &ModelParams, corpus: &[Vec<Token>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        let (loss, n, _) = sequence_loss(params, seq, false)?;
        total += loss;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("corpus has no predictable tokens".into()));
    }
    Ok(total / count as f64)
}

/// Summed cross-entropy of one sequence, the number of predicted tokens, and
/// optionally the logit seeds for the backward pass (scaled by 1, not
/// normalized).
fn sequence_loss(params: &ModelParams, seq: &[Token], with_seeds: bool) -> Result<(f64, usize, Option<(super::forward::HiddenTrace, Vec<HeadSeed>)>)> {
    if seq.len() < 2 {
        return Ok((0.0, 0, None));
    }
    let positions: Vec<usize> = (0..seq.len() - 1).collect();
    let trace = run(params, seq, None, Heads::At(positions))?;
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for (t, row) in trace.log_probs.iter().enumerate() {
        let target = seq[t + 1] as usize;
        loss -= row[target];
        if with_seeds {
            let mut d: Vec<f64> = row.iter().map(|lp| lp.exp()).collect();
            d[target] -= 1.0;
            seeds.push(HeadSeed { position: t, dlogits: d });
        }
    }
    let n = seq.len() - 1;
    Ok((loss, n, with_seeds.then_some((trace, seeds))))
}

pub struct Trained {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Fits `params` to `corpus` by minibatch descent on the mean next-token
/// cross-entropy. Single-threaded and deterministic given `cfg.seed`.
pub fn train(params: &ModelParams, corpus: &[Vec<Token>], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for seq in corpus {
        super::forward::validate_tokens(params, seq)?;
    }
    let initial_loss = corpus_loss(params, corpus)?;
    let mut current = params.clone();
    let shapes: Vec<usize> = current.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdaptiveStep::new(&shapes, cfg.second_moment_decay, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut batch_losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grads = current.zeros_like();
        let mut batch_loss = 0.0;
        let mut batch_tokens = 0usize;
        let mut pending = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pending.push(order[cursor]);
            cursor += 1;
        }
        for &idx in &pending {
            let (loss, n, work) = sequence_loss(&current, &corpus[idx], true)?;
            batch_loss += loss;
            batch_tokens += n;
            if let Some((trace, seeds)) = work {
                backward(&current, &trace, &seeds, Stop::Embeddings, Some(&mut grads));
            }
        }
        if batch_tokens == 0 {
            batch_losses.push(0.0);
            continue;
        }
        let scale = 1.0 / batch_tokens as f64;
        let mean_loss = batch_loss * scale;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { step, loss: mean_loss });
        }
        batch_losses.push(mean_loss);
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
        let rate = cfg.rate_at(step);
        let grad_views: Vec<&[f64]> = grads.tensors();
        opt.apply(current.tensors_mut(), grad_views, rate);
        if !current.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }

    let final_loss = corpus_loss(&current, corpus)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok(Trained {
        params: current,
        report: TrainReport {
            initial_loss,
            final_loss,
            batch_losses,
        },
    })
}
