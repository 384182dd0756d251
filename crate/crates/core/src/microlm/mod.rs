//! A small pre-norm decoder-only transformer with hand-written
//! backpropagation, activation patching and objective gradients.
//!
//! Architecture: learned token and absolute position embeddings, `n_layers`
//! blocks of causal multi-head attention and a GELU MLP (`W_fc`, `W_proj`),
//! each preceded by layer norm, a final layer norm, and an output head tied
//! to the token embedding. No linear layer carries a bias. Everything is
//! `f64`.

mod backward;
mod forward;
mod io;
mod math;
mod objective;
mod params;
mod train;

pub use forward::{
    answer_logprob, answer_logprobs, answer_probability, hidden_states, forward, forward_patched, HiddenTrace, LayerTrace, Patch, PatchSite};
pub use io::{
    delta_bytes, load_delta, load_model, load_model_expecting, load_model_file, model_bytes, save_delta, save_model,
    save_model_with, ModelFile, WeightDelta,
};
pub use objective::{
    objective_value, objective_value_and_grad, Gradient, KlReference, KlScope, ObjectiveEval, ObjectiveTerm, Target,
    TermKind,
};
pub use params::{init_model, LayerNorm, LayerParams, Matrix, ModelConfig, ModelParams, Token, WeightId};
pub use train::{corpus_loss, train, AdaptiveStep, TrainConfig, TrainReport, Trained};

pub(crate) use math::{dot, norm};
