use serde::{Deserialize, Serialize};

use crate::dataset::{FalseSet, PeakInstance, TokenSeq};
use crate::error::{Error, Result};
use crate::microlm::{answer_logprobs, ModelParams, ObjectiveTerm};

fn default_margin() -> f64 {
    2.0
}

/// Weights of the preservation and prevention objectives added to an
/// editor's own loss:
///
/// * `alpha`: margin hinge between every (correct, false) pair;
/// * `beta`: floor keeping each correct answer at or above its pre-edit
///   log-probability;
/// * `gamma`: ceiling keeping each false answer at or below its pre-edit
///   log-probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct APPConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_false_set")]
    pub false_set: FalseSet,
}

fn default_false_set() -> FalseSet {
    FalseSet::Hard
}

impl APPConfig {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        APPConfig {
            alpha,
            beta,
            gamma,
            margin: 2.0,
            false_set: FalseSet::Hard,
        }
    }

    /// Weights used with the rank-one editor.
    pub const ROME: APPConfig = APPConfig::new(0.2, 0.2, 0.1);
    /// Weights used with fine-tuning.
    pub const FT: APPConfig = APPConfig::new(0.2, 0.5, 0.2);

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("app.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("app.margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Emits the weighted terms for `prompt`: `N·M` hinge pairs of weight
/// `α/(NM)`, `N` floors of weight `β/N` and `M` ceilings of weight `γ/M`,
/// with floor and ceiling references read from `base`.
pub fn build_app_terms(
    base: &ModelParams,
    instance: &PeakInstance,
    cfg: &APPConfig,
    prompt: &[crate::microlm::Token],
) -> Result<Vec<ObjectiveTerm>> {
    cfg.validate()?;
    let correct = &instance.correct;
    let falses: &[TokenSeq] = instance.false_answers(cfg.false_set);
    if correct.is_empty() {
        return Err(Error::Input("APP needs at least one correct answer".into()));
    }
    if falses.is_empty() {
        return Err(Error::Input(format!("APP needs at least one {} false answer", cfg.false_set)));
    }
    let n = correct.len() as f64;
    let m = falses.len() as f64;
    let correct_ref = answer_logprobs(base, prompt, correct)?;
    let false_ref = answer_logprobs(base, prompt, falses)?;

    let mut terms = Vec::with_capacity(correct.len() * falses.len() + correct.len() + falses.len());
    for c in correct {
        for f in falses {
            terms.push(ObjectiveTerm::hinge(prompt.to_vec(), c.clone(), f.clone(), cfg.margin, cfg.alpha / (n * m)));
        }
    }
    for (c, &r) in correct.iter().zip(&correct_ref) {
        terms.push(ObjectiveTerm::freeze_lower(prompt.to_vec(), c.clone(), r, cfg.beta / n));
    }
    for (f, &r) in falses.iter().zip(&false_ref) {
        terms.push(ObjectiveTerm::freeze_upper(prompt.to_vec(), f.clone(), r, cfg.gamma / m));
    }
    Ok(terms)
}
