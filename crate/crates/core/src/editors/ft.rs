use serde::{Deserialize, Serialize};

use super::app::{build_app_terms, APPConfig};
use super::outcome::{EditDiagnostics, EditOutcome};
use crate::dataset::PeakInstance;
use crate::error::{Error, Result};
use crate::microlm::{objective_value, objective_value_and_grad, AdaptiveStep, ModelParams, ObjectiveTerm, Target, WeightId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FTConfig {
    /// Layer whose `W_proj` is tuned.
    pub layer: usize,
    pub steps: usize,
    pub rate: f64,
    /// Radius `ε` of the max-entry ball around the base weights.
    pub norm_budget: f64,
    /// Decay of the per-entry squared-gradient average used to scale steps.
    pub second_moment_decay: f64,
}

impl Default for FTConfig {
    fn default() -> Self {
        FTConfig {
            layer: 2,
            steps: 25,
            rate: 5e-2,
            norm_budget: 2.0,
            second_moment_decay: 0.999,
        }
    }
}

impl FTConfig {
    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("ft.{m}")));
        if self.layer >= model.config.n_layers {
            return bad(format!("layer {} out of range for {} layers", self.layer, model.config.n_layers));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return bad("rate must be positive".into());
        }
        if !(self.norm_budget > 0.0) || !self.norm_budget.is_finite() {
            return bad("norm_budget must be positive".into());
        }
        if !(0.0..1.0).contains(&self.second_moment_decay) {
            return bad("second_moment_decay must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Tunes `W_proj` at `cfg.layer` on the new answer's negative log-probability
/// (plus APP terms), clipping every entry of the tracked delta `Ŵ − W` to `[−ε, ε]` after each
/// step.
pub fn apply_ft(base: &ModelParams, instance: &PeakInstance, app: Option<&APPConfig>, cfg: &FTConfig) -> Result<EditOutcome> {
    cfg.validate(base)?;
    let prompt = &instance.prompt;
    let mut terms = vec![ObjectiveTerm::answer_nll(prompt.clone(), instance.new_answer.clone(), 1.0)];
    if let Some(app) = app {
        terms.extend(build_app_terms(base, instance, app, prompt)?);
    }
    let id = WeightId::MlpProj(cfg.layer);
    let w0 = base.weight(id)?.data.clone();
    let eps = cfg.norm_budget;
    let mut current = base.clone();
    let mut delta = vec![0.0; w0.len()];
    let mut opt = AdaptiveStep::new(&[w0.len()], cfg.second_moment_decay, 1e-12);
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let numeric = |step: usize| {
        move |e: Error| match e {
            Error::NonFiniteTerm { term, detail } => Error::NonFiniteStep {
                step,
                detail: format!("term {term}: {detail}"),
            },
            other => other,
        }
    };
    for step in 0..cfg.steps {
        let eval = objective_value_and_grad(&current, &terms, Target::Weight(id)).map_err(numeric(step))?;
        if !eval.value.is_finite() {
            return Err(Error::NonFiniteStep {
                step,
                detail: format!("loss {}", eval.value),
            });
        }
        trajectory.push(eval.value);
        opt.apply(vec![&mut delta], vec![eval.gradient.as_slice()], cfg.rate);
        delta.iter_mut().for_each(|d| *d = d.clamp(-eps, eps));
        let w = current.weight_mut(id)?;
        for ((x, &b), &d) in w.data.iter_mut().zip(&w0).zip(&delta) {
            *x = b + d;
        }
    }
    let (final_loss, _) = objective_value(&current, &terms, Target::Weight(id)).map_err(numeric(cfg.steps))?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteStep {
            step: cfg.steps,
            detail: format!("loss {final_loss}"),
        });
    }
    let delta_max_abs = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut warnings = Vec::new();
    if final_loss >= trajectory[0] {
        warnings.push(format!("loss did not decrease ({:.6} -> {:.6})", trajectory[0], final_loss));
    }
    Ok(EditOutcome {
        params: current,
        weight: id,
        trajectory,
        diagnostics: EditDiagnostics {
            steps: cfg.steps,
            final_loss,
            delta_max_abs: Some(delta_max_abs),
            warnings,
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::instance;
    use crate::microlm::{answer_logprob, init_model, ModelConfig};

    fn model() -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: 48,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn projection_is_active_with_huge_rate() {
        let m = model();
        let cfg = FTConfig {
            steps: 1,
            rate: 1e6,
            norm_budget: 0.001,
            layer: 1,
            ..Default::default()
        };
        let out = apply_ft(&m, &instance(), None, &cfg).unwrap();
        assert_eq!(out.diagnostics.delta_max_abs, Some(0.001));
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(m.changed_weights(&out.params), vec!["layers.1.w_proj".to_string()]);
    }

    #[test]
    fn tiny_budget_keeps_base() {
        let m = model();
        let cfg = FTConfig {
            norm_budget: 1e-300,
            layer: 1,
            ..Default::default()
        };
        let out = apply_ft(&m, &instance(), None, &cfg).unwrap();
        let a = &m.weight(WeightId::MlpProj(1)).unwrap().data;
        let b = &out.params.weight(WeightId::MlpProj(1)).unwrap().data;
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-300));
    }

    #[test]
    fn descent_raises_new_answer_and_zero_app_is_identity() {
        let m = model();
        let inst = instance();
        let cfg = FTConfig {
            norm_budget: 0.05,
            rate: 5e-3,
            layer: 1,
            ..Default::default()
        };
        let plain = apply_ft(&m, &inst, None, &cfg).unwrap();
        let before = answer_logprob(&m, &inst.prompt, &inst.new_answer, None).unwrap();
        let after = answer_logprob(&plain.params, &inst.prompt, &inst.new_answer, None).unwrap();
        assert!(after > before);
        assert!(plain.diagnostics.final_loss < plain.trajectory[0]);
        let zero = apply_ft(&m, &inst, Some(&APPConfig::new(0.0, 0.0, 0.0)), &cfg).unwrap();
        assert_eq!(plain.params.checksum(), zero.params.checksum());
        assert_eq!(plain.trajectory, zero.trajectory);
        let coupled = apply_ft(&m, &inst, Some(&APPConfig::FT), &cfg).unwrap();
        assert!(coupled.trajectory.iter().all(|v| v.is_finite()));
        assert!(coupled.diagnostics.final_loss < coupled.trajectory[0]);
    }

    #[test]
    fn config_checks() {
        let m = model();
        for bad in [
            FTConfig { steps: 0, layer: 1, ..Default::default() },
            FTConfig { norm_budget: 0.0, layer: 1, ..Default::default() },
            FTConfig { layer: 2, ..Default::default() },
        ] {
            assert!(matches!(apply_ft(&m, &instance(), None, &bad), Err(Error::Config(_))));
        }
        assert!(toml::from_str::<FTConfig>("steps = 3\nlr = 1\n").is_err());
    }
}
