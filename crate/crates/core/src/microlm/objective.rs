//! Composite editing objectives and their exact gradients.
//!
//! An objective is a weighted sum of [`ObjectiveTerm`]s. Every term reads
//! length-normalized answer log-probabilities (or a next-token distribution)
//! of the model, possibly under an activation patch, so all of them reduce to
//! seeds on the output logits followed by one reverse sweep per distinct
//! sequence.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::backward::{backward, HeadSeed, Stop};
use super::forward::{run, sequence_logprob, teacher_forced, Heads, HiddenTrace, Patch};
use super::math::outer_acc;
use super::params::{Matrix, ModelParams, Token, WeightId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// `−lp(primary)`: the negative length-normalized answer log-probability.
    AnswerLogprob,
    /// `max{0, M − lp(primary) + lp(secondary)}` with margin `M = reference`.
    HingePair,
    /// `max{0, reference − lp(primary)}`.
    FreezeLower,
    /// `max{0, lp(primary) − reference}`.
    FreezeUpper,
    /// `KL(current ‖ reference)` of next-token distributions.
    KlAnchor,
}

/// Reference next-token log-distributions for a KL anchor, one row per
/// position of the prompt that is anchored.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReference {
    pub positions: Vec<usize>,
    pub log_probs: Vec<Vec<f64>>,
}

/// Which prompt positions a KL anchor covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScope {
    #[default]
    FinalPosition,
    AllPositions,
}

impl KlReference {
    /// Captures the unpatched distributions of `params` on `prompt`.
    pub fn capture(params: &ModelParams, prompt: &[Token], scope: KlScope) -> Result<Self> {
        let positions: Vec<usize> = match scope {
            KlScope::FinalPosition => vec![prompt.len().saturating_sub(1)],
            KlScope::AllPositions => (0..prompt.len()).collect(),
        };
        let trace = run(params, prompt, None, Heads::At(positions.clone()))?;
        Ok(KlReference {
            positions,
            log_probs: trace.log_probs,
        })
    }
}

/// One additive summand of an editing loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerm {
    pub kind: TermKind,
    pub prompt: Vec<Token>,
    pub primary: Vec<Token>,
    pub secondary: Vec<Token>,
    /// Margin for [`TermKind::HingePair`]; the pre-edit log-probability for
    /// the freeze terms; unused otherwise.
    pub reference: f64,
    pub weight: f64,
    pub kl_reference: Option<Arc<KlReference>>,
}

impl ObjectiveTerm {
    pub fn answer_nll(prompt: Vec<Token>, answer: Vec<Token>, weight: f64) -> Self {
        ObjectiveTerm {
            kind: TermKind::AnswerLogprob,
            prompt,
            primary: answer,
            secondary: Vec::new(),
            reference: 0.0,
            weight,
            kl_reference: None,
        }
    }

    pub fn hinge(prompt: Vec<Token>, correct: Vec<Token>, wrong: Vec<Token>, margin: f64, weight: f64) -> Self {
        ObjectiveTerm {
            kind: TermKind::HingePair,
            prompt,
            primary: correct,
            secondary: wrong,
            reference: margin,
            weight,
            kl_reference: None,
        }
    }

    pub fn freeze_lower(prompt: Vec<Token>, answer: Vec<Token>, reference: f64, weight: f64) -> Self {
        ObjectiveTerm {
            kind: TermKind::FreezeLower,
            prompt,
            primary: answer,
            secondary: Vec::new(),
            reference,
            weight,
            kl_reference: None,
        }
    }

    pub fn freeze_upper(prompt: Vec<Token>, answer: Vec<Token>, reference: f64, weight: f64) -> Self {
        ObjectiveTerm {
            kind: TermKind::FreezeUpper,
            prompt,
            primary: answer,
            secondary: Vec::new(),
            reference,
            weight,
            kl_reference: None,
        }
    }

    pub fn kl_anchor(prompt: Vec<Token>, reference: Arc<KlReference>, weight: f64) -> Self {
        ObjectiveTerm {
            kind: TermKind::KlAnchor,
            prompt,
            primary: Vec::new(),
            secondary: Vec::new(),
            reference: 0.0,
            weight,
            kl_reference: Some(reference),
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Input(format!("term {index} ({:?}): {what}", self.kind)));
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return bad("weight must be finite and non-negative");
        }
        if self.prompt.is_empty() {
            return bad("empty prompt");
        }
        match self.kind {
            TermKind::KlAnchor => match &self.kl_reference {
                None => return bad("missing reference distribution"),
                Some(r) if r.positions.iter().any(|&p| p >= self.prompt.len()) => {
                    return bad("reference position outside prompt")
                }
                Some(r) if r.positions.len() != r.log_probs.len() => {
                    return bad("reference rows do not match positions")
                }
                _ => {}
            },
            TermKind::HingePair => {
                if self.primary.is_empty() || self.secondary.is_empty() {
                    return bad("hinge needs both answers");
                }
            }
            _ => {
                if self.primary.is_empty() {
                    return bad("empty answer");
                }
            }
        }
        if self.kind != TermKind::KlAnchor && !self.reference.is_finite() {
            return bad("reference value must be finite");
        }
        Ok(())
    }
}

/// The quantity being differentiated.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// The vector substituted at a patch site (applied to every term).
    Patch(Patch<'a>),
    /// One weight matrix of the model, unpatched.
    Weight(WeightId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Vector(Vec<f64>),
    Matrix(Matrix),
}

impl Gradient {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Gradient::Vector(v) => v,
            Gradient::Matrix(m) => &m.data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Gradient,
    /// Unweighted value of each term, in input order.
    pub term_values: Vec<f64>,
}

struct Sequence {
    tokens: Vec<Token>,
    heads: Vec<usize>,
    answer: Vec<Token>,
}

/// Evaluates `Σ weight_k · term_k` under `target` and its exact gradient
/// with respect to the target.
///
/// Zero-weight terms are skipped entirely, so adding them never perturbs
/// the result.
pub fn objective_value_and_grad(params: &ModelParams, terms: &[ObjectiveTerm], target: Target<'_>) -> Result<ObjectiveEval> {
    evaluate(params, terms, target, true)
}

/// Value only; same semantics as [`objective_value_and_grad`].
pub fn objective_value(params: &ModelParams, terms: &[ObjectiveTerm], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    evaluate(params, terms, target, false).map(|e| (e.value, e.term_values))
}

fn evaluate(params: &ModelParams, terms: &[ObjectiveTerm], target: Target<'_>, want_grad: bool) -> Result<ObjectiveEval> {
    let patch = match target {
        Target::Patch(p) => Some(p),
        Target::Weight(id) => {
            params.weight(id)?;
            None
        }
    };
    for (i, term) in terms.iter().enumerate() {
        term.validate(i)?;
        if let Some(p) = &patch {
            if p.site.position >= term.prompt.len() {
                return Err(Error::Input(format!(
                    "term {i}: patch position {} is not inside its {}-token prompt",
                    p.site.position,
                    term.prompt.len()
                )));
            }
        }
    }

    // Deduplicate (prompt, answer) pairs so hinge and freeze terms sharing an
    // answer reuse one forward pass.
    let mut seq_index: BTreeMap<(Vec<Token>, Vec<Token>), usize> = BTreeMap::new();
    let mut sequences: Vec<Sequence> = Vec::new();
    let mut intern = |prompt: &[Token], answer: &[Token]| -> usize {
        let key = (prompt.to_vec(), answer.to_vec());
        *seq_index.entry(key).or_insert_with(|| {
            let (tokens, heads) = teacher_forced(prompt, answer);
            sequences.push(Sequence {
                tokens,
                heads,
                answer: answer.to_vec(),
            });
            sequences.len() - 1
        })
    };
    // (primary, secondary) sequence indices per active term
    let mut slots: Vec<Option<(usize, Option<usize>)>> = vec![None; terms.len()];
    for (i, term) in terms.iter().enumerate() {
        if term.weight == 0.0 {
            continue;
        }
        slots[i] = match term.kind {
            TermKind::KlAnchor => None,
            TermKind::HingePair => Some((intern(&term.prompt, &term.primary), Some(intern(&term.prompt, &term.secondary)))),
            _ => Some((intern(&term.prompt, &term.primary), None)),
        };
    }

    let traces: Vec<HiddenTrace> = sequences
        .iter()
        .map(|s| run(params, &s.tokens, patch, Heads::At(s.heads.clone())))
        .collect::<Result<_>>()?;
    let lps: Vec<f64> = traces
        .iter()
        .zip(&sequences)
        .map(|(t, s)| sequence_logprob(t, &s.answer))
        .collect();
    let mut dlp = vec![0.0; sequences.len()];

    let mut value = 0.0;
    let mut term_values = vec![0.0; terms.len()];
    let mut kl_work: Vec<(usize, HiddenTrace, Vec<HeadSeed>)> = Vec::new();
    for (i, term) in terms.iter().enumerate() {
        if term.weight == 0.0 {
            continue;
        }
        let w = term.weight;
        let v = match (term.kind, slots[i]) {
            (TermKind::AnswerLogprob, Some((a, _))) => {
                dlp[a] -= w;
                -lps[a]
            }
            (TermKind::HingePair, Some((a, Some(b)))) => {
                let raw = term.reference - lps[a] + lps[b];
                if raw > 0.0 {
                    dlp[a] -= w;
                    dlp[b] += w;
                    raw
                } else {
                    0.0
                }
            }
            (TermKind::FreezeLower, Some((a, _))) => {
                let raw = term.reference - lps[a];
                if raw > 0.0 {
                    dlp[a] -= w;
                    raw
                } else {
                    0.0
                }
            }
            (TermKind::FreezeUpper, Some((a, _))) => {
                let raw = lps[a] - term.reference;
                if raw > 0.0 {
                    dlp[a] += w;
                    raw
                } else {
                    0.0
                }
            }
            (TermKind::KlAnchor, _) => {
                let reference = term.kl_reference.as_ref().expect("validated");
                let trace = run(params, &term.prompt, patch, Heads::At(reference.positions.clone()))?;
                let mut kl_total = 0.0;
                let mut seeds = Vec::with_capacity(reference.positions.len());
                for (row, (&pos, ref_row)) in reference.positions.iter().zip(&reference.log_probs).enumerate() {
                    let cur = &trace.log_probs[row];
                    if ref_row.len() != cur.len() {
                        return Err(Error::Input(format!("term {i}: reference distribution has wrong width")));
                    }
                    let kl: f64 = cur.iter().zip(ref_row).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
                    kl_total += kl;
                    let dlogits = cur.iter().zip(ref_row).map(|(&lp, &lq)| w * lp.exp() * (lp - lq - kl)).collect();
                    seeds.push(HeadSeed { position: pos, dlogits });
                }
                kl_work.push((i, trace, seeds));
                kl_total
            }
            _ => unreachable!("slot layout follows term kind"),
        };
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm {
                term: i,
                detail: format!("{:?} evaluated to {v}", term.kind),
            });
        }
        term_values[i] = v;
        value += w * v;
    }

    if !value.is_finite() {
        return Err(Error::NonFiniteTerm {
            term: terms.len(),
            detail: "objective total is not finite".into(),
        });
    }

    let grad_len = match target {
        Target::Patch(p) => p.value.len(),
        Target::Weight(id) => params.weight(id)?.data.len(),
    };
    if !want_grad {
        return Ok(ObjectiveEval {
            value,
            gradient: Gradient::Vector(Vec::new()),
            term_values,
        });
    }

    let mut acc = GradAccumulator::new(params, target, grad_len);
    for ((trace, seq), &g) in traces.iter().zip(&sequences).zip(&dlp) {
        if g == 0.0 {
            continue;
        }
        let scale = g / seq.answer.len() as f64;
        let seeds: Vec<HeadSeed> = seq
            .heads
            .iter()
            .zip(&trace.log_probs)
            .zip(&seq.answer)
            .map(|((&pos, row), &tok)| {
                let mut dlogits: Vec<f64> = row.iter().map(|lp| -scale * lp.exp()).collect();
                dlogits[tok as usize] += scale;
                HeadSeed { position: pos, dlogits }
            })
            .collect();
        acc.add(params, trace, &seeds)?;
    }
    for (i, trace, seeds) in &kl_work {
        acc.add(params, trace, seeds).map_err(|e| match e {
            Error::NonFiniteStep { detail, .. } => Error::NonFiniteTerm { term: *i, detail },
            other => other,
        })?;
    }
    let gradient = acc.finish(params, target)?;
    if gradient.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm {
            term: terms.len(),
            detail: "gradient is not finite".into(),
        });
    }
    Ok(ObjectiveEval {
        value,
        gradient,
        term_values,
    })
}

enum GradAccumulator {
    Vector { position: usize, layer: usize, grad: Vec<f64> },
    Proj { layer: usize, grad: Vec<f64> },
    Full { id: WeightId, grads: Box<ModelParams> },
}

impl GradAccumulator {
    fn new(params: &ModelParams, target: Target<'_>, len: usize) -> Self {
        match target {
            Target::Patch(p) => GradAccumulator::Vector {
                position: p.site.position,
                layer: p.site.layer,
                grad: vec![0.0; len],
            },
            Target::Weight(WeightId::MlpProj(layer)) => GradAccumulator::Proj {
                layer,
                grad: vec![0.0; len],
            },
            Target::Weight(id) => GradAccumulator::Full {
                id,
                grads: Box::new(params.zeros_like()),
            },
        }
    }

    fn add(&mut self, params: &ModelParams, trace: &HiddenTrace, seeds: &[HeadSeed]) -> Result<()> {
        let d = params.config.d_model;
        let d_ff = params.config.d_ff;
        match self {
            GradAccumulator::Vector { position, layer, grad } => {
                let dm = backward(params, trace, seeds, Stop::Layer(*layer), None);
                for (g, v) in grad.iter_mut().zip(&dm[*position * d..(*position + 1) * d]) {
                    *g += v;
                }
            }
            GradAccumulator::Proj { layer, grad } => {
                let dm = backward(params, trace, seeds, Stop::Layer(*layer), None);
                for t in 0..trace.seq_len() {
                    outer_acc(grad, &dm[t * d..(t + 1) * d], &trace.layers[*layer].key[t * d_ff..(t + 1) * d_ff]);
                }
            }
            GradAccumulator::Full { id, grads } => {
                backward(params, trace, seeds, Stop::Layer(id.layer()), Some(grads));
            }
        }
        Ok(())
    }

    fn finish(self, params: &ModelParams, target: Target<'_>) -> Result<Gradient> {
        Ok(match self {
            GradAccumulator::Vector { grad, .. } => Gradient::Vector(grad),
            GradAccumulator::Proj { grad, .. } => {
                let w = params.weight(match target {
                    Target::Weight(id) => id,
                    Target::Patch(_) => unreachable!(),
                })?;
                Gradient::Matrix(Matrix::from_vec(w.rows, w.cols, grad)?)
            }
            GradAccumulator::Full { id, grads } => Gradient::Matrix(grads.weight(id)?.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::forward::PatchSite;
    use crate::microlm::params::{init_model, ModelConfig};

    fn model() -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 10,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn empty_terms_give_zero() {
        let m = model();
        let eval = objective_value_and_grad(&m, &[], Target::Weight(WeightId::MlpProj(0))).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hinge_value_from_logprobs() {
        // Shift the margin so the hinge sees lp(a) = −1, lp(b) = −2, M = 2.
        let m = model();
        let lp_a = crate::microlm::answer_logprob(&m, &[1, 2], &[3], None).unwrap();
        let lp_b = crate::microlm::answer_logprob(&m, &[1, 2], &[4], None).unwrap();
        let margin = 2.0 + (lp_a - -1.0) - (lp_b - -2.0);
        let term = ObjectiveTerm::hinge(vec![1, 2], vec![3], vec![4], margin, 1.0);
        let (v, per) = objective_value(&m, &[term], Target::Weight(WeightId::MlpProj(1))).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!((per[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_terms_do_not_change_anything() {
        let m = model();
        let site = PatchSite { layer: 1, position: 1 };
        let z = vec![0.1; 8];
        let base = vec![ObjectiveTerm::answer_nll(vec![1, 2, 3], vec![5], 1.0)];
        let mut padded = base.clone();
        padded.push(ObjectiveTerm::hinge(vec![1, 2, 3], vec![6], vec![7], 2.0, 0.0));
        padded.push(ObjectiveTerm::freeze_lower(vec![1, 2, 3], vec![6], 0.0, 0.0));
        let t = Target::Patch(Patch { site, value: &z });
        let a = objective_value_and_grad(&m, &base, t).unwrap();
        let b = objective_value_and_grad(&m, &padded, t).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn freeze_terms_vanish_at_reference() {
        let m = model();
        let lp = crate::microlm::answer_logprob(&m, &[2, 3], &[9, 1], None).unwrap();
        let terms = vec![
            ObjectiveTerm::freeze_lower(vec![2, 3], vec![9, 1], lp, 1.0),
            ObjectiveTerm::freeze_upper(vec![2, 3], vec![9, 1], lp, 1.0),
        ];
        let eval = objective_value_and_grad(&m, &terms, Target::Weight(WeightId::MlpProj(0))).unwrap();
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn kl_anchor_is_zero_against_itself() {
        let m = model();
        let r = Arc::new(KlReference::capture(&m, &[4, 5, 6], KlScope::AllPositions).unwrap());
        let term = ObjectiveTerm::kl_anchor(vec![4, 5, 6], r, 1.0);
        let (v, _) = objective_value(&m, &[term], Target::Weight(WeightId::MlpFc(0))).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn patch_must_fit_every_prompt() {
        let m = model();
        let z = vec![0.0; 8];
        let site = PatchSite { layer: 0, position: 2 };
        let terms = vec![ObjectiveTerm::answer_nll(vec![1, 2], vec![3], 1.0)];
        let r = objective_value_and_grad(&m, &terms, Target::Patch(Patch { site, value: &z }));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn negative_weight_rejected() {
        let m = model();
        let terms = vec![ObjectiveTerm::answer_nll(vec![1, 2], vec![3], -1.0)];
        assert!(objective_value(&m, &terms, Target::Weight(WeightId::MlpProj(0))).is_err());
    }

    fn mixed_terms(m: &ModelParams) -> Vec<ObjectiveTerm> {
        let prompt = vec![1, 2, 3];
        let lp6 = crate::microlm::answer_logprob(m, &prompt, &[6], None).unwrap();
        let lp7 = crate::microlm::answer_logprob(m, &prompt, &[7, 8], None).unwrap();
        let kl = Arc::new(KlReference::capture(m, &[2, 3, 4], KlScope::AllPositions).unwrap());
        vec![
            ObjectiveTerm::answer_nll(prompt.clone(), vec![5, 9], 1.0),
            ObjectiveTerm::hinge(prompt.clone(), vec![6], vec![7, 8], 5.0, 0.3),
            ObjectiveTerm::freeze_lower(prompt.clone(), vec![6], lp6 + 1.0, 0.5),
            ObjectiveTerm::freeze_upper(prompt.clone(), vec![7, 8], lp7 - 1.0, 0.7),
            ObjectiveTerm::kl_anchor(vec![2, 3, 4], kl, 0.25),
        ]
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn patch_gradient_matches_finite_differences() {
        let mut m = model();
        // move off the reference so the KL term has a non-zero gradient
        m.layers[1].w_proj.data.iter_mut().for_each(|w| *w *= 1.5);
        let terms = mixed_terms(&model());
        let site = PatchSite { layer: 1, position: 1 };
        let z: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 3.5)).collect();
        let eval = objective_value_and_grad(&m, &terms, Target::Patch(Patch { site, value: &z })).unwrap();
        let h = 1e-4;
        let numeric: Vec<f64> = (0..z.len())
            .map(|i| {
                let mut plus = z.clone();
                plus[i] += h;
                let mut minus = z.clone();
                minus[i] -= h;
                let fp = objective_value(&m, &terms, Target::Patch(Patch { site, value: &plus })).unwrap().0;
                let fm = objective_value(&m, &terms, Target::Patch(Patch { site, value: &minus })).unwrap().0;
                (fp - fm) / (2.0 * h)
            })
            .collect();
        assert!(max_rel_err(eval.gradient.as_slice(), &numeric) < 1e-6);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let base = model();
        let mut m = base.clone();
        m.layers[0].w_fc.data.iter_mut().for_each(|w| *w *= 1.3);
        let terms = mixed_terms(&base);
        let ids = [
            WeightId::MlpProj(0),
            WeightId::MlpProj(1),
            WeightId::MlpFc(0),
            WeightId::AttnQ(1),
            WeightId::AttnK(0),
            WeightId::AttnV(1),
            WeightId::AttnO(0),
        ];
        let h = 1e-4;
        for id in ids {
            let eval = objective_value_and_grad(&m, &terms, Target::Weight(id)).unwrap();
            let w = m.weight(id).unwrap().clone();
            let probe: Vec<usize> = (0..w.data.len()).step_by(w.data.len() / 9 + 1).collect();
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for &k in &probe {
                let mut p = w.clone();
                p.data[k] += h;
                let mut q = w.clone();
                q.data[k] -= h;
                let fp = objective_value(&m.with_weight(id, p).unwrap(), &terms, Target::Weight(id)).unwrap().0;
                let fm = objective_value(&m.with_weight(id, q).unwrap(), &terms, Target::Weight(id)).unwrap().0;
                analytic.push(eval.gradient.as_slice()[k]);
                numeric.push((fp - fm) / (2.0 * h));
            }
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "{id:?}: relative error {err}");
        }
    }
}
