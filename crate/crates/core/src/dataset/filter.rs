use serde::{Deserialize, Serialize};

use super::instance::{PeakInstance, TokenSeq};
use crate::error::{Error, Result};
use crate::microlm::{answer_logprobs, ModelParams};

/// Which prompts the probability filter consults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// The editing prompt only.
    #[default]
    EditingPrompt,
    /// The editing prompt and every paraphrase; an answer must pass on all.
    AllPrompts,
}

/// Prunes an instance against `model`:
///
/// 1. correct answers with probability below `tau` are dropped;
/// 2. false answers whose probability reaches the weakest surviving correct
///    answer are dropped;
/// 3. locality probes whose original answer does not strictly beat the new
///    answer are dropped.
///
/// The instance is rejected when no correct answer, no false answer of either
/// set, or no locality probe survives. In [`FilterMode::EditingPrompt`] it is
/// also rejected when a paraphrase does not rank every surviving correct
/// answer strictly above every surviving false answer.
pub fn filter_instance(model: &ModelParams, instance: &PeakInstance, tau: f64, mode: FilterMode) -> Result<PeakInstance> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let prompts: Vec<&TokenSeq> = match mode {
        FilterMode::EditingPrompt => vec![&instance.prompt],
        FilterMode::AllPrompts => instance.eval_prompts(),
    };

    let n_c = instance.correct.len();
    let n_h = instance.hard_false.len();
    let mut answers: Vec<TokenSeq> = instance.correct.clone();
    answers.extend(instance.hard_false.iter().cloned());
    answers.extend(instance.random_false.iter().cloned());

    let mut keep_correct = vec![true; n_c];
    let mut scores = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let probs: Vec<f64> = answer_logprobs(model, p, &answers)?.into_iter().map(f64::exp).collect();
        for (k, &pr) in probs[..n_c].iter().enumerate() {
            if pr < tau {
                keep_correct[k] = false;
            }
        }
        scores.push(probs);
    }
    if !keep_correct.iter().any(|&k| k) {
        return Err(Error::Rejected("every correct answer falls below the probability threshold".into()));
    }

    let mut keep_false = vec![true; answers.len() - n_c];
    for probs in &scores {
        let floor = probs[..n_c]
            .iter()
            .zip(&keep_correct)
            .filter(|(_, &k)| k)
            .map(|(&p, _)| p)
            .fold(f64::INFINITY, f64::min);
        for (k, &pr) in probs[n_c..].iter().enumerate() {
            if pr >= floor {
                keep_false[k] = false;
            }
        }
    }

    let pick = |items: &[TokenSeq], mask: &[bool]| -> Vec<TokenSeq> {
        items.iter().zip(mask).filter(|(_, &k)| k).map(|(s, _)| s.clone()).collect()
    };
    let mut out = instance.clone();
    out.correct = pick(&instance.correct, &keep_correct);
    out.hard_false = pick(&instance.hard_false, &keep_false[..n_h]);
    out.random_false = pick(&instance.random_false, &keep_false[n_h..]);

    out.locality.clear();
    for probe in &instance.locality {
        let lps = answer_logprobs(model, &probe.prompt, &[probe.answer.clone(), instance.new_answer.clone()])?;
        if lps[0] > lps[1] {
            out.locality.push(probe.clone());
        }
    }

    if out.hard_false.is_empty() || out.random_false.is_empty() {
        return Err(Error::Rejected("a false-answer set is empty after filtering".into()));
    }
    if out.locality.is_empty() {
        return Err(Error::Rejected("no locality probe prefers its original answer".into()));
    }
    if mode == FilterMode::EditingPrompt {
        let falses: Vec<TokenSeq> = out.hard_false.iter().chain(&out.random_false).cloned().collect();
        for p in &out.paraphrases {
            let lowest = answer_logprobs(model, p, &out.correct)?.into_iter().fold(f64::INFINITY, f64::min);
            let highest = answer_logprobs(model, p, &falses)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
            if lowest <= highest {
                return Err(Error::Rejected("a paraphrase ranks a false answer at or above a correct answer".into()));
            }
        }
    }
    Ok(out)
}

/// Outcome of filtering a whole dataset.
#[derive(Debug, Clone)]
pub struct FilterSummary {
    pub kept: Vec<PeakInstance>,
    /// Index into the input list of every kept instance.
    pub kept_index: Vec<usize>,
    /// Index and reason for every rejected instance.
    pub rejected: Vec<(usize, String)>,
}

pub fn filter_dataset(model: &ModelParams, instances: &[PeakInstance], tau: f64, mode: FilterMode) -> Result<FilterSummary> {
    let mut summary = FilterSummary {
        kept: Vec::new(),
        kept_index: Vec::new(),
        rejected: Vec::new(),
    };
    for (i, inst) in instances.iter().enumerate() {
        match filter_instance(model, inst, tau, mode) {
            Ok(f) => {
                summary.kept.push(f);
                summary.kept_index.push(i);
            }
            Err(Error::Rejected(why)) => summary.rejected.push((i, why)),
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Mean probability gap between correct and false answers on a fact's
/// editing prompt: `(mean P(correct), mean P(false))`.
pub fn fidelity(model: &ModelParams, instance: &PeakInstance) -> Result<(f64, f64)> {
    let falses: Vec<TokenSeq> = instance.hard_false.iter().chain(&instance.random_false).cloned().collect();
    let mean = |xs: Vec<f64>| xs.iter().map(|l| l.exp()).sum::<f64>() / xs.len().max(1) as f64;
    let c = mean(answer_logprobs(model, &instance.prompt, &instance.correct)?);
    let f = mean(answer_logprobs(model, &instance.prompt, &falses)?);
    Ok((c, f))
}
