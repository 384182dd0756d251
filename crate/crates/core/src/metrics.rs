//! Edit evaluation: efficacy, generalization and locality, plus the
//! additivity family (RFF, RNF, CPC, FPC and their aggregates AFF, ANF) that
//! measures how much an appending edit disturbs neighboring knowledge.
//!
//! All probabilities are length-normalized answer probabilities and every
//! comparison is strict.

use serde::{Deserialize, Serialize};

use crate::dataset::{FalseSet, PeakInstance, TokenSeq};
use crate::error::{Error, Result};
use crate::microlm::{answer_logprobs, ModelParams, Token};

/// One probability reading `P(answer | prompt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerProbe {
    pub prompt: TokenSeq,
    pub answer: TokenSeq,
    pub logprob: f64,
    pub probability: f64,
}

impl AnswerProbe {
    pub fn from_logprob(prompt: TokenSeq, answer: TokenSeq, logprob: f64) -> Self {
        AnswerProbe {
            prompt,
            answer,
            logprob,
            probability: logprob.exp(),
        }
    }

    /// A probe with no model behind it; useful for evaluating the formulas
    /// on given probabilities.
    pub fn with_probability(probability: f64) -> Self {
        AnswerProbe {
            prompt: Vec::new(),
            answer: Vec::new(),
            logprob: probability.ln(),
            probability,
        }
    }
}

/// Scores every answer under `prompt`.
pub fn probe_answers(params: &ModelParams, prompt: &[Token], answers: &[TokenSeq]) -> Result<Vec<AnswerProbe>> {
    let lps = answer_logprobs(params, prompt, answers)?;
    Ok(answers
        .iter()
        .zip(lps)
        .map(|(a, lp)| AnswerProbe::from_logprob(prompt.to_vec(), a.clone(), lp))
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigma-weighted share of `probes` selected by `hit`. The numerator skips
/// terms in the same summation order as the denominator, so the ratio never
/// exceeds 1.
fn weighted_share(probes: &[AnswerProbe], hit: impl Fn(f64) -> bool) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for p in probes {
        let w = sigmoid(p.probability);
        den += w;
        num += if hit(p.probability) { w } else { 0.0 };
    }
    num / den
}

/// RFF: sigma-weighted share of correct answers ranked strictly below the best
/// false answer.
pub fn ranking_forgetting(correct: &[AnswerProbe], false_max: f64) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Input("ranking forgetting needs at least one correct answer".into()));
    }
    Ok(weighted_share(correct, |p| p < false_max))
}

/// RNF: sigma-weighted share of false answers ranked strictly above the worst
/// correct answer.
pub fn ranking_noise(false_probes: &[AnswerProbe], correct_min: f64) -> Result<f64> {
    if false_probes.is_empty() {
        return Err(Error::Input("ranking noise needs at least one false answer".into()));
    }
    Ok(weighted_share(false_probes, |p| p > correct_min))
}

/// `(CPC, FPC)`: post-to-pre ratios of summed correct and false probabilities.
pub fn probability_changes(
    pre_correct: &[AnswerProbe],
    post_correct: &[AnswerProbe],
    pre_false: &[AnswerProbe],
    post_false: &[AnswerProbe],
) -> Result<(f64, f64)> {
    let ratio = |pre: &[AnswerProbe], post: &[AnswerProbe], what: &str| -> Result<f64> {
        if pre.len() != post.len() {
            return Err(Error::Input(format!("{what}: {} pre-edit probes but {} post-edit", pre.len(), post.len())));
        }
        if pre.iter().zip(post).any(|(a, b)| a.answer != b.answer) {
            return Err(Error::Input(format!("{what}: pre- and post-edit answers differ")));
        }
        let before: f64 = pre.iter().map(|p| p.probability).sum();
        let after: f64 = post.iter().map(|p| p.probability).sum();
        if !(before > 0.0) {
            return Err(Error::Degenerate(format!("{what}: pre-edit probability mass is zero")));
        }
        Ok(after / before)
    };
    Ok((
        ratio(pre_correct, post_correct, "correct answers")?,
        ratio(pre_false, post_false, "false answers")?,
    ))
}

/// `(AFF, ANF)` with `AFF = 1 − (1 − RFF)·min{1, CPC}` and
/// `ANF = 1 − (1 − RNF)·min{1, 1/FPC}`.
///
/// Evaluated as `RFF + (1 − RFF)·(1 − min{1, CPC})` (and likewise for ANF),
/// which is the same quantity but keeps `AFF = RFF` exact when `CPC ≥ 1` and
/// `AFF ≥ RFF` exact otherwise.
pub fn aggregate_additivity(rff: f64, rnf: f64, cpc: f64, fpc: f64) -> (f64, f64) {
    let combine = |base: f64, keep: f64| (base + (1.0 - base) * (1.0 - keep.min(1.0))).min(1.0);
    (combine(rff, cpc), combine(rnf, 1.0 / fpc))
}

/// How the ranking thresholds of the additivity family are chosen when an
/// edit is evaluated over several prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Each prompt uses its own best-false and worst-correct probabilities.
    #[default]
    PerPrompt,
    /// One pair of thresholds taken over all prompts of the edit.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub thresholds: ThresholdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAdditivity {
    pub prompt: TokenSeq,
    /// Best post-edit false probability used as the RFF threshold.
    pub false_max: f64,
    /// Worst post-edit correct probability used as the RNF threshold.
    pub correct_min: f64,
    pub rff: f64,
    pub rnf: f64,
    pub cpc: f64,
    pub fpc: f64,
    pub aff: f64,
    pub anf: f64,
    pub pre_correct: Vec<AnswerProbe>,
    pub post_correct: Vec<AnswerProbe>,
    pub pre_false: Vec<AnswerProbe>,
    pub post_false: Vec<AnswerProbe>,
}

/// Additivity for one false-answer set, averaged uniformly over prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivityEval {
    pub false_set: FalseSet,
    pub thresholds: ThresholdMode,
    pub rff: f64,
    pub rnf: f64,
    pub cpc: f64,
    pub fpc: f64,
    pub aff: f64,
    pub anf: f64,
    pub per_prompt: Vec<PromptAdditivity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorDetail {
    pub prompt: TokenSeq,
    pub new_probability: f64,
    /// Probability the new answer has to beat strictly.
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEval {
    pub es: u8,
    pub gs: f64,
    pub ls: f64,
    pub efficacy: IndicatorDetail,
    pub generalization: Vec<IndicatorDetail>,
    /// Per locality probe: `P(o_l | p_l)` must beat `P(o* | p_l)`.
    pub locality: Vec<IndicatorDetail>,
    pub hard: AdditivityEval,
    pub random: AdditivityEval,
}

impl EditEval {
    pub fn additivity(&self, set: FalseSet) -> &AdditivityEval {
        match set {
            FalseSet::Hard => &self.hard,
            FalseSet::Random => &self.random,
        }
    }
}

fn efficacy_at(post: &ModelParams, instance: &PeakInstance, prompt: &TokenSeq) -> Result<IndicatorDetail> {
    if instance.correct.is_empty() {
        return Err(Error::Input("instance has no correct answers".into()));
    }
    let mut answers = instance.correct.clone();
    answers.push(instance.new_answer.clone());
    let probs: Vec<f64> = answer_logprobs(post, prompt, &answers)?.into_iter().map(f64::exp).collect();
    let (new_p, correct) = probs.split_last().expect("non-empty");
    let threshold = correct.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(IndicatorDetail {
        prompt: prompt.clone(),
        new_probability: *new_p,
        threshold,
        pass: *new_p > threshold,
    })
}

/// ES: 1 when the new answer strictly beats the weakest original correct
/// answer under the editing prompt.
pub fn efficacy(post: &ModelParams, instance: &PeakInstance) -> Result<u8> {
    Ok(efficacy_at(post, instance, &instance.prompt)?.pass as u8)
}

fn generalization_detail(post: &ModelParams, instance: &PeakInstance) -> Result<Vec<IndicatorDetail>> {
    if instance.paraphrases.is_empty() {
        return Err(Error::Input("instance has no paraphrase prompts".into()));
    }
    instance.paraphrases.iter().map(|p| efficacy_at(post, instance, p)).collect()
}

/// GS: mean efficacy indicator over the paraphrase prompts.
pub fn generalization(post: &ModelParams, instance: &PeakInstance) -> Result<f64> {
    Ok(mean_pass(&generalization_detail(post, instance)?))
}

fn locality_detail(post: &ModelParams, instance: &PeakInstance) -> Result<Vec<IndicatorDetail>> {
    if instance.locality.is_empty() {
        return Err(Error::Input("instance has no locality probes".into()));
    }
    instance
        .locality
        .iter()
        .map(|probe| {
            let lps = answer_logprobs(post, &probe.prompt, &[probe.answer.clone(), instance.new_answer.clone()])?;
            let (orig, new) = (lps[0].exp(), lps[1].exp());
            Ok(IndicatorDetail {
                prompt: probe.prompt.clone(),
                new_probability: new,
                threshold: orig,
                pass: orig > new,
            })
        })
        .collect()
}

/// LS: share of locality probes whose original answer still strictly beats
/// the new answer.
pub fn locality(post: &ModelParams, instance: &PeakInstance) -> Result<f64> {
    Ok(mean_pass(&locality_detail(post, instance)?))
}

fn mean_pass(d: &[IndicatorDetail]) -> f64 {
    d.iter().filter(|x| x.pass).count() as f64 / d.len() as f64
}

struct PromptProbes {
    prompt: TokenSeq,
    pre_correct: Vec<AnswerProbe>,
    post_correct: Vec<AnswerProbe>,
    pre_false: Vec<AnswerProbe>,
    post_false: Vec<AnswerProbe>,
}

fn max_prob(p: &[AnswerProbe]) -> f64 {
    p.iter().map(|x| x.probability).fold(f64::NEG_INFINITY, f64::max)
}

fn min_prob(p: &[AnswerProbe]) -> f64 {
    p.iter().map(|x| x.probability).fold(f64::INFINITY, f64::min)
}

/// Additivity over precomputed probes, one entry per prompt.
fn additivity_from_probes(set: FalseSet, mode: ThresholdMode, probes: Vec<PromptProbes>) -> Result<AdditivityEval> {
    if probes.is_empty() {
        return Err(Error::Input("additivity needs at least one prompt".into()));
    }
    let pooled = (
        probes.iter().map(|p| max_prob(&p.post_false)).fold(f64::NEG_INFINITY, f64::max),
        probes.iter().map(|p| min_prob(&p.post_correct)).fold(f64::INFINITY, f64::min),
    );
    let mut per_prompt = Vec::with_capacity(probes.len());
    for p in probes {
        let (false_max, correct_min) = match mode {
            ThresholdMode::PerPrompt => (max_prob(&p.post_false), min_prob(&p.post_correct)),
            ThresholdMode::Pooled => pooled,
        };
        let rff = ranking_forgetting(&p.post_correct, false_max)?;
        let rnf = ranking_noise(&p.post_false, correct_min)?;
        let (cpc, fpc) = probability_changes(&p.pre_correct, &p.post_correct, &p.pre_false, &p.post_false)?;
        let (aff, anf) = aggregate_additivity(rff, rnf, cpc, fpc);
        per_prompt.push(PromptAdditivity {
            prompt: p.prompt,
            false_max,
            correct_min,
            rff,
            rnf,
            cpc,
            fpc,
            aff,
            anf,
            pre_correct: p.pre_correct,
            post_correct: p.post_correct,
            pre_false: p.pre_false,
            post_false: p.post_false,
        });
    }
    let n = per_prompt.len() as f64;
    let mean = |f: fn(&PromptAdditivity) -> f64| per_prompt.iter().map(f).sum::<f64>() / n;
    Ok(AdditivityEval {
        false_set: set,
        thresholds: mode,
        rff: mean(|p| p.rff),
        rnf: mean(|p| p.rnf),
        cpc: mean(|p| p.cpc),
        fpc: mean(|p| p.fpc),
        aff: mean(|p| p.aff),
        anf: mean(|p| p.anf),
        per_prompt,
    })
}

/// Full evaluation of one edit over the editing prompt and its paraphrases.
pub fn evaluate_edit(pre: &ModelParams, post: &ModelParams, instance: &PeakInstance, opts: EvalOptions) -> Result<EditEval> {
    let violations = instance.validate();
    if !violations.is_empty() {
        let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Input(format!("invalid instance: {}", v.join("; "))));
    }
    let n_c = instance.correct.len();
    let n_h = instance.hard_false.len();
    let mut answers = instance.correct.clone();
    answers.extend(instance.hard_false.iter().cloned());
    answers.extend(instance.random_false.iter().cloned());

    let mut hard = Vec::new();
    let mut random = Vec::new();
    for prompt in instance.eval_prompts() {
        let pre_p = probe_answers(pre, prompt, &answers)?;
        let post_p = probe_answers(post, prompt, &answers)?;
        for (range, out) in [(n_c..n_c + n_h, &mut hard), (n_c + n_h..answers.len(), &mut random)] {
            out.push(PromptProbes {
                prompt: prompt.clone(),
                pre_correct: pre_p[..n_c].to_vec(),
                post_correct: post_p[..n_c].to_vec(),
                pre_false: pre_p[range.clone()].to_vec(),
                post_false: post_p[range].to_vec(),
            });
        }
    }

    let efficacy = efficacy_at(post, instance, &instance.prompt)?;
    let generalization = generalization_detail(post, instance)?;
    let locality = locality_detail(post, instance)?;
    Ok(EditEval {
        es: efficacy.pass as u8,
        gs: mean_pass(&generalization),
        ls: mean_pass(&locality),
        efficacy,
        generalization,
        locality,
        hard: additivity_from_probes(FalseSet::Hard, opts.thresholds, hard)?,
        random: additivity_from_probes(FalseSet::Random, opts.thresholds, random)?,
    })
}

/// Column labels of a report row, in order.
pub const REPORT_COLUMNS: [&str; 7] = ["ES", "GS", "LS", "AFF(h)", "ANF(h)", "AFF(r)", "ANF(r)"];

/// Unweighted means over edits, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n_edits: usize,
    pub es: f64,
    pub gs: f64,
    pub ls: f64,
    pub aff_hard: f64,
    pub anf_hard: f64,
    pub aff_random: f64,
    pub anf_random: f64,
}

impl ReportRow {
    /// Values in [`REPORT_COLUMNS`] order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.es,
            self.gs,
            self.ls,
            self.aff_hard,
            self.anf_hard,
            self.aff_random,
            self.anf_random,
        ]
    }

    /// Percentages with two decimals, ties rounded to even.
    pub fn percent_strings(&self) -> [String; 7] {
        self.values().map(format_percent)
    }
}

/// `0.123456 → "12.35"`; ties at the second decimal go to the even digit.
pub fn format_percent(fraction: f64) -> String {
    let hundredths = (fraction * 10_000.0).round_ties_even();
    format!("{:.2}", hundredths / 100.0)
}

pub fn aggregate_dataset(evals: &[EditEval]) -> Result<ReportRow> {
    if evals.is_empty() {
        return Err(Error::Input("cannot aggregate an empty list of edits".into()));
    }
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&EditEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Ok(ReportRow {
        n_edits: evals.len(),
        es: mean(&|e| e.es as f64),
        gs: mean(&|e| e.gs),
        ls: mean(&|e| e.ls),
        aff_hard: mean(&|e| e.hard.aff),
        anf_hard: mean(&|e| e.hard.anf),
        aff_random: mean(&|e| e.random.aff),
        anf_random: mean(&|e| e.random.anf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probes(ps: &[f64]) -> Vec<AnswerProbe> {
        ps.iter().map(|&p| AnswerProbe::with_probability(p)).collect()
    }

    #[test]
    fn rff_examples() {
        assert_eq!(ranking_forgetting(&probes(&[0.6, 0.5]), 0.3).unwrap(), 0.0);
        let v = ranking_forgetting(&probes(&[0.6, 0.2]), 0.3).unwrap();
        assert!((v - 0.549834 / 1.195490).abs() < 1e-6);
        assert!((v - 0.4599).abs() < 5e-5);
        assert_eq!(ranking_forgetting(&probes(&[0.1, 0.2]), 0.3).unwrap(), 1.0);
        assert!(ranking_forgetting(&[], 0.3).is_err());
    }

    #[test]
    fn rnf_examples() {
        assert_eq!(ranking_noise(&probes(&[0.1, 0.05]), 0.2).unwrap(), 0.0);
        let v = ranking_noise(&probes(&[0.3, 0.1]), 0.2).unwrap();
        assert!((v - 0.5225).abs() < 5e-5);
        assert_eq!(ranking_noise(&probes(&[0.3, 0.4]), 0.2).unwrap(), 1.0);
    }

    #[test]
    fn equal_probability_is_not_below_threshold() {
        assert_eq!(ranking_forgetting(&probes(&[0.3]), 0.3).unwrap(), 0.0);
        assert_eq!(ranking_noise(&probes(&[0.2]), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn change_ratios() {
        let (cpc, fpc) =
            probability_changes(&probes(&[0.4]), &probes(&[0.2]), &probes(&[0.05]), &probes(&[0.10])).unwrap();
        assert!((cpc - 0.5).abs() < 1e-15);
        assert!((fpc - 2.0).abs() < 1e-15);
        let (c, f) =
            probability_changes(&probes(&[0.4, 0.3]), &probes(&[0.4, 0.3]), &probes(&[0.1]), &probes(&[0.1])).unwrap();
        assert_eq!((c, f), (1.0, 1.0));
        let e = probability_changes(&probes(&[0.0]), &probes(&[0.1]), &probes(&[0.1]), &probes(&[0.1]));
        assert!(matches!(e, Err(Error::Degenerate(_))));
        assert!(probability_changes(&probes(&[0.4]), &probes(&[]), &probes(&[0.1]), &probes(&[0.1])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (aff, _) = aggregate_additivity(0.3, 0.0, 1.2, 1.0);
        assert_eq!(aff, 0.3);
        let rff = 0.549834 / 1.195490;
        let (aff, _) = aggregate_additivity(rff, 0.0, 0.8, 1.0);
        assert!((aff - (1.0 - (1.0 - rff) * 0.8)).abs() < 1e-15);
        assert!((aff - 0.5679).abs() < 5e-5);
        let (_, anf) = aggregate_additivity(0.0, 0.0, 1.0, 2.0);
        assert!((anf - 0.5).abs() < 1e-15);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.5), "50.00");
        assert_eq!(format_percent(1.0), "100.00");
        assert_eq!(format_percent(0.0), "0.00");
        assert_eq!(format_percent(0.123456), "12.35");
        assert_eq!(format_percent(0.6666666666), "66.67");
    }

    #[test]
    fn empty_aggregation_is_an_error() {
        assert!(aggregate_dataset(&[]).is_err());
    }

    proptest! {
        #[test]
        fn additivity_identities(rff in 0.0f64..=1.0, rnf in 0.0f64..=1.0, cpc in 1e-6f64..5.0, fpc in 1e-6f64..5.0) {
            let (aff, anf) = aggregate_additivity(rff, rnf, cpc, fpc);
            prop_assert!((0.0..=1.0).contains(&aff) && (0.0..=1.0).contains(&anf));
            if cpc >= 1.0 { prop_assert_eq!(aff, rff) } else { prop_assert!(aff >= rff) }
            if fpc <= 1.0 { prop_assert_eq!(anf, rnf) } else { prop_assert!(anf >= rnf) }
            let direct_aff = 1.0 - (1.0 - rff) * cpc.min(1.0);
            let direct_anf = 1.0 - (1.0 - rnf) * (1.0 / fpc).min(1.0);
            prop_assert!((aff - direct_aff).abs() < 1e-12);
            prop_assert!((anf - direct_anf).abs() < 1e-12);
        }

        #[test]
        fn ranking_factors_are_fractions(ps in prop::collection::vec(1e-9f64..1.0, 1..20), t in 0.0f64..1.0) {
            let p = probes(&ps);
            let rff = ranking_forgetting(&p, t).unwrap();
            let rnf = ranking_noise(&p, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&rff));
            prop_assert!((0.0..=1.0).contains(&rnf));
        }

        #[test]
        fn lowering_a_correct_probe_never_lowers_rff(
            ps in prop::collection::vec(0.01f64..1.0, 2..12),
            idx in 0usize..12,
            t in 0.05f64..0.9,
        ) {
            let i = idx % ps.len();
            let before = ranking_forgetting(&probes(&ps), t).unwrap();
            let mut moved = ps.clone();
            moved[i] = (t * 0.5).min(moved[i]);
            // keep every sigma weight fixed by reusing the original weights
            let weights: Vec<f64> = ps.iter().map(|&p| sigmoid(p)).collect();
            let share = |v: &[f64]| {
                let num: f64 = v.iter().zip(&weights).filter(|(p, _)| **p < t).map(|(_, w)| w).sum();
                num / weights.iter().sum::<f64>()
            };
            prop_assert!((share(&ps) - before).abs() < 1e-12);
            prop_assert!(share(&moved) >= share(&ps));
        }
    }
}
