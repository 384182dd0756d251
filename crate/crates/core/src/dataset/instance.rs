use std::collections::BTreeSet;
use std::fmt;

use crate::microlm::Token;

pub type TokenSeq = Vec<Token>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityProbe {
    pub prompt: TokenSeq,
    /// The answer the unedited model gives (`o_l`).
    pub answer: TokenSeq,
}

/// One appending edit: add `new_answer` to the correct answers of
/// `(subject, relation)` without disturbing `correct` or promoting the false
/// answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakInstance {
    pub subject: TokenSeq,
    pub relation: String,
    /// Editing prompt `p`.
    pub prompt: TokenSeq,
    /// Original correct answers `O`.
    pub correct: Vec<TokenSeq>,
    /// Answer to append, `o*`.
    pub new_answer: TokenSeq,
    pub paraphrases: Vec<TokenSeq>,
    pub locality: Vec<LocalityProbe>,
    pub hard_false: Vec<TokenSeq>,
    pub random_false: Vec<TokenSeq>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalseSet {
    Hard,
    Random,
}

impl fmt::Display for FalseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FalseSet::Hard => "hard",
            FalseSet::Random => "random",
        })
    }
}

/// A broken [`PeakInstance`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoCorrectAnswers,
    NewAnswerAlreadyCorrect,
    FalseCorrectOverlap(FalseSet),
    FalseNewOverlap(FalseSet),
    NoParaphrases,
    NoLocalityProbes,
    EmptySequence(&'static str),
    SubjectNotInPrompt,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoCorrectAnswers => write!(f, "no correct answers"),
            Violation::NewAnswerAlreadyCorrect => write!(f, "new answer already correct"),
            Violation::FalseCorrectOverlap(s) => write!(f, "false/correct overlap ({s})"),
            Violation::FalseNewOverlap(s) => write!(f, "false/new overlap ({s})"),
            Violation::NoParaphrases => write!(f, "no paraphrase prompts"),
            Violation::NoLocalityProbes => write!(f, "no locality probes"),
            Violation::EmptySequence(what) => write!(f, "empty token sequence in {what}"),
            Violation::SubjectNotInPrompt => write!(f, "subject tokens do not occur in the editing prompt"),
        }
    }
}

impl PeakInstance {
    pub fn false_answers(&self, set: FalseSet) -> &[TokenSeq] {
        match set {
            FalseSet::Hard => &self.hard_false,
            FalseSet::Random => &self.random_false,
        }
    }

    /// `{p} ∪ P^G`, editing prompt first.
    pub fn eval_prompts(&self) -> Vec<&TokenSeq> {
        std::iter::once(&self.prompt).chain(&self.paraphrases).collect()
    }

    /// Index of the last subject token in `prompt`, if the subject occurs.
    pub fn subject_end_in(&self, prompt: &[Token]) -> Option<usize> {
        find_subsequence(prompt, &self.subject).map(|start| start + self.subject.len() - 1)
    }

    /// Every invariant violation, not just the first.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.correct.is_empty() {
            out.push(Violation::NoCorrectAnswers);
        }
        if self.paraphrases.is_empty() {
            out.push(Violation::NoParaphrases);
        }
        if self.locality.is_empty() {
            out.push(Violation::NoLocalityProbes);
        }
        let empties: [(&'static str, bool); 8] = [
            ("subject", self.subject.is_empty()),
            ("prompt", self.prompt.is_empty()),
            ("new", self.new_answer.is_empty()),
            ("correct", self.correct.iter().any(Vec::is_empty)),
            ("paraphrases", self.paraphrases.iter().any(Vec::is_empty)),
            (
                "locality",
                self.locality.iter().any(|l| l.prompt.is_empty() || l.answer.is_empty()),
            ),
            ("hard_false", self.hard_false.iter().any(Vec::is_empty)),
            ("random_false", self.random_false.iter().any(Vec::is_empty)),
        ];
        for (what, bad) in empties {
            if bad {
                out.push(Violation::EmptySequence(what));
            }
        }
        if !self.subject.is_empty() && !self.prompt.is_empty() && self.subject_end_in(&self.prompt).is_none() {
            out.push(Violation::SubjectNotInPrompt);
        }
        let correct: BTreeSet<&TokenSeq> = self.correct.iter().collect();
        if correct.contains(&self.new_answer) {
            out.push(Violation::NewAnswerAlreadyCorrect);
        }
        for set in [FalseSet::Hard, FalseSet::Random] {
            let falses = self.false_answers(set);
            if falses.iter().any(|f| correct.contains(f)) {
                out.push(Violation::FalseCorrectOverlap(set));
            }
            if falses.contains(&self.new_answer) {
                out.push(Violation::FalseNewOverlap(set));
            }
        }
        out
    }
}

pub(crate) fn find_subsequence(hay: &[Token], needle: &[Token]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).rev().find(|&i| &hay[i..i + needle.len()] == needle)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn instance() -> PeakInstance {
        PeakInstance {
            subject: vec![1, 2],
            relation: "r0".into(),
            prompt: vec![1, 2, 10, 11],
            correct: vec![vec![20], vec![21]],
            new_answer: vec![30],
            paraphrases: vec![vec![1, 2, 12, 13]],
            locality: vec![LocalityProbe {
                prompt: vec![3, 4, 10, 11],
                answer: vec![22],
            }],
            hard_false: vec![vec![31], vec![32]],
            random_false: vec![vec![40], vec![41]],
        }
    }
}
