use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::instance::{LocalityProbe, PeakInstance, TokenSeq};
use super::symbols::{SymbolTable, ISA_SYMBOL};
use crate::error::{Error, Result};
use crate::microlm::Token;

/// Half-open token-id range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u32; 2]", into = "[u32; 2]")]
pub struct SymbolRange {
    pub start: Token,
    pub end: Token,
}

impl SymbolRange {
    pub const fn new(start: Token, end: Token) -> Self {
        SymbolRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn overlaps(&self, other: &SymbolRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl TryFrom<[u32; 2]> for SymbolRange {
    type Error = String;

    fn try_from(v: [u32; 2]) -> std::result::Result<Self, String> {
        if v[0] > v[1] {
            return Err(format!("range start {} exceeds end {}", v[0], v[1]));
        }
        Ok(SymbolRange::new(v[0], v[1]))
    }
}

impl From<SymbolRange> for [u32; 2] {
    fn from(r: SymbolRange) -> Self {
        [r.start, r.end]
    }
}

/// How the integer vocabulary is carved up. Token 0 is always the IS-A
/// symbol; ids not covered by any range are unused filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabLayout {
    pub vocab_size: usize,
    /// Subject name tokens: the first half are given names, the second half
    /// family names; a subject is one of each.
    pub subjects: SymbolRange,
    pub templates: SymbolRange,
    pub objects: SymbolRange,
    pub types: SymbolRange,
}

impl Default for VocabLayout {
    fn default() -> Self {
        VocabLayout {
            vocab_size: 512,
            subjects: SymbolRange::new(1, 65),
            templates: SymbolRange::new(65, 129),
            objects: SymbolRange::new(129, 385),
            types: SymbolRange::new(385, 401),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub n_relations: usize,
    pub n_subjects_per_relation: usize,
    pub n_correct_per_fact: usize,
    pub n_hard: usize,
    pub n_random: usize,
    pub n_paraphrases: usize,
    pub n_locality: usize,
    /// Object clusters per relation; hard negatives share the new answer's cluster.
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub n_types: usize,
    /// Tokens per relation template.
    pub template_len: usize,
    pub subject_placement: SubjectPlacement,
    /// Copies of each training sequence in the corpus.
    pub repetitions: usize,
    /// Extra sequences per (fact, template) ending in a uniformly drawn
    /// object of the relation other than the fact's correct answers and its
    /// new answer, spreading probability mass over plausible wrong answers.
    pub noise_repetitions: usize,
    pub vocab: VocabLayout,
    pub seed: u64,
}

/// Where the subject sits relative to the relation template in a prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectPlacement {
    /// `[template…, subject…]`: the answer is read at the last subject token.
    #[default]
    Last,
    /// `[subject…, template…]`.
    First,
}

impl SubjectPlacement {
    fn compose(self, subject: &[Token], template: &[Token]) -> TokenSeq {
        let (a, b) = match self {
            SubjectPlacement::Last => (template, subject),
            SubjectPlacement::First => (subject, template),
        };
        let mut p = Vec::with_capacity(a.len() + b.len());
        p.extend_from_slice(a);
        p.extend_from_slice(b);
        p
    }
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_relations: 4,
            n_subjects_per_relation: 16,
            n_correct_per_fact: 3,
            n_hard: 3,
            n_random: 3,
            n_paraphrases: 2,
            n_locality: 2,
            n_clusters: 4,
            cluster_size: 8,
            n_types: 8,
            template_len: 2,
            subject_placement: SubjectPlacement::Last,
            repetitions: 8,
            noise_repetitions: 8,
            vocab: VocabLayout::default(),
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let counts = [
            ("n_relations", self.n_relations),
            ("n_subjects_per_relation", self.n_subjects_per_relation),
            ("n_correct_per_fact", self.n_correct_per_fact),
            ("n_hard", self.n_hard),
            ("n_random", self.n_random),
            ("n_paraphrases", self.n_paraphrases),
            ("n_locality", self.n_locality),
            ("n_clusters", self.n_clusters),
            ("cluster_size", self.cluster_size),
            ("n_types", self.n_types),
            ("template_len", self.template_len),
            ("repetitions", self.repetitions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return cfg_err(format!("world.{name} must be at least 1"));
            }
        }
        let v = &self.vocab;
        let ranges = [
            ("subjects", v.subjects),
            ("templates", v.templates),
            ("objects", v.objects),
            ("types", v.types),
        ];
        for (i, (name, r)) in ranges.iter().enumerate() {
            if r.start == 0 {
                return cfg_err(format!("vocab.{name} may not include token 0 (reserved for {ISA_SYMBOL})"));
            }
            if r.end as usize > v.vocab_size {
                return cfg_err(format!("vocab.{name} ends at {} beyond vocab_size {}", r.end, v.vocab_size));
            }
            for (other, o) in &ranges[i + 1..] {
                if r.overlaps(o) {
                    return cfg_err(format!("vocab.{name} overlaps vocab.{other}"));
                }
            }
        }
        let given = v.subjects.len() / 2;
        let family = v.subjects.len() - given;
        let n_subjects = self.n_relations * self.n_subjects_per_relation;
        if given * family < n_subjects {
            return cfg_err(format!(
                "vocab.subjects has room for {} subjects, {n_subjects} requested",
                given * family
            ));
        }
        let n_templates = self.n_relations * (1 + self.n_paraphrases) * self.template_len;
        if v.templates.len() < n_templates {
            return cfg_err(format!("vocab.templates needs {n_templates} ids, has {}", v.templates.len()));
        }
        let n_objects = self.n_relations * self.n_clusters * self.cluster_size;
        if v.objects.len() < n_objects {
            return cfg_err(format!("vocab.objects needs {n_objects} ids, has {}", v.objects.len()));
        }
        if v.types.len() < self.n_types {
            return cfg_err(format!("vocab.types needs {} ids, has {}", self.n_types, v.types.len()));
        }
        if self.n_clusters < 3 {
            return cfg_err("world.n_clusters must be at least 3 so random negatives have a cluster of their own".into());
        }
        if self.cluster_size < self.n_correct_per_fact || self.cluster_size < self.n_hard + 1 {
            return cfg_err("world.cluster_size is too small for n_correct_per_fact or n_hard".into());
        }
        if (self.n_clusters - 2) * self.cluster_size < self.n_random {
            return cfg_err("world.n_random exceeds the objects outside the correct and new clusters".into());
        }
        if self.n_subjects_per_relation < 2 {
            return cfg_err("world.n_subjects_per_relation must be at least 2 to draw locality probes".into());
        }
        Ok(())
    }

    /// Longest token sequence the world can produce (prompt plus answer).
    pub fn max_sequence_len(&self) -> usize {
        (2 + self.template_len + 1).max(4)
    }
}

/// A generated world: edit instances, the training corpus and the symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldBundle {
    pub instances: Vec<PeakInstance>,
    pub corpus: Vec<TokenSeq>,
    pub symbols: SymbolTable,
}

impl WorldBundle {
    /// sha256 over the symbol table, the instances and the corpus.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for n in self.symbols.names() {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        let mut seq = |s: &[Token]| {
            h.update((s.len() as u64).to_le_bytes());
            for t in s {
                h.update(t.to_le_bytes());
            }
        };
        for i in &self.instances {
            seq(&i.subject);
            seq(&i.prompt);
            seq(&i.new_answer);
            for s in i.correct.iter().chain(&i.paraphrases).chain(&i.hard_false).chain(&i.random_false) {
                seq(s);
            }
            for l in &i.locality {
                seq(&l.prompt);
                seq(&l.answer);
            }
        }
        for s in &self.corpus {
            seq(s);
        }
        hex::encode(h.finalize())
    }
}

struct Fact {
    relation: usize,
    subject: TokenSeq,
    correct: Vec<Token>,
}

/// Deterministically builds a world from `cfg`.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<WorldBundle> {
    cfg.validate()?;
    let v = &cfg.vocab;
    let symbols = SymbolTable::from_names(symbol_names(cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let given = v.subjects.len() / 2;
    let family = v.subjects.len() - given;
    let mut pairs: Vec<(usize, usize)> = (0..given).flat_map(|g| (0..family).map(move |f| (g, f))).collect();
    pairs.shuffle(&mut rng);
    let n_templates = 1 + cfg.n_paraphrases;
    let template = |r: usize, t: usize| -> TokenSeq {
        let base = v.templates.start as usize + (r * n_templates + t) * cfg.template_len;
        (base..base + cfg.template_len).map(|x| x as Token).collect()
    };
    let object = |r: usize, c: usize, i: usize| -> Token {
        (v.objects.start as usize + (r * cfg.n_clusters + c) * cfg.cluster_size + i) as Token
    };

    let mut facts = Vec::new();
    let mut clusters = Vec::new();
    for r in 0..cfg.n_relations {
        for j in 0..cfg.n_subjects_per_relation {
            let (g, f) = pairs[r * cfg.n_subjects_per_relation + j];
            let subject = vec![v.subjects.start + g as Token, v.subjects.start + (given + f) as Token];
            let c1 = rng.random_range(0..cfg.n_clusters);
            let members: Vec<usize> = (0..cfg.cluster_size).collect();
            let correct = members
                .choose_multiple(&mut rng, cfg.n_correct_per_fact)
                .map(|&i| object(r, c1, i))
                .collect();
            facts.push(Fact { relation: r, subject, correct });
            clusters.push(c1);
        }
    }

    let isa: Token = symbols.isa_token()?;
    let mut corpus = Vec::new();
    for fact in &facts {
        for t in 0..n_templates {
            let prompt = cfg.subject_placement.compose(&fact.subject, &template(fact.relation, t));
            for &o in &fact.correct {
                let mut seq = prompt.clone();
                seq.push(o);
                corpus.extend(std::iter::repeat_n(seq, cfg.repetitions));
            }
        }
        let ty = v.types.start + rng.random_range(0..cfg.n_types) as Token;
        let mut seq = fact.subject.clone();
        seq.extend([isa, ty]);
        corpus.extend(std::iter::repeat_n(seq, cfg.repetitions));
    }

    let mut instances = Vec::with_capacity(facts.len());
    for (idx, fact) in facts.iter().enumerate() {
        let r = fact.relation;
        let c1 = clusters[idx];
        let others: Vec<usize> = (0..cfg.n_clusters).filter(|&c| c != c1).collect();
        let c2 = *others.choose(&mut rng).expect("at least three clusters");
        let star_i = rng.random_range(0..cfg.cluster_size);
        let new_answer = object(r, c2, star_i);
        let hard_pool: Vec<Token> = (0..cfg.cluster_size)
            .filter(|&i| i != star_i)
            .map(|i| object(r, c2, i))
            .collect();
        let hard_false = hard_pool.choose_multiple(&mut rng, cfg.n_hard).map(|&o| vec![o]).collect();
        let random_pool: Vec<Token> = (0..cfg.n_clusters)
            .filter(|&c| c != c1 && c != c2)
            .flat_map(|c| (0..cfg.cluster_size).map(move |i| (c, i)))
            .map(|(c, i)| object(r, c, i))
            .collect();
        let random_false = random_pool.choose_multiple(&mut rng, cfg.n_random).map(|&o| vec![o]).collect();

        let edit_t = rng.random_range(0..n_templates);
        let with_template = |subject: &TokenSeq, t: usize| cfg.subject_placement.compose(subject, &template(r, t));
        let prompt = with_template(&fact.subject, edit_t);
        let paraphrases = (0..n_templates)
            .filter(|&t| t != edit_t)
            .map(|t| with_template(&fact.subject, t))
            .collect();

        // Locality probes: other subjects of the same relation whose correct
        // answers do not include the new answer.
        let candidates: Vec<&Fact> = facts
            .iter()
            .enumerate()
            .filter(|&(j, f)| j != idx && f.relation == r && !f.correct.contains(&new_answer))
            .map(|(_, f)| f)
            .collect();
        let locality = candidates
            .choose_multiple(&mut rng, cfg.n_locality)
            .map(|f| {
                let t = rng.random_range(0..n_templates);
                let answer = *f.correct.choose(&mut rng).expect("facts have correct answers");
                LocalityProbe {
                    prompt: with_template(&f.subject, t),
                    answer: vec![answer],
                }
            })
            .collect();

        let instance = PeakInstance {
            subject: fact.subject.clone(),
            relation: format!("r{r}"),
            prompt,
            correct: fact.correct.iter().map(|&o| vec![o]).collect(),
            new_answer: vec![new_answer],
            paraphrases,
            locality,
            hard_false,
            random_false,
        };
        debug_assert!(instance.validate().is_empty());
        instances.push(instance);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_6520_616e);
    for (fact, inst) in facts.iter().zip(&instances) {
        let pool: Vec<Token> = (0..cfg.n_clusters)
            .flat_map(|c| (0..cfg.cluster_size).map(move |i| (c, i)))
            .map(|(c, i)| object(fact.relation, c, i))
            .filter(|o| !fact.correct.contains(o) && inst.new_answer[0] != *o)
            .collect();
        for t in 0..n_templates {
            let prompt = cfg.subject_placement.compose(&fact.subject, &template(fact.relation, t));
            for _ in 0..cfg.noise_repetitions {
                let mut seq = prompt.clone();
                seq.push(*pool.choose(&mut noise_rng).expect("relations have spare objects"));
                corpus.push(seq);
            }
        }
    }

    Ok(WorldBundle {
        instances,
        corpus,
        symbols,
    })
}

fn symbol_names(cfg: &SyntheticWorldConfig) -> Vec<String> {
    let v = &cfg.vocab;
    let mut names: Vec<String> = (0..v.vocab_size).map(|i| format!("u.{i}")).collect();
    names[0] = ISA_SYMBOL.to_string();
    let given = v.subjects.len() / 2;
    for (k, id) in (v.subjects.start..v.subjects.end).enumerate() {
        names[id as usize] = if k < given {
            format!("s.g{k:02}")
        } else {
            format!("s.f{:02}", k - given)
        };
    }
    let n_templates = 1 + cfg.n_paraphrases;
    let per_relation = n_templates * cfg.template_len;
    for (k, id) in (v.templates.start..v.templates.end).enumerate() {
        let r = k / per_relation;
        if r < cfg.n_relations {
            let t = (k % per_relation) / cfg.template_len;
            let w = k % cfg.template_len;
            names[id as usize] = format!("r{r}.t{t}.w{w}");
        }
    }
    let per_rel_objects = cfg.n_clusters * cfg.cluster_size;
    for (k, id) in (v.objects.start..v.objects.end).enumerate() {
        let r = k / per_rel_objects;
        if r < cfg.n_relations {
            let c = (k % per_rel_objects) / cfg.cluster_size;
            let i = k % cfg.cluster_size;
            names[id as usize] = format!("r{r}.c{c}.o{i:02}");
        }
    }
    for (k, id) in (v.types.start..v.types.end).enumerate() {
        if k < cfg.n_types {
            names[id as usize] = format!("type{k:02}");
        }
    }
    names
}
