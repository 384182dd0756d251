use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::{LocalityProbe, PeakInstance, TokenSeq};
use super::symbols::SymbolTable;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A dataset: instances plus the symbol table their tokens resolve through.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub symbols: SymbolTable,
    pub instances: Vec<PeakInstance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    schema_version: u32,
    symbols: Vec<String>,
    instances: Vec<InstanceDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    subject: String,
    relation: String,
    prompt: String,
    correct: Vec<String>,
    new: String,
    paraphrases: Vec<String>,
    locality: Vec<LocalityDoc>,
    hard_false: Vec<String>,
    random_false: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalityDoc {
    prompt: String,
    answer: String,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let s = &self.symbols;
        let many = |xs: &[TokenSeq]| xs.iter().map(|x| s.render(x)).collect::<Result<Vec<_>>>();
        let instances = self
            .instances
            .iter()
            .map(|i| {
                Ok(InstanceDoc {
                    subject: s.render(&i.subject)?,
                    relation: i.relation.clone(),
                    prompt: s.render(&i.prompt)?,
                    correct: many(&i.correct)?,
                    new: s.render(&i.new_answer)?,
                    paraphrases: many(&i.paraphrases)?,
                    locality: i
                        .locality
                        .iter()
                        .map(|l| {
                            Ok(LocalityDoc {
                                prompt: s.render(&l.prompt)?,
                                answer: s.render(&l.answer)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    hard_false: many(&i.hard_false)?,
                    random_false: many(&i.random_false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = DatasetDoc {
            schema_version: SCHEMA_VERSION,
            symbols: s.names().to_vec(),
            instances,
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("dataset documents always serialize");
        text.push('\n');
        Ok(text)
    }

    /// Parses a dataset document. Unless `permissive`, any instance that
    /// breaks an invariant fails the whole load.
    pub fn from_json(text: &str, origin: &Path, permissive: bool) -> Result<Self> {
        let parse_err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            detail,
        };
        let doc: DatasetDoc = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(parse_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let symbols = SymbolTable::from_names(doc.symbols).map_err(|e| parse_err(e.to_string()))?;
        let mut instances = Vec::with_capacity(doc.instances.len());
        for (idx, d) in doc.instances.into_iter().enumerate() {
            let ctx = |e: Error| parse_err(format!("instance {idx}: {e}"));
            let one = |x: &str| symbols.parse(x).map_err(ctx);
            let many = |xs: &[String]| xs.iter().map(|x| symbols.parse(x).map_err(ctx)).collect::<Result<Vec<_>>>();
            instances.push(PeakInstance {
                subject: one(&d.subject)?,
                relation: d.relation,
                prompt: one(&d.prompt)?,
                correct: many(&d.correct)?,
                new_answer: one(&d.new)?,
                paraphrases: many(&d.paraphrases)?,
                locality: d
                    .locality
                    .iter()
                    .map(|l| {
                        Ok(LocalityProbe {
                            prompt: one(&l.prompt)?,
                            answer: one(&l.answer)?,
                        })
                    })
                    .collect::<Result<_>>()?,
                hard_false: many(&d.hard_false)?,
                random_false: many(&d.random_false)?,
            });
        }
        if !permissive {
            let bad: Vec<String> = instances
                .iter()
                .enumerate()
                .filter_map(|(i, inst)| {
                    let v = inst.validate();
                    (!v.is_empty()).then(|| {
                        let reasons: Vec<String> = v.iter().map(ToString::to_string).collect();
                        format!("instance {i}: {}", reasons.join("; "))
                    })
                })
                .collect();
            if !bad.is_empty() {
                return Err(Error::Validation(format!("{}: {}", origin.display(), bad.join(" | "))));
            }
        }
        Ok(Dataset { symbols, instances })
    }
}

pub fn save_instances(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_instances(path: impl AsRef<Path>, permissive: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json(&text, path, permissive)
}

/// Corpus file: one training sequence per line, written as symbols.
pub fn save_corpus(corpus: &[TokenSeq], symbols: &SymbolTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for seq in corpus {
        text.push_str(&symbols.render(seq)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(symbols: &SymbolTable, path: impl AsRef<Path>) -> Result<Vec<TokenSeq>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            symbols.parse(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::world::{generate_world, SyntheticWorldConfig};

    fn world_dataset() -> (Dataset, Vec<TokenSeq>) {
        let w = generate_world(&SyntheticWorldConfig::default()).unwrap();
        (
            Dataset {
                symbols: w.symbols,
                instances: w.instances,
            },
            w.corpus,
        )
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, corpus) = world_dataset();
        let p = dir.path().join("instances.json");
        save_instances(&ds, &p).unwrap();
        assert_eq!(load_instances(&p, false).unwrap(), ds);
        let c = dir.path().join("corpus.txt");
        save_corpus(&corpus, &ds.symbols, &c).unwrap();
        assert_eq!(load_corpus(&ds.symbols, &c).unwrap(), corpus);
    }

    #[test]
    fn keys_mirror_instance_fields() {
        let (ds, _) = world_dataset();
        let v: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        let mut keys: Vec<&str> = v["instances"][0].as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["correct", "hard_false", "locality", "new", "paraphrases", "prompt", "random_false", "relation", "subject"]
        );
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn overlapping_false_answers_fail_to_load() {
        let (mut ds, _) = world_dataset();
        let dup = ds.instances[3].correct[0].clone();
        ds.instances[3].hard_false.push(dup);
        let text = ds.to_json().unwrap();
        let err = Dataset::from_json(&text, Path::new("x.json"), false).unwrap_err();
        match err {
            Error::Validation(m) => assert!(m.contains("instance 3"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Dataset::from_json(&text, Path::new("x.json"), true).is_ok());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let (mut ds, _) = world_dataset();
        ds.instances.clear();
        let back = Dataset::from_json(&ds.to_json().unwrap(), Path::new("e.json"), false).unwrap();
        assert!(back.instances.is_empty());
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let (ds, _) = world_dataset();
        let mut v: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(Dataset::from_json(&v.to_string(), Path::new("a"), false), Err(Error::Parse { .. })));
        v.as_object_mut().unwrap().remove("extra");
        v["schema_version"] = serde_json::json!(9);
        assert!(matches!(Dataset::from_json(&v.to_string(), Path::new("a"), false), Err(Error::Parse { .. })));
    }
}
