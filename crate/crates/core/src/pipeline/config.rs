use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{FilterMode, SyntheticWorldConfig};
use crate::editors::{APPConfig, FTConfig, ROMEConfig};
use crate::error::{Error, Result};
use crate::metrics::ThresholdMode;
use crate::microlm::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    Rome,
    Ft,
    /// Leaves the model untouched; the evaluation baseline.
    Identity,
}

impl EditorKind {
    pub fn name(self) -> &'static str {
        match self {
            EditorKind::Rome => "rome",
            EditorKind::Ft => "ft",
            EditorKind::Identity => "identity",
        }
    }
}

/// One labelled editing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: String,
    pub editor: EditorKind,
    /// Replaces the top-level `[rome]` section for this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rome: Option<ROMEConfig>,
    /// Replaces the top-level `[ft]` section for this run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ft: Option<FTConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<APPConfig>,
    /// Mixed into every per-edit seed; runs sharing a key see identical
    /// random prefixes. Defaults to the editor name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_key: Option<String>,
    /// Label of the run this one is compared against in the paired report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_to: Option<String>,
}

impl RunSpec {
    pub fn new(label: &str, editor: EditorKind) -> Self {
        RunSpec {
            label: label.to_string(),
            editor,
            rome: None,
            ft: None,
            app: None,
            seed_key: None,
            compare_to: None,
        }
    }

    pub fn seed_key(&self) -> &str {
        self.seed_key.as_deref().unwrap_or(self.editor.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probability floor for correct answers during filtering.
    pub tau: f64,
    pub filter: FilterMode,
    pub thresholds: ThresholdMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 0.02,
            filter: FilterMode::EditingPrompt,
            thresholds: ThresholdMode::PerPrompt,
        }
    }
}

/// Everything one pipeline execution needs. Seed fields inside `world`,
/// `model` and `train` are replaced by the master `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub world: SyntheticWorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub rome: ROMEConfig,
    #[serde(default)]
    pub ft: FTConfig,
    #[serde(default = "default_runs")]
    pub runs: Vec<RunSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            world: SyntheticWorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            rome: ROMEConfig::default(),
            ft: FTConfig::default(),
            runs: default_runs(),
        }
    }
}

/// `identity`, `rome`, `rome+app`, `ft`, `ft+app`, with each APP run paired
/// against its plain counterpart and sharing its seeds.
pub fn default_runs() -> Vec<RunSpec> {
    let coupled = |label: &str, editor: EditorKind, app: APPConfig, base: &str| RunSpec {
        app: Some(app),
        compare_to: Some(base.to_string()),
        ..RunSpec::new(label, editor)
    };
    vec![
        RunSpec::new("identity", EditorKind::Identity),
        RunSpec::new("rome", EditorKind::Rome),
        coupled("rome+app", EditorKind::Rome, APPConfig::ROME, "rome"),
        RunSpec::new("ft", EditorKind::Ft),
        coupled("ft+app", EditorKind::Ft, APPConfig::FT, "ft"),
    ]
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        let seed = cfg.seed;
        cfg.with_seed(seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Sets the master seed and propagates it into every stage config.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.world.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.world.max_sequence_len() > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "model.max_seq_len {} is shorter than the longest world sequence ({})",
                self.model.max_seq_len,
                self.world.max_sequence_len()
            )));
        }
        if self.world.vocab.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "world vocab size {} differs from model vocab size {}",
                self.world.vocab.vocab_size, self.model.vocab_size
            )));
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            return Err(Error::Config(format!("eval.tau must lie in (0, 1), got {}", self.eval.tau)));
        }
        let mut labels = BTreeSet::new();
        for run in &self.runs {
            if run.label.is_empty() || run.label.contains(['/', '\\']) || run.label.starts_with('.') {
                return Err(Error::Config(format!("run label {:?} is not usable as a directory name", run.label)));
            }
            if !labels.insert(run.label.as_str()) {
                return Err(Error::Config(format!("run label {:?} appears twice", run.label)));
            }
            let misplaced = match run.editor {
                EditorKind::Rome => run.ft.is_some().then_some("ft"),
                EditorKind::Ft => run.rome.is_some().then_some("rome"),
                EditorKind::Identity => (run.rome.is_some() || run.ft.is_some() || run.app.is_some()).then_some("editor"),
            };
            if let Some(section) = misplaced {
                return Err(Error::Config(format!(
                    "run {:?}: {section} settings do not apply to a {} run",
                    run.label,
                    run.editor.name()
                )));
            }
            if let Some(app) = &run.app {
                app.validate()?;
            }
        }
        for run in &self.runs {
            if let Some(base) = &run.compare_to {
                if !labels.contains(base.as_str()) || base == &run.label {
                    return Err(Error::Config(format!("run {:?}: compare_to {:?} names no other run", run.label, base)));
                }
            }
        }
        Ok(())
    }

    pub fn rome_for(&self, run: &RunSpec) -> ROMEConfig {
        run.rome.clone().unwrap_or_else(|| self.rome.clone())
    }

    pub fn ft_for(&self, run: &RunSpec) -> FTConfig {
        run.ft.clone().unwrap_or_else(|| self.ft.clone())
    }

    pub fn run(&self, label: &str) -> Result<&RunSpec> {
        self.runs
            .iter()
            .find(|r| r.label == label)
            .ok_or_else(|| Error::Usage(format!("unknown run label {label:?}")))
    }

    /// Runs named in `labels`, in config order; all runs when `labels` is empty.
    pub fn select_runs(&self, labels: &[String]) -> Result<Vec<&RunSpec>> {
        for l in labels {
            self.run(l)?;
        }
        Ok(self
            .runs
            .iter()
            .filter(|r| labels.is_empty() || labels.contains(&r.label))
            .collect())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// Per-edit seed: the first eight bytes of SHA-256 over the master seed, the
/// instance index and the run's seed key.
pub fn edit_seed(master: u64, index: usize, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
