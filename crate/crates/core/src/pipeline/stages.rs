use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{edit_seed, EditorKind, RunConfig, RunSpec};
use super::manifest::{sha256_bytes, RunManifest, StageRecord, VerifyFailure};
use crate::dataset::{
    fidelity, filter_dataset, generate_world, load_corpus, load_instances, save_corpus, Dataset, PeakInstance, TokenSeq,
};
use crate::editors::{apply_ft, EditDiagnostics, EditOutcome, RomeEditor};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_dataset, evaluate_edit, format_percent, EditEval, EvalOptions, ReportRow, REPORT_COLUMNS};
use crate::microlm::{delta_bytes, init_model, load_delta, load_model_expecting, model_bytes, train as fit, ModelParams, WeightDelta};

/// File locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Layout { out: out.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub const INSTANCES: &'static str = "world/instances.json";
    pub const CORPUS: &'static str = "world/corpus.txt";
    pub const FILTERED: &'static str = "world/filtered.json";
    pub const FILTER_REPORT: &'static str = "world/filter_report.csv";
    pub const MODEL: &'static str = "model/base.peaklm";
    pub const FIDELITY: &'static str = "model/fidelity.csv";
    pub const TRAIN_LOG: &'static str = "model/train_log.csv";
    pub const REPORT_CSV: &'static str = "eval/report.csv";
    pub const REPORT_FRACTIONS: &'static str = "eval/report_fractions.csv";
    pub const REPORT_MD: &'static str = "eval/report.md";
    pub const COMPARISON_MD: &'static str = "eval/comparison.md";

    pub fn edits_dir(label: &str) -> String {
        format!("edits/{label}")
    }

    pub fn delta(label: &str, index: usize) -> String {
        format!("edits/{label}/edit_{index:04}.delta")
    }

    pub fn diagnostics(label: &str) -> String {
        format!("edits/{label}/diagnostics.jsonl")
    }

    pub fn records(label: &str) -> String {
        format!("eval/{label}/records.jsonl")
    }
}

/// Writes output-relative files and remembers their checksums.
struct Writer<'a> {
    layout: &'a Layout,
    artifacts: BTreeMap<String, String>,
}

impl<'a> Writer<'a> {
    fn new(layout: &'a Layout) -> Self {
        Writer {
            layout,
            artifacts: BTreeMap::new(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let sum = write_file(self.layout, rel, bytes)?;
        self.artifacts.insert(rel.to_string(), sum);
        Ok(())
    }
}

fn write_file(layout: &Layout, rel: &str, bytes: &[u8]) -> Result<String> {
    let path = layout.path(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_bytes(bytes))
}

fn record(cfg: &RunConfig, started: Instant, artifacts: BTreeMap<String, String>, notes: BTreeMap<String, String>) -> StageRecord {
    StageRecord {
        config_hash: cfg.hash(),
        seconds: started.elapsed().as_secs_f64(),
        artifacts,
        notes,
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", threads.unwrap_or(0))))
}

fn require(layout: &Layout, rel: &str, producer: &str) -> Result<PathBuf> {
    let path = layout.path(rel);
    if !path.exists() {
        return Err(Error::Usage(format!("{} is missing; run `{producer}` first", path.display())));
    }
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub instances: usize,
    pub corpus_sequences: usize,
    pub world_checksum: String,
}

/// Generates the synthetic world and starts a fresh manifest.
pub fn gen(cfg: &RunConfig, out: &Path) -> Result<GenSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let layout = Layout::new(out);
    let world = generate_world(&cfg.world)?;
    let dataset = Dataset {
        symbols: world.symbols.clone(),
        instances: world.instances.clone(),
    };
    let mut w = Writer::new(&layout);
    w.write(Layout::INSTANCES, dataset.to_json()?.as_bytes())?;
    let corpus_path = layout.path(Layout::CORPUS);
    save_corpus(&world.corpus, &world.symbols, &corpus_path)?;
    w.artifacts
        .insert(Layout::CORPUS.into(), super::manifest::sha256_file(&corpus_path)?);

    let summary = GenSummary {
        instances: world.instances.len(),
        corpus_sequences: world.corpus.len(),
        world_checksum: world.checksum(),
    };
    let notes = BTreeMap::from([
        ("instances".to_string(), summary.instances.to_string()),
        ("corpus_sequences".to_string(), summary.corpus_sequences.to_string()),
        ("world_checksum".to_string(), summary.world_checksum.clone()),
    ]);
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stages: BTreeMap::new(),
    };
    manifest.stages.insert("gen".into(), record(cfg, started, w.artifacts, notes));
    manifest.save(out)?;
    Ok(summary)
}

fn load_world(layout: &Layout) -> Result<(Dataset, Vec<TokenSeq>)> {
    let dataset = load_instances(require(layout, Layout::INSTANCES, "gen")?, false)?;
    let corpus = load_corpus(&dataset.symbols, require(layout, Layout::CORPUS, "gen")?)?;
    Ok((dataset, corpus))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub model_checksum: String,
    /// Instances whose mean correct-answer probability beats the mean false one.
    pub faithful: usize,
    pub kept: usize,
    pub total: usize,
}

impl TrainSummary {
    pub fn retention(&self) -> f64 {
        self.kept as f64 / self.total.max(1) as f64
    }
}

/// Trains the base model, reports per-fact fidelity and writes the filtered
/// dataset.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let layout = Layout::new(out);
    let (dataset, corpus) = load_world(&layout)?;
    let init = init_model(&cfg.model)?;
    let trained = fit(&init, &corpus, &cfg.train)?;
    let params = trained.params;
    let mut w = Writer::new(&layout);

    let mut log = String::from("step,loss\n");
    for (i, l) in trained.report.batch_losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
    }
    w.write(Layout::TRAIN_LOG, log.as_bytes())?;

    let provenance = BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("config_hash".to_string(), cfg.hash()),
        ("corpus_sha256".to_string(), super::manifest::sha256_file(&layout.path(Layout::CORPUS))?),
    ]);
    w.write(Layout::MODEL, &model_bytes(&params, &provenance))?;

    let symbols = &dataset.symbols;
    let mut fid = String::from("index,subject,relation,mean_p_correct,mean_p_false,gap\n");
    let mut faithful = 0;
    for (i, inst) in dataset.instances.iter().enumerate() {
        let (c, f) = fidelity(&params, inst)?;
        faithful += (c > f) as usize;
        let _ = writeln!(fid, "{i},{},{},{c},{f},{}", symbols.render(&inst.subject)?, inst.relation, c - f);
    }
    w.write(Layout::FIDELITY, fid.as_bytes())?;

    let filtered = filter_dataset(&params, &dataset.instances, cfg.eval.tau, cfg.eval.filter)?;
    let mut rep = String::from("index,subject,status,reason\n");
    let mut reasons: BTreeMap<usize, &str> = BTreeMap::new();
    for (i, why) in &filtered.rejected {
        reasons.insert(*i, why);
    }
    for (i, inst) in dataset.instances.iter().enumerate() {
        let subject = symbols.render(&inst.subject)?;
        match reasons.get(&i) {
            Some(why) => {
                let _ = writeln!(rep, "{i},{subject},rejected,\"{}\"", why.replace('"', "'"));
            }
            None => {
                let _ = writeln!(rep, "{i},{subject},kept,");
            }
        }
    }
    w.write(Layout::FILTER_REPORT, rep.as_bytes())?;
    let kept = Dataset {
        symbols: symbols.clone(),
        instances: filtered.kept.clone(),
    };
    w.write(Layout::FILTERED, kept.to_json()?.as_bytes())?;

    let summary = TrainSummary {
        initial_loss: trained.report.initial_loss,
        final_loss: trained.report.final_loss,
        model_checksum: params.checksum(),
        faithful,
        kept: filtered.kept.len(),
        total: dataset.instances.len(),
    };
    let notes = BTreeMap::from([
        ("initial_loss".to_string(), summary.initial_loss.to_string()),
        ("final_loss".to_string(), summary.final_loss.to_string()),
        ("model_checksum".to_string(), summary.model_checksum.clone()),
        ("faithful".to_string(), format!("{}/{}", summary.faithful, summary.total)),
        ("kept".to_string(), format!("{}/{}", summary.kept, summary.total)),
    ]);
    let mut manifest = RunManifest::load_or_new(out, &cfg.hash(), cfg.seed)?;
    manifest.clear("train");
    manifest.clear("edit:");
    manifest.clear("eval");
    manifest.stages.insert("train".into(), record(cfg, started, w.artifacts, notes));
    manifest.save(out)?;
    Ok(summary)
}

fn load_trained(cfg: &RunConfig, layout: &Layout) -> Result<(ModelParams, Dataset)> {
    let base = load_model_expecting(require(layout, Layout::MODEL, "train")?, &cfg.model)?;
    let dataset = load_instances(require(layout, Layout::FILTERED, "train")?, false)?;
    Ok((base, dataset))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStatus {
    Ok,
    Failed,
}

/// One line of `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub index: usize,
    pub subject: String,
    pub seed: u64,
    pub status: EditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<EditDiagnostics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EditFailure {
    pub index: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct EditSummary {
    pub label: String,
    pub editor: EditorKind,
    pub ok: usize,
    pub failures: Vec<EditFailure>,
    pub warnings: usize,
}

enum Editor {
    Identity,
    Rome(Box<RomeEditor>),
    Ft(crate::editors::FTConfig),
}

impl Editor {
    fn prepare(cfg: &RunConfig, run: &RunSpec, base: &ModelParams, corpus: &[TokenSeq], dataset: &Dataset) -> Result<Self> {
        if let Some(app) = &run.app {
            app.validate()?;
        }
        Ok(match run.editor {
            EditorKind::Identity => Editor::Identity,
            EditorKind::Rome => {
                let rcfg = cfg.rome_for(run);
                rcfg.validate(base)?;
                let isa = dataset.symbols.isa_token()?;
                Editor::Rome(Box::new(RomeEditor::prepare(base, rcfg, corpus, isa)?))
            }
            EditorKind::Ft => {
                let fcfg = cfg.ft_for(run);
                fcfg.validate(base)?;
                Editor::Ft(fcfg)
            }
        })
    }

    fn edit(&self, base: &ModelParams, inst: &PeakInstance, run: &RunSpec, seed: u64) -> Result<Option<EditOutcome>> {
        match self {
            Editor::Identity => Ok(None),
            Editor::Rome(r) => r.edit(base, inst, run.app.as_ref(), seed).map(Some),
            Editor::Ft(f) => apply_ft(base, inst, run.app.as_ref(), f).map(Some),
        }
    }
}

/// Applies every selected run to every filtered instance and stores one
/// weight delta per successful edit.
pub fn edit(cfg: &RunConfig, out: &Path, labels: &[String], threads: Option<usize>) -> Result<Vec<EditSummary>> {
    cfg.validate()?;
    let runs = cfg.select_runs(labels)?;
    let layout = Layout::new(out);
    let (base, dataset) = load_trained(cfg, &layout)?;
    let corpus = load_corpus(&dataset.symbols, require(&layout, Layout::CORPUS, "gen")?)?;
    let base_checksum = base.checksum();
    let pool = thread_pool(threads)?;
    let mut manifest = RunManifest::load_or_new(out, &cfg.hash(), cfg.seed)?;
    let mut summaries = Vec::new();
    for run in runs {
        let started = Instant::now();
        let editor = Editor::prepare(cfg, run, &base, &corpus, &dataset)?;
        let dir = layout.path(&Layout::edits_dir(&run.label));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let results: Vec<Result<(EditRecord, Option<(String, String)>)>> = pool.install(|| {
            dataset
                .instances
                .par_iter()
                .enumerate()
                .map(|(index, inst)| {
                    let seed = edit_seed(cfg.seed, index, run.seed_key());
                    let subject = dataset.symbols.render(&inst.subject)?;
                    let mut rec = EditRecord {
                        index,
                        subject,
                        seed,
                        status: EditStatus::Ok,
                        snapshot: None,
                        error_code: None,
                        error: None,
                        diagnostics: None,
                        trajectory: Vec::new(),
                    };
                    match editor.edit(&base, inst, run, seed) {
                        Ok(None) => Ok((rec, None)),
                        Ok(Some(outcome)) => {
                            let delta = WeightDelta {
                                base_checksum: base_checksum.clone(),
                                weight: outcome.weight,
                                value: outcome.params.weight(outcome.weight)?.clone(),
                                provenance: BTreeMap::from([
                                    ("label".to_string(), run.label.clone()),
                                    ("index".to_string(), index.to_string()),
                                    ("seed".to_string(), seed.to_string()),
                                ]),
                            };
                            let rel = Layout::delta(&run.label, index);
                            let sum = write_file(&layout, &rel, &delta_bytes(&delta))?;
                            rec.snapshot = Some(rel.clone());
                            rec.diagnostics = Some(outcome.diagnostics);
                            rec.trajectory = outcome.trajectory;
                            Ok((rec, Some((rel, sum))))
                        }
                        Err(e @ (Error::Io { .. } | Error::Config(_))) => Err(e),
                        Err(e) => {
                            rec.status = EditStatus::Failed;
                            rec.error_code = Some(e.code().to_string());
                            rec.error = Some(e.to_string());
                            Ok((rec, None))
                        }
                    }
                })
                .collect()
        });

        let mut w = Writer::new(&layout);
        let mut lines = String::new();
        let mut summary = EditSummary {
            label: run.label.clone(),
            editor: run.editor,
            ok: 0,
            failures: Vec::new(),
            warnings: 0,
        };
        for r in results {
            let (rec, artifact) = r?;
            if let Some((rel, sum)) = artifact {
                w.artifacts.insert(rel, sum);
            }
            match rec.status {
                EditStatus::Ok => summary.ok += 1,
                EditStatus::Failed => summary.failures.push(EditFailure {
                    index: rec.index,
                    code: rec.error_code.clone().unwrap_or_default(),
                    message: rec.error.clone().unwrap_or_default(),
                }),
            }
            summary.warnings += rec.diagnostics.as_ref().map_or(0, |d| d.warnings.len());
            lines.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            lines.push('\n');
        }
        w.write(&Layout::diagnostics(&run.label), lines.as_bytes())?;
        let notes = BTreeMap::from([
            ("editor".to_string(), run.editor.name().to_string()),
            ("ok".to_string(), summary.ok.to_string()),
            ("failed".to_string(), summary.failures.len().to_string()),
            ("warnings".to_string(), summary.warnings.to_string()),
        ]);
        manifest
            .stages
            .insert(format!("edit:{}", run.label), record(cfg, started, w.artifacts, notes));
        manifest.save(out)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub subject: String,
    pub relation: String,
    pub eval: EditEval,
}

#[derive(Debug, Clone)]
pub struct Skipped {
    pub label: String,
    pub index: usize,
    pub reason: String,
}

/// Per-edit change of one metric between a run and its baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: &'static str,
    /// Mean of (run − baseline), as a fraction.
    pub mean_delta: f64,
    pub higher: usize,
    pub lower: usize,
    pub tied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub label: String,
    pub baseline: String,
    pub pairs: usize,
    pub metrics: Vec<MetricDelta>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<(String, ReportRow)>,
    pub skipped: Vec<Skipped>,
    pub comparisons: Vec<Comparison>,
}

fn per_edit_values(e: &EditEval) -> [f64; 7] {
    [
        e.es as f64,
        e.gs,
        e.ls,
        e.hard.aff,
        e.hard.anf,
        e.random.aff,
        e.random.anf,
    ]
}

fn compare(label: &str, baseline: &str, run: &[EvalRecord], base: &[EvalRecord]) -> Comparison {
    let by_index: BTreeMap<usize, &EvalRecord> = base.iter().map(|r| (r.index, r)).collect();
    let pairs: Vec<([f64; 7], [f64; 7])> = run
        .iter()
        .filter_map(|r| by_index.get(&r.index).map(|b| (per_edit_values(&r.eval), per_edit_values(&b.eval))))
        .collect();
    let metrics = REPORT_COLUMNS
        .iter()
        .enumerate()
        .map(|(m, &metric)| {
            let mut d = MetricDelta {
                metric,
                mean_delta: 0.0,
                higher: 0,
                lower: 0,
                tied: 0,
            };
            for (a, b) in &pairs {
                let diff = a[m] - b[m];
                d.mean_delta += diff;
                match diff.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => d.higher += 1,
                    Some(std::cmp::Ordering::Less) => d.lower += 1,
                    _ => d.tied += 1,
                }
            }
            if !pairs.is_empty() {
                d.mean_delta /= pairs.len() as f64;
            }
            d
        })
        .collect();
    Comparison {
        label: label.to_string(),
        baseline: baseline.to_string(),
        pairs: pairs.len(),
        metrics,
    }
}

/// Report CSV with percentages; the header after `label` is exactly the
/// metric column list.
pub fn report_csv(rows: &[(String, ReportRow)]) -> String {
    let mut s = format!("label,{}\n", REPORT_COLUMNS.join(","));
    for (label, row) in rows {
        let _ = writeln!(s, "{label},{}", row.percent_strings().join(","));
    }
    s
}

pub fn fractions_csv(rows: &[(String, ReportRow)]) -> String {
    let mut s = format!("label,n_edits,{}\n", REPORT_COLUMNS.join(","));
    for (label, row) in rows {
        let vals: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{label},{},{}", row.n_edits, vals.join(","));
    }
    s
}

fn comparison_md(comparisons: &[Comparison]) -> String {
    let mut s = String::from("## Paired comparison\n\n");
    if comparisons.is_empty() {
        s.push_str("No run declares `compare_to`.\n");
        return s;
    }
    for c in comparisons {
        let _ = writeln!(s, "### {} vs {} ({} paired edits)\n", c.label, c.baseline, c.pairs);
        s.push_str("| Metric | mean Δ (pp) | higher | lower | tied |\n|---|---:|---:|---:|---:|\n");
        for m in &c.metrics {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                m.metric,
                format_percent(m.mean_delta),
                m.higher,
                m.lower,
                m.tied
            );
        }
        s.push('\n');
    }
    s
}

fn report_md(rows: &[(String, ReportRow)], comparisons: &[Comparison], skipped: &[Skipped]) -> String {
    let mut s = String::from("# Editing report\n\nPercentages, averaged over edits.\n\n");
    let _ = writeln!(s, "| Run | {} |", REPORT_COLUMNS.join(" | "));
    let _ = writeln!(s, "|---|{}", "---:|".repeat(REPORT_COLUMNS.len()));
    for (label, row) in rows {
        let _ = writeln!(s, "| {label} | {} |", row.percent_strings().join(" | "));
    }
    s.push_str("\n| Run | edits |\n|---|---:|\n");
    for (label, row) in rows {
        let _ = writeln!(s, "| {label} | {} |", row.n_edits);
    }
    s.push('\n');
    s.push_str(&comparison_md(comparisons));
    if !skipped.is_empty() {
        s.push_str("## Skipped edits\n\n");
        for k in skipped {
            let _ = writeln!(s, "- {} #{}: {}", k.label, k.index, k.reason);
        }
    }
    s
}

/// Evaluates the stored snapshots of every selected run.
pub fn eval(cfg: &RunConfig, out: &Path, labels: &[String], threads: Option<usize>) -> Result<EvalSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let runs = cfg.select_runs(labels)?;
    let layout = Layout::new(out);
    let (base, dataset) = load_trained(cfg, &layout)?;
    let opts = EvalOptions {
        thresholds: cfg.eval.thresholds,
    };
    let pool = thread_pool(threads)?;
    let mut w = Writer::new(&layout);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut records: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for run in &runs {
        let results: Vec<Result<std::result::Result<EvalRecord, Skipped>>> = pool.install(|| {
            dataset
                .instances
                .par_iter()
                .enumerate()
                .map(|(index, inst)| {
                    let post = match run.editor {
                        EditorKind::Identity => None,
                        _ => {
                            let rel = Layout::delta(&run.label, index);
                            let path = layout.path(&rel);
                            if !path.exists() {
                                return Ok(Err(Skipped {
                                    label: run.label.clone(),
                                    index,
                                    reason: format!("snapshot {rel} is missing"),
                                }));
                            }
                            Some(load_delta(&path)?.apply(&base)?)
                        }
                    };
                    let eval = evaluate_edit(&base, post.as_ref().unwrap_or(&base), inst, opts)?;
                    Ok(Ok(EvalRecord {
                        index,
                        subject: dataset.symbols.render(&inst.subject)?,
                        relation: inst.relation.clone(),
                        eval,
                    }))
                })
                .collect()
        });
        let mut evaluated = Vec::new();
        for r in results {
            match r? {
                Ok(rec) => evaluated.push(rec),
                Err(s) => skipped.push(s),
            }
        }
        let mut lines = String::new();
        for rec in &evaluated {
            lines.push_str(&serde_json::to_string(rec).expect("record serialises"));
            lines.push('\n');
        }
        w.write(&Layout::records(&run.label), lines.as_bytes())?;
        if !evaluated.is_empty() {
            let evals: Vec<EditEval> = evaluated.iter().map(|r| r.eval.clone()).collect();
            rows.push((run.label.clone(), aggregate_dataset(&evals)?));
        }
        records.insert(run.label.clone(), evaluated);
    }
    let comparisons: Vec<Comparison> = runs
        .iter()
        .filter_map(|r| {
            let baseline = r.compare_to.as_ref()?;
            Some(compare(&r.label, baseline, records.get(&r.label)?, records.get(baseline)?))
        })
        .collect();

    w.write(Layout::REPORT_CSV, report_csv(&rows).as_bytes())?;
    w.write(Layout::REPORT_FRACTIONS, fractions_csv(&rows).as_bytes())?;
    w.write(Layout::REPORT_MD, report_md(&rows, &comparisons, &skipped).as_bytes())?;
    w.write(Layout::COMPARISON_MD, comparison_md(&comparisons).as_bytes())?;

    let notes = BTreeMap::from([
        (
            "runs".to_string(),
            rows.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>().join(","),
        ),
        ("skipped".to_string(), skipped.len().to_string()),
    ]);
    let mut manifest = RunManifest::load_or_new(out, &cfg.hash(), cfg.seed)?;
    manifest.clear("eval");
    manifest.stages.insert("eval".into(), record(cfg, started, w.artifacts, notes));
    manifest.save(out)?;
    Ok(EvalSummary {
        rows,
        skipped,
        comparisons,
    })
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub manifest: RunManifest,
    pub failures: Vec<VerifyFailure>,
    /// Contents of the percentage report, when evaluation has run.
    pub headline: Option<String>,
}

impl ReportSummary {
    pub fn render(&self) -> String {
        let m = &self.manifest;
        let mut s = String::new();
        let _ = writeln!(s, "config hash: {}", m.config_hash);
        let _ = writeln!(s, "master seed: {}", m.seed);
        s.push_str("stages:\n");
        let rank = |name: &str| match name.split(':').next() {
            Some("gen") => 0,
            Some("train") => 1,
            Some("edit") => 2,
            _ => 3,
        };
        let mut stages: Vec<_> = m.stages.iter().collect();
        stages.sort_by_key(|(name, _)| rank(name));
        for (name, rec) in stages {
            let _ = writeln!(s, "  {name:<24} {:>10.3} s  {:>5} files", rec.seconds, rec.artifacts.len());
            for (k, v) in &rec.notes {
                let _ = writeln!(s, "      {k}: {v}");
            }
        }
        let total: usize = m.stages.values().map(|r| r.artifacts.len()).sum();
        if self.failures.is_empty() {
            let _ = writeln!(s, "checksums: all {total} artifacts verify");
        } else {
            let _ = writeln!(s, "checksums: {} of {total} artifacts FAILED", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(s, "  {f}");
            }
        }
        if let Some(h) = &self.headline {
            s.push_str("headline metrics (%):\n");
            for line in h.lines() {
                let _ = writeln!(s, "  {line}");
            }
        }
        s
    }
}

/// Loads a manifest and re-verifies every artifact it lists, relative to the
/// manifest's directory.
pub fn report(manifest_path: &Path) -> Result<ReportSummary> {
    let manifest = RunManifest::load(manifest_path)?;
    let out = manifest_path.parent().unwrap_or(Path::new("."));
    let failures = manifest.verify(out);
    let headline = manifest
        .stages
        .get("eval")
        .filter(|r| r.artifacts.contains_key(Layout::REPORT_CSV))
        .and_then(|_| std::fs::read_to_string(out.join(Layout::REPORT_CSV)).ok());
    Ok(ReportSummary {
        manifest,
        failures,
        headline,
    })
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, out: &Path, threads: Option<usize>) -> Result<EvalSummary> {
    gen(cfg, out)?;
    train(cfg, out)?;
    edit(cfg, out, &[], threads)?;
    eval(cfg, out, &[], threads)
}
