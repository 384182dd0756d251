//! Configuration, stages and reports of the end-to-end pipeline: world
//! generation, base-model training and filtering, editing, evaluation and the
//! manifest that ties the output directory together.

mod config;
mod manifest;
mod stages;

pub use config::{default_runs, edit_seed, EditorKind, EvalConfig, RunConfig, RunSpec};
pub use manifest::{sha256_bytes, sha256_file, RunManifest, StageRecord, VerifyFailure, MANIFEST_FILE};
pub use stages::{
    edit, eval, fractions_csv, gen, report, report_csv, run_all, train, Comparison, EditFailure, EditRecord, EditStatus,
    EditSummary, EvalRecord, EvalSummary, GenSummary, Layout, MetricDelta, ReportSummary, Skipped, TrainSummary,
};
