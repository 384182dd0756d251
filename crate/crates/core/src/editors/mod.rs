//! Single-fact editors (projected fine-tuning and rank-one MLP rewriting)
//! and the answer-preservation objective that can be coupled into either.

mod app;
mod ft;
mod outcome;
mod rome;

pub use app::{build_app_terms, APPConfig};
pub use ft::{apply_ft, FTConfig};
pub use outcome::{EditDiagnostics, EditOutcome};
pub use rome::{
    apply_rome, compute_key, estimate_covariance, optimize_value, optimize_value_edited, rank_one_update, rank_one_update_with, sample_prompts,
    Covariance, ROMEConfig, RidgeMode, RomeEditor, ValueOptimizer, ValueSearch, ValueSpace,
};
