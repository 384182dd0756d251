//! Knowledge-appending laboratory.
//!
//! * [`microlm`]: micro transformer with exact gradients and activation patching.
//! * [`dataset`]: appending-edit instances, a synthetic fact world, filtering.
//! * [`editors`]: fine-tuning and rank-one editors, with optional
//!   preservation/prevention objectives.
//! * [`metrics`]: efficacy, generalization, locality and the additivity family.
//! * [`pipeline`]: configuration, stages and reports behind the `peaklab` CLI.

pub mod dataset;
pub mod editors;
pub mod error;
pub mod metrics;
pub mod microlm;
pub mod pipeline;

pub use error::{Error, Result};
