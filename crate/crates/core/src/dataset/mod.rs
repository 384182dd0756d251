//! Appending-edit instances, a synthetic fact world to train on, probability
//! filtering against a trained model, and the on-disk dataset format.

mod filter;
mod instance;
mod io;
mod symbols;
mod world;

pub use filter::{fidelity, filter_dataset, filter_instance, FilterMode, FilterSummary};
pub use instance::{FalseSet, LocalityProbe, PeakInstance, TokenSeq, Violation};
pub use io::{load_corpus, load_instances, save_corpus, save_instances, Dataset, SCHEMA_VERSION};
pub use symbols::{SymbolTable, ISA_SYMBOL};
pub use world::{generate_world, SubjectPlacement, SymbolRange, SyntheticWorldConfig, VocabLayout, WorldBundle};

#[cfg(test)]
pub(crate) use instance::fixtures;
