//! Grounded prompt datasets and robustness evaluation for schema-guided
//! dialogue state tracking.
//!
//! The pipeline runs roughly in this order:
//!
//! 1. [`corpus`] loads SGD-style schema and dialogue files.
//! 2. [`mining`] extracts knowledge-seeking turns per slot and intent and
//!    turns human (or automatic) selections into a [`mining::TurnLibrary`].
//! 3. [`promptgen`] linearizes schema + library + dialogue prefix into
//!    prompt/context/target records.
//! 4. [`augment`] produces EDA, backtranslation, KST and variant-merged
//!    training sets.
//! 5. [`backend`] talks to a model (or an oracle), [`eval`] scores it and
//!    [`ensemble`] runs grounded prompt ensembling.

pub mod augment;
pub mod backend;
pub mod corpus;
pub mod ensemble;
pub mod eval;
pub mod mining;
pub mod promptgen;
pub mod seed;
pub mod text;

pub use corpus::{Corpus, DialogueState, SchemaVariant, Service};
pub use mining::TurnLibrary;
pub use promptgen::{LinearizedExample, PromptFormat, PromptIndexMap};
