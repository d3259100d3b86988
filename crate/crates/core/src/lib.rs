//! Structural-probing laboratory for three-condition wh-movement stimuli.
//!
//! The pipeline runs in stages, each a module:
//!
//! - [`stimgen`]: combinatorial lexicon, seeded item sampling, realization
//!   into bare / infinitival / finite stimuli with tagged word positions.
//! - [`udtree`]: CoNLL-U ingestion, undirected tree distances and the
//!   per-item, per-pair UD-distance invariance filter.
//! - [`store`]: the activation-store file format, subword pooling and
//!   per-corpus standardization.
//! - [`probe`]: per-layer structural probes trained on gold tree distances,
//!   with Spearman / UUAS evaluation.
//! - [`effects`]: treatment-coded OLS with item-clustered errors,
//!   Benjamini–Hochberg FDR and cluster-bootstrap intervals.
//! - [`reporting`]: canonical-layer selection and robustness summaries.
//! - [`patchlab`]: activation-patching plans and Δβ scoring.
//! - [`synthetic`]: planted-effect fixture models for tests and dry runs.

pub mod effects;
pub mod error;
pub mod labels;
pub mod patchlab;
pub mod probe;
pub mod reporting;
pub mod stimgen;
pub mod store;
pub mod synthetic;
pub mod udtree;

pub use error::{Error, Result};
pub use labels::{Condition, Contrast, Pair, Role, StimulusKey};
