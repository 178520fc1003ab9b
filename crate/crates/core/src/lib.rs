//! Weak-supervision labeling engine for clinical trial outcomes.
//!
//! Trial registry records and auxiliary signals (news sentiment, stock
//! movement, LLM decisions on abstracts, cross-phase trial linkage) are turned
//! into a matrix of noisy votes by a catalog of labeling functions. The votes
//! are aggregated by majority vote, a matrix-completion data-programming label
//! model, or a supervised random forest, and the result is scored against gold
//! labels.
//!
//! Module map:
//!
//! - [`trial`]: domain records, flat-file ingestion and the selection cascade.
//! - [`signals`]: adapters for auxiliary signal files and the computations on them.
//! - [`lf`]: labeling functions, threshold tuning and the [`lf::LabelMatrix`].
//! - [`linkage`]: cross-phase trial linkage and FDA approval matching.
//! - [`label_model`]: majority vote, data programming and random-forest aggregation.
//! - [`eval`]: agreement metrics and report emission.
//! - [`pipeline`]: config-driven orchestration used by the `cto` binary.

pub mod eval;
pub mod label_model;
pub mod lf;
pub mod linkage;
pub mod pipeline;
pub mod signals;
pub mod text;
pub mod trial;

mod csvutil;

pub use lf::{LabelMatrix, WeakLabel};
pub use trial::{TrialPhase, TrialRecord, TrialStatus};
