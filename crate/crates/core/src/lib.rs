//! Consistency-constrained multitask classification.
//!
//! A classifier predicts a task label together with binary supporting
//! evidence labels. Domain constraints say which evidence is incompatible
//! with each task class and which evidence directly supports it. This crate
//! provides:
//!
//! - [`constraints`]: constraint specs and the consistency check,
//! - [`metrics`]: inconsistency measures on predicted tuples,
//! - [`autodiff`]: a small reverse-mode differentiation tape,
//! - [`model`]: a shared-backbone MLP with task and evidence heads,
//! - [`losses`]: weighted cross entropy and the consistency regularizers,
//! - [`synthdata`]: synthetic datasets with consistent ground truth,
//! - [`trainer`]: Adam training with per-step label sampling,
//! - [`harness`]: sweeps and report files behind the command-line tool.

pub mod autodiff;
pub mod constraints;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod trainer;

pub use constraints::{check_consistent, derive_incompatible, parse_spec, ConstraintSpec, EvidenceVector, Verdict};
pub use error::{Error, Result};
