//! Linkage of K ≥ 2 datafiles without shared identifiers.
//!
//! Record K-tuples are classified into the `B_K` matching classes, one per
//! set partition of `{1..K}`. Comparison data are per-field agreement
//! partitions; a latent-class mixture fit by EM supplies class posteriors;
//! a generalised Fellegi–Sunter rule declares memberships subject to
//! per-class error budgets.

pub mod comparison;
pub mod decision;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod lattice;
pub mod pipeline;
pub mod synthetic;

pub use error::{LinkError, Result};
pub use lattice::{bell_number, enumerate_patterns, Partition, PatternSpace, MAX_K};
