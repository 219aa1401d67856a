//! A desk-scale laboratory for studying and removing length bias in process
//! reward models. Everything runs on a synthetic step corpus with a planted
//! length-correctness confound, an eight-coordinate hand-rolled featurizer,
//! and a small tape-based autodiff core, so the full train/debias/evaluate
//! loop completes in seconds and is bit-reproducible from a seed.
//!
//! The pipeline: [`corpus`] plants the confound, [`scorer`] trains a vanilla
//! two-logit reward model that inherits it, [`debias`] removes it three ways
//! (subtractive length penalty, post-hoc bias estimator, joint adversarial
//! training), and [`eval`] measures the damage and the repair via best-of-N
//! selection, within-class reward/length correlations, and duplication twin
//! gaps. [`cli`] wires it all into a config-driven command-line front end.

pub mod cli;
pub mod corpus;
pub mod debias;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod scorer;

pub use error::{Error, Result};
