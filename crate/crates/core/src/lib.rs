//! Numerical toolkit for vast-vocabulary classification.
//!
//! - [`tensor`]: dense matrices, a reverse-mode tape, attention layers.
//! - [`losses`]: sigmoid cross-entropy, focal and asymmetric loss gradients.
//! - [`dilution`]: positive/hard-negative gradient ratios and a logit-level
//!   training simulation.
//! - [`taxonomy`]: category trees, hierarchical query aggregation, parent
//!   masking and self-attention relations.
//! - [`selection`]: cross-attention query enhancement, top-K category
//!   selection and category-level recall.
//! - [`synth`]: seeded synthetic taxonomies, prototypes and samples.
//! - [`selfcheck`]: the oracle suite behind `vastvocab selfcheck`.
//! - [`cli`]: the `vastvocab` command line, run manifests and replay.

pub mod cli;
pub mod dilution;
pub mod error;
pub mod io;
pub mod losses;
pub mod selection;
pub mod selfcheck;
pub mod synth;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result, TaxonomyError};
