//! Hard-selection aspect-based sentiment analysis at desk scale.
//!
//! Given a tokenized sentence and an aspect (a term span inside the sentence
//! or an abstract category label), the model packs both into one sequence,
//! encodes it with a small trainable transformer, and predicts the aspect's
//! polarity either by soft attention over all sentence tokens or by hard
//! selection of a contiguous opinion snippet whose start/end positions are
//! learned with self-critical policy gradients.
//!
//! Modules follow the pipeline: [`numerics`] (autodiff), [`encoder`]
//! (packing + transformer), [`heads`] (soft / hard / CLS-pooled prediction),
//! [`trainer`] (self-critical + supervised optimization), [`data`] (dataset
//! io, multi-aspect partitioning and synthesis, synthetic corpus generation),
//! [`eval`] (metrics, snippet scoring, visualization) and [`cli`].

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
