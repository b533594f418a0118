//! Context-aware zero-shot classification of image regions.
//!
//! A candidate class `i` for a region is scored by three separately trained
//! energy functions, each read as an unnormalized log-probability:
//!
//! * a visual scorer, the cosine between a projected region descriptor and the
//!   class embedding `w_i`;
//! * a context scorer, a two-layer perceptron over the concatenation of an
//!   averaged context representation and `w_i`;
//! * a prior scorer, a two-layer perceptron over `w_i` alone.
//!
//! At inference the three log-scores are combined with scalar exponents tuned
//! on validation data, and rankings are evaluated with the Mean First Relevant
//! (MFR) metric, Recall@k and MRR. Count-based oracles and a synthetic world
//! generator provide reference points with known ground truth.

pub mod cli;
pub mod components;
pub mod datamodel;
pub mod diffprims;
pub mod embeddings;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod oracles;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
