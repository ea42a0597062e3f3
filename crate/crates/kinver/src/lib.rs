//! Kinship verification from facial embeddings.
//!
//! Two-stage pipeline: a facial encoder is first pretrained with a
//! supervised contrastive loss over batches of genuine kin pairs drawn by a
//! constraint-respecting sampler (distinct families per batch, least-seen
//! image selection), then a binary classifier is trained on quadratic
//! feature fusions of embedding pairs to predict kin / non-kin. Evaluation
//! reports per-relationship-type accuracy over the 11 kinship labels plus
//! averages.
//!
//! The numeric kernels run data-parallel with rayon by default; build with
//! `--no-default-features` for the sequential fallback. Both produce
//! bit-identical results.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod loss;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
