//! One-shot text field labeling for templated documents.
//!
//! Given a single labeled *support* document and an unlabeled *query* document
//! from the same template family, this crate assigns a field label to every
//! text region of the query. Static text regions (landmarks) are matched
//! between the two documents by content; every other region is a candidate
//! field. Two attention heads score candidates against per-label prototypes
//! built from the support document — one over landmark-to-field geometry, one
//! over field-to-field geometry — and a fixed number of belief-propagation
//! steps over a sparse visibility graph turns the per-edge tables into final
//! per-field label distributions. The whole pipeline is differentiable via a
//! small reverse-mode tape, so the two scoring MLPs train end-to-end from
//! labeled document pairs.
//!
//! Module map:
//! - [`geometry`]: boxes, normalized pair features, ray casting, visibility.
//! - [`graph`]: documents, landmark matching, graph construction, stats.
//! - [`tensor`]: tensors, the autodiff tape, MLPs, and the SGD optimizer.
//! - [`model`]: prototypes, attention scores, belief propagation, prediction.
//! - [`train`]: batch sampling, the training loop, checkpoints.
//! - [`eval`]: pairwise evaluation protocol, reports, confusion matrices.
//! - [`data`]: document JSON schema, dataset directories, synthetic generator.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
