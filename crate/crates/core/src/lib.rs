//! Memory-based invariance learning for unsupervised domain adaptation of
//! embedding models.
//!
//! A labeled source domain and an unlabeled target domain share one feature
//! extractor. Each domain keeps an [`memory::ExemplarMemory`] of its samples'
//! features; the target branch is trained with non-parametric softmax losses
//! that make every sample close to itself, to its camera-style counterparts
//! and to its reliable neighbors, while a graph network ([`gpp`]) trained on
//! the source memory decides which neighbors are reliable.

// Parameter checks are written `!(x > 0.0)` on purpose: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gpp;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
