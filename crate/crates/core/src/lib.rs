//! Dual distance center loss (DDCL) for deep metric learning.
//!
//! The crate is split into:
//!
//! * [`loss`]: forward and backward kernels for the Euclidean center loss,
//!   the Pearson center loss, the center isolation loss, softmax
//!   cross-entropy and their weighted combinations, plus the closed-form
//!   stability functions of the Pearson exponent.
//! * [`trainer`]: a small fully connected embedder, Adam, a step-decay
//!   schedule, classifier head initializers, checkpoints and the training loop.
//! * [`retrieval`]: open-set query/gallery evaluation (AP, mAP, CMC).
//! * [`dataset`]: synthetic open-set data and embedding table IO.
//! * [`diagnostics`]: center-geometry histograms, training traces,
//!   hyperparameter sweeps and the stability map.
//! * [`gradcheck`]: the finite-difference gradient suite.
//! * [`cli`]: the `ddcl` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod retrieval;
pub mod trainer;

pub use error::{DdclError, Result};
