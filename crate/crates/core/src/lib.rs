//! Open-set scoring for dense semantic segmentation.
//!
//! Per-pixel knownness scores come from one of three scorers: the max
//! softmax probability, OpenMax-style Weibull recalibration of the logits
//! (OpenFCN), or per-class principal-subspace log-likelihoods over fused
//! intermediate activations (OpenPCS, with an incremental variant). Low
//! scores mean "unknown". The `eval` module runs leave-one-class-out
//! protocols on top.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod eval;
pub mod fusion;
pub mod ipca;
mod linalg;
pub mod maps;
pub mod openmax;
pub mod pca;
pub mod pipeline;
pub mod softmax;
pub mod synth;
pub mod tensor_store;
pub mod weibull;

pub use maps::{LogitMap, Method, OpenSetPrediction, PriorPrediction, ScoreMap};
pub use tensor_store::{read_scene, write_scene, Scene, Tensor};
