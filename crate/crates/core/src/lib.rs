//! Desk-scale vision-language-action policy.
//!
//! A toy vision-language backbone produces a fused token sequence; an
//! integration module appends the embedded robot state; a cross-attention
//! diffusion transformer, trained by flow matching, maps noise to action
//! chunks. Everything runs on a small from-scratch reverse-mode autodiff.

pub mod ablation;
pub mod attnviz;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod expert;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod heap;
pub mod integration;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
