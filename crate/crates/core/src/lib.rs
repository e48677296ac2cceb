//! Core algorithms for discrete diffusion timestep (DDT) image tokenization
//! and a unified autoregressive model over mixed text/visual vocabularies.
//!
//! The crate is `no_std` (with `alloc`): it owns the numerics, the models,
//! their training steps and the evaluation procedures. File formats, image
//! decoding and the command-line tool live in the `ddt` crate.
#![no_std]
// index loops mirror the math; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod config;
pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod quantizer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Matrix;
