//! File formats, dataset IO, configuration and the command-line driver for
//! the DDT tokenizer and its token language model.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod imageio;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod tokens;

pub use ddt_core;
pub use error::{DdtError, Result};
