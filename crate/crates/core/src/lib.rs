//! Object-aware long/short-range spatial alignment for few-shot
//! fine-grained classification, on a small self-contained tensor engine.

pub mod ablate;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod export;
pub mod foe;
pub mod kv;
pub mod lsc;
pub mod meta;
pub mod nn;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
