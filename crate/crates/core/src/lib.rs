//! Toy-scale laboratory for testing whether LLM unlearning survives
//! post-training weight quantization, and whether low-rank adapters help.

pub mod artifact;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod lora;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
