//! Deterministic desk-scale simulator of sequence-parallel long-context
//! prefill, including anchor/passing-block approximate attention and the
//! exact ring, Ulysses and star baselines.

pub mod compressor;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod layout;
pub mod model;
pub mod simnet;
pub mod strategies;
pub mod tensor;

pub use error::{ApbError, Result};
