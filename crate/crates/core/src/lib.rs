//! Shallow variational bottleneck injection (SVBI).
//!
//! The crate replaces the shallow head of a classifier with a small learned
//! compression model. The compression model has an encoder, a factorized
//! entropy model and a decoder. Quantized latents are range coded and sent
//! from a client process to the server that hosts the classifier tail.

pub mod backbone;
pub mod codec;
pub mod data;
pub mod entropy;
pub mod experiment;
pub mod nn;
pub mod range_coder;
pub mod runtime;
pub mod saliency;
pub mod training;
pub mod tensor;
