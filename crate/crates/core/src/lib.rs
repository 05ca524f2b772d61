//! Differentially private model compression at desk scale.
//!
//! DPSGD fine-tuning, private knowledge distillation and private iterative
//! magnitude pruning (structured and unstructured) for small layered
//! classifiers, with a Rényi-DP accountant that tracks spend across phases.

pub mod accountant;
pub mod compress;
pub mod dp;
pub mod harness;
pub mod model;
pub mod tensor;
