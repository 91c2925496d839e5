//! Training, pruning and formal verification of small fully-connected ReLU
//! classifiers.
//!
//! The usual flow is: [`training::train`] a network with batch-norm, shrink
//! it with [`pruning::neuron_pruning`] or [`pruning::weight_pruning`], fold
//! the batch-norm layers away with [`Network::fuse_batchnorm`], then ask
//! [`verify`] whether an L∞ ball around an image contains an adversarial
//! example.

pub mod attack;
pub mod backprop;
pub mod data;
pub mod error;
pub mod experiment;
pub mod network;
pub mod pruning;
pub mod serialize;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use network::{Architecture, Block, Network};
pub use tensor::{Matrix, Vector};
