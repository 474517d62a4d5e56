//! Block-wise ADMM training for feed-forward networks.
//!
//! A network is cut into blocks joined by free decoupling variables `Z_t` and
//! scaled duals `U_t`. Each block is trained with gradients that stay inside it,
//! while the `Z_t` carry error signals between blocks. The crate provides:
//!
//! - [`batch`]: full-batch training with matrix duals and minibatch parameter steps.
//! - [`online`]: streaming training with re-initialized `z` and scalar duals.
//! - [`standard`]: the classic per-layer ADMM with closed-form sub-problems.
//! - [`nmf`]: a non-negative factorization insert between two blocks.
//! - [`schedule`]: adaptive penalty schedule wrapped around the batch trainer.
//!
//! Samples are stored as matrix columns everywhere (`[dim, samples]`).

pub mod error;
pub mod tensor;
pub mod rng;
pub mod optim;
pub mod gradcheck;
pub mod blocks;
pub mod loss;
pub mod metrics;
pub mod data;
pub mod batch;
pub mod online;
pub mod linalg;
pub(crate) mod par;
pub mod standard;
pub mod nnls;
pub mod nmf;
pub mod schedule;
pub mod baseline;
pub mod config;
pub mod checkpoint;
pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
