//! Learned distraction-aware banded retrieval.
//!
//! A small set-transformer reads the similarity scores of a candidate
//! passage pool, predicts two Beta distributions, and samples a quantile
//! band `[q_L, q_U]` of the similarity-ranked list to hand to an answering
//! model. The policy is trained with REINFORCE against a reward oracle,
//! either the synthetic distraction environment in [`environ`] or an
//! external judge behind [`environ::AnswerOracle`].
//!
//! The crate is `no_std` with `alloc`; file formats, the oracle subprocess
//! client and the command line live in the `ldar-lab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diffcore;
pub mod environ;
mod error;
pub mod eval;
pub mod policy;
pub mod rng;
pub mod strategies;
pub mod trainer;

pub use error::{Error, Result};
