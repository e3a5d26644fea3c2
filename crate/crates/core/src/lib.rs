//! Nuclear-norm rank minimization factorization (NRMF) for small CNNs.
//!
//! Train with a Gram-trace penalty on the channel unfoldings of every
//! spatial conv kernel, pick Tucker-2 ranks by cumulative eigenvalue energy,
//! and replace each kernel by a 1×1 / D×D / 1×1 conv triple. An empirical
//! VBMF rank estimator is included as the baseline.

pub mod compress;
pub mod data;
pub mod eig;
pub mod nn;
pub mod nrmf;
pub mod error;
pub mod harness;
pub mod tensor;
pub mod tucker;
pub mod vbmf;

pub use error::{Error, Result};
