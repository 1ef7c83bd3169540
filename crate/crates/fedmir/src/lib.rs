//! Deterministic simulator of clustered personalized federated learning.
//!
//! The library is organized as a stack: [`numkit`] provides flat-parameter
//! models and their loss/gradient kernels, [`datagen`] builds group-skewed
//! client populations, [`fedcore`] runs the clustered training loop with
//! privacy-aware cluster selection, [`redteam`] estimates per-cluster
//! membership-inference risk with shadow models, and [`metrics`] evaluates
//! accuracy, fairness, privacy violations, and convergence.
//!
//! Everything is seeded. Two runs with the same inputs and seed produce
//! bit-identical models and metrics, regardless of thread count.

pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod metrics;
pub mod numkit;
pub mod redteam;
pub mod stream;

pub use error::{Error, Result};
