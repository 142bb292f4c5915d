//! Continual-learning laboratory.
//!
//! A small, dependency-light toolkit for studying loss of plasticity in
//! online learners:
//!
//! - [`net`]: dense feed-forward networks with hand-written forward and
//!   backward passes and gain-scaled uniform Kaiming initialization.
//! - [`optim`]: SGD (with optional L2) and Adam with per-weight resettable
//!   state.
//! - [`gnt`]: generate-and-test feature replacement (continual backprop).
//! - [`problems`]: the Bit-Flipping regression stream and online Permuted
//!   MNIST.
//! - [`harness`]: the prequential experiment loop, metrics, sweeps and
//!   aggregation.

pub mod error;
pub mod gnt;
pub mod harness;
pub mod net;
pub mod optim;
pub mod problems;
pub mod rng;

pub use error::{Error, Result};
