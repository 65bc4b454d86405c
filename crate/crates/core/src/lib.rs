//! Vanishing-gradient and Hessian-scaling lab for random deep networks.
//!
//! The crate pairs a closed-form oracle ([`theory`]) with Monte Carlo engines
//! for scalar chains ([`chain`]), multilayer perceptrons ([`mlp`]) and
//! convolutional networks ([`conv`]). The [`harness`] module turns declarative
//! experiment specs into CSV rows.

pub mod chain;
pub mod conv;
pub mod error;
pub mod harness;
pub mod init;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
