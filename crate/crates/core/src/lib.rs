//! A sparse-training laboratory.
//!
//! Iterative magnitude pruning (with and without weight rewinding) and
//! SWAMP, which trains several SWA particles from a shared matching ticket,
//! averages them and prunes the average. Around those drivers sit the tools
//! used to study them: linear barrier scans, planar loss surfaces, Hessian
//! trace estimates and ensemble evaluation.

pub mod autograd;
pub mod data;
pub mod experiments;
mod error;
pub mod landscape;
pub mod lottery;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
