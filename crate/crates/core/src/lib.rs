//! Core algorithms for Catintell, a two-stage GAN pipeline for cataract-like
//! degradation synthesis and fundus image restoration.
//!
//! Everything in this crate is deterministic and single-threaded: tensors are
//! `f64` [`ndarray`] arrays, all randomness flows through seeded ChaCha
//! generators, and the reverse-mode tape in [`tape`] records operations in a
//! fixed order so that two runs with equal seeds produce bit-identical
//! parameters.
//!
//! The companion `catintell` crate layers file formats, dataset handling, the
//! trainer and the CLI on top of these building blocks.

pub mod baseline;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perceptual;
pub mod rng;
pub mod schedule;
pub mod tape;

pub use error::{CoreError, Result};
pub use tape::Arr;
