//! End-to-end plumbing around `catintell-core`: image file I/O, corpus and
//! fold management, the toy data generator, checkpoint containers, the
//! two-phase GAN trainer, metric reports, and the command-line interface.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod toy;
pub mod trainer;

pub use error::{AppError, Result};
