//! Cascaded deep factorization of speech frames.
//!
//! Frame-level linguistic, speaker and emotion factors are inferred by a
//! sequence of networks, each conditioned on the factors inferred before it,
//! and the log spectrum is rebuilt as the sum of three factor-specific
//! component spectra.
//!
//! Module map:
//!
//! - [`dsp`]: WAV input, log mel filterbank and log spectrum features.
//! - [`nn`]: layers, gradients, optimizer and model files.
//! - [`models`]: the factor network builders and factor extraction.
//! - [`synthcorpus`]: a labelled corpus obeying the additive log-spectral law.
//! - [`cascade`]: sequential stage training and factor caching.
//! - [`eval`]: d-vector scoring, identification, ACC/MAP and PCA.
//! - [`reconstruct`]: the three spectrum generators and their composition.

pub mod cascade;
pub mod dsp;
mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod nn;
pub mod reconstruct;
pub mod rng;
pub mod synthcorpus;

pub use error::{Error, Result};
