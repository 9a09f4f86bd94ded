//! Narrow-band multichannel speech separation.
//!
//! Each STFT frequency of a multichannel mixture is processed as an
//! independent sequence by one shared network; the per-frequency outputs
//! at the same output position are bound into full-band speaker spectra
//! and trained with a full-band permutation-invariant SI-SDR loss.

pub mod config;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod narrowband;
pub mod network;
pub mod normalization;
pub mod simulator;
pub mod stft;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
