//! Dual adversarial training at desk scale.
//!
//! This crate trains small convolutional classifiers against an adversarially
//! optimized amplitude generator: images are decomposed into frequency-domain
//! amplitude and phase, the generator proposes adversarial amplitudes that are
//! mixed into the originals and recombined with the untouched phase, and the
//! classifier and generator are optimized jointly — the classifier descending
//! and the generator ascending the same objective. Around that core live
//! ℓ∞ attacks (FGSM, PGD, and a KL-boosted variant), baseline trainers
//! (standard, PGD-AT, TRADES), split-bank batch normalization, evaluation
//! splits that isolate amplitude-borne from phase-borne perturbations, and a
//! synthetic-feature check that amplitude-noise augmentation drives the
//! corresponding linear weights toward zero.
//!
//! Everything runs in f64 on the CPU, single-threaded and bit-reproducible
//! given a seed. See the `examples/` directory for one runnable entry point
//! per capability, or the `datk` binary for the experiment CLI.

pub mod attacks;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod models;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
