//! Adversarial magnitude perturbations against a spectrogram burst detector.
//!
//! Signals are analysed with a windowed FFT, mapped to a dB grayscale image
//! and fed to a small single-shot grid detector. Attacks perturb the STFT
//! magnitudes, keep the clean phase, and resynthesize a real time signal.

pub mod attack;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod norm_theory;
pub mod signal;
pub mod spectrogram;
pub mod stft;

pub use error::{Error, Result};
