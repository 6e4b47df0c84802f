//! Relationship between a magnitude perturbation in the time-frequency domain
//! and the resulting time-domain perturbation: the sqrt(3/N) bound constant,
//! the budget conversion it implies, and empirical checks of the bound and of
//! the vector-sum step it rests on.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::{l2, SignalBuffer};
use crate::stft::{recombine, split, MagnitudeMatrix, RealMatrix, StftEngine};

/// sqrt(3 / N) for window length N.
pub fn bound_constant(n_fft: usize) -> f64 {
    (3.0 / n_fft as f64).sqrt()
}

/// Time-domain budget ratio matching a time-frequency ratio `alpha`.
pub fn alpha_prime(alpha: f64, n_fft: usize) -> f64 {
    bound_constant(n_fft) * alpha
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    /// ||x1 - istft(stft(x))||, the perturbation-induced change.
    pub delta_norm: f64,
    /// ||x1 - x||, including reconstruction loss.
    pub delta_vs_original: f64,
    pub beta_norm: f64,
    pub rhs: f64,
    /// ||istft(stft(x)) - x||.
    pub roundtrip_floor: f64,
    /// delta_norm <= max(rhs, roundtrip_floor) + 1e-9.
    pub holds: bool,
    /// delta_norm / rhs (infinite when rhs is 0 and delta is not).
    pub slack_ratio: f64,
}

/// Evaluates the bound for `perturbed_mag` against the clean magnitudes of
/// `original`, reconstructing with the clean phase.
pub fn verify_bound(original: &SignalBuffer, perturbed_mag: &MagnitudeMatrix, engine: &StftEngine) -> Result<BoundCheck> {
    let y = engine.forward(original)?;
    let (mag, phase) = split(&y);
    if perturbed_mag.inner().shape() != mag.inner().shape() {
        return Err(Error::Dimension(format!(
            "perturbed magnitudes {:?} vs clean {:?}",
            perturbed_mag.inner().shape(),
            mag.inner().shape()
        )));
    }
    let beta = perturbed_mag.inner().sub(mag.inner())?;
    let len = original.len();
    let sr = original.sample_rate();
    let clean_rt = engine.inverse(&y, len)?.signal;
    let x1 = engine
        .inverse(&recombine(perturbed_mag, &phase, *engine.config(), sr)?, len)?
        .signal;
    let diff = |a: &[f64], b: &[f64]| l2(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
    let delta_norm = diff(x1.samples(), clean_rt.samples());
    let delta_vs_original = diff(x1.samples(), original.samples());
    let roundtrip_floor = diff(clean_rt.samples(), original.samples());
    let beta_norm = beta.norm();
    let rhs = bound_constant(engine.config().n_fft) * beta_norm;
    let slack_ratio = if rhs > 0.0 {
        delta_norm / rhs
    } else if delta_norm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(BoundCheck {
        delta_norm,
        delta_vs_original,
        beta_norm,
        rhs,
        roundtrip_floor,
        holds: delta_norm <= rhs.max(roundtrip_floor) + 1e-9,
        slack_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorSumCheck {
    /// |sum a_i e^{j theta_i}|^2
    pub lhs: f64,
    /// 3 * sum a_i^2
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates |V|^2 <= 3 * sum a_i^2 for V = sum a_i e^{j theta_i}.
pub fn vector_sum_inequality_check(magnitudes: &[f64], angles: &[f64]) -> Result<VectorSumCheck> {
    if magnitudes.len() != angles.len() {
        return Err(Error::Dimension(format!(
            "{} magnitudes, {} angles",
            magnitudes.len(),
            angles.len()
        )));
    }
    let (mut re, mut im) = (0.0, 0.0);
    for (&a, &t) in magnitudes.iter().zip(angles) {
        re += a * t.cos();
        im += a * t.sin();
    }
    let lhs = re * re + im * im;
    let rhs = 3.0 * magnitudes.iter().map(|a| a * a).sum::<f64>();
    Ok(VectorSumCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    /// Requested time-frequency ratio ||beta|| / ||y||.
    pub ratio: f64,
    pub check: BoundCheck,
}

/// Random conjugate-symmetric magnitude perturbations of one signal. Trial 0
/// is the zero perturbation; the others draw a ratio log-uniformly in
/// [1e-3, 1e-1] and a Gaussian direction, clamping magnitudes at zero.
pub fn monte_carlo(signal: &SignalBuffer, engine: &StftEngine, trials: usize, seed: u64) -> Result<Vec<TrialRow>> {
    let y = engine.forward(signal)?;
    let (mag, _) = split(&y);
    let y_norm = mag.norm();
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let ratio = if trial == 0 {
                0.0
            } else {
                10f64.powf(rng.random_range(-3.0..-1.0))
            };
            let (bins, frames) = mag.inner().shape();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut t = RealMatrix::from_vec(bins, frames, (0..bins * frames).map(|_| normal.sample(&mut rng)).collect())?;
            t.mirror_positive_half();
            let tn = t.norm();
            if tn > 0.0 {
                t.scale(ratio * y_norm / tn);
            }
            let perturbed: Vec<f64> = mag
                .inner()
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            let perturbed = MagnitudeMatrix::new(RealMatrix::from_vec(bins, frames, perturbed)?)?;
            Ok(TrialRow {
                trial,
                ratio,
                check: verify_bound(signal, &perturbed, engine)?,
            })
        })
        .collect()
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from("trial,beta_norm,delta_norm,rhs,slack_ratio,holds\n");
    for r in rows {
        let c = &r.check;
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            r.trial, c.beta_norm, c.delta_norm, c.rhs, c.slack_ratio, c.holds
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackSummary {
    pub trials: usize,
    pub violations: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// Summary of the slack-ratio distribution over trials with a non-zero
/// perturbation.
pub fn summarize(rows: &[TrialRow]) -> SlackSummary {
    let mut s: Vec<f64> = rows
        .iter()
        .filter(|r| r.check.beta_norm > 0.0)
        .map(|r| r.check.slack_ratio)
        .collect();
    s.sort_by(f64::total_cmp);
    let pick = |q: f64| if s.is_empty() { f64::NAN } else { s[((s.len() - 1) as f64 * q).round() as usize] };
    SlackSummary {
        trials: rows.len(),
        violations: rows.iter().filter(|r| !r.check.holds).count(),
        min: pick(0.0),
        median: pick(0.5),
        max: pick(1.0),
    }
}
