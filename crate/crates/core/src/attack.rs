//! Magnitude-domain adversarial examples: PGD with element clipping, step
//! decay and an L2-ratio budget; single-step FGM; and a random-noise baseline
//! at the same budget. All three keep the clean phase and invert with the
//! weighted overlap-add ISTFT.

use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::{attack_loss, decode, detect_signal_auto, DetectorModel};
use crate::error::{Error, Result};
use crate::norm_theory::bound_constant;
use crate::signal::{l2, SignalBuffer};
use crate::spectrogram::{grayscale_grad, to_grayscale, DbMapping};
use crate::stft::{recombine, split, MagnitudeMatrix, PhaseMatrix, RealMatrix, StftEngine};

pub const MAX_DECAY_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackMethod {
    Fgm,
    Pgd,
    RandomNoise,
}

impl AttackMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::Fgm => "FGM",
            AttackMethod::Pgd => "PGD",
            AttackMethod::RandomNoise => "RN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgm" => Some(AttackMethod::Fgm),
            "pgd" => Some(AttackMethod::Pgd),
            "rn" | "random" | "randomnoise" => Some(AttackMethod::RandomNoise),
            _ => None,
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which bins enter the L2 norms of the budget and the reported ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    /// All N bins, negative frequencies included.
    Full,
    /// Bins 0..N/2 only.
    PositiveHalf,
}

impl NormScope {
    pub fn norm(self, m: &RealMatrix) -> f64 {
        match self {
            NormScope::Full => m.norm(),
            NormScope::PositiveHalf => {
                let half = m.bins() / 2;
                let mut acc = 0.0;
                for f in 0..m.frames() {
                    for k in 0..half {
                        acc += m.get(k, f).powi(2);
                    }
                }
                acc.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Budget ||beta|| <= alpha * ||y||.
    pub alpha: f64,
    pub n_iter: usize,
    /// Per-step L2 size; defaults to 0.2 * alpha * ||y||.
    pub step_eps: Option<f64>,
    /// Element-wise step bound; defaults to 10 x the median clean magnitude.
    pub clip_eps: Option<f64>,
    pub decay: f64,
    pub lambda: f64,
    pub norm_scope: NormScope,
    /// PGD evaluates the stopping test and the gradient on the magnitudes of
    /// the resynthesized signal, |stft(istft(y_n))|, instead of on y_n. The
    /// two differ because a perturbed magnitude matrix is generally not the
    /// STFT of any signal.
    pub resynthesis_aware: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(method: AttackMethod, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            n_iter: 50,
            step_eps: None,
            clip_eps: None,
            decay: 0.5,
            lambda: 1.0,
            norm_scope: NormScope::Full,
            resynthesis_aware: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("attack.alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("attack.decay must lie in (0, 1), got {}", self.decay)));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("attack.n_iter must be at least 1".into()));
        }
        if self.step_eps.is_some_and(|e| e <= 0.0) || self.clip_eps.is_some_and(|e| e <= 0.0) {
            return Err(Error::Config("attack.step_eps and attack.clip_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// No detections remain in the perturbed spectrogram.
    Vanished,
    /// Iteration limit reached (or no gradient to follow).
    MaxIter,
}

impl Termination {
    pub fn tag(self) -> &'static str {
        match self {
            Termination::Vanished => "vanished",
            Termination::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub method: AttackMethod,
    pub alpha: f64,
    pub iterations_used: usize,
    /// ||beta|| / ||y||.
    pub tf_ratio: f64,
    /// ||x' - x|| / ||y||.
    pub time_ratio: f64,
    /// ||x' - x|| / ||x||.
    pub signal_ratio: f64,
    /// sqrt(3/N) * ||beta||.
    pub bound_rhs: f64,
    /// Detections of the clean signal.
    pub detections_before: usize,
    /// Detections after re-analysing the adversarial time signal.
    pub detections_after: usize,
    pub terminated_by: Termination,
    /// Bins where the non-negativity clamp bound.
    pub clamped_bins: usize,
    /// Imaginary residue of the inverse transform.
    pub imag_residue: f64,
    /// Vanishing loss before each accepted PGD step and after the last one.
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub signal: SignalBuffer,
    pub perturbed_magnitude: MagnitudeMatrix,
    pub report: AttackReport,
}

/// Element-wise clamp to [-clip_eps, clip_eps].
pub fn clip2(step: &mut RealMatrix, clip_eps: f64) {
    step.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-clip_eps, clip_eps));
}

/// Clean analysis of one signal shared by every attack on it.
struct CleanState {
    mag: MagnitudeMatrix,
    phase: PhaseMatrix,
    norm: f64,
    mapping: DbMapping,
}

fn analyse(signal: &SignalBuffer, engine: &StftEngine, mapping: Option<&DbMapping>, scope: NormScope) -> Result<CleanState> {
    let y = engine.forward(signal)?;
    let (mag, phase) = split(&y);
    let mapping = mapping.copied().unwrap_or_else(|| DbMapping::from_magnitude(&mag));
    let norm = scope.norm(mag.inner());
    Ok(CleanState { mag, phase, norm, mapping })
}

/// Vanishing loss, its gradient on the magnitude matrix and the detection
/// count of the current magnitudes under the frozen mapping.
fn loss_and_gradient(model: &DetectorModel, mag: &MagnitudeMatrix, mapping: &DbMapping, lambda: f64) -> Result<(f64, RealMatrix, usize)> {
    let image = to_grayscale(mag, mapping);
    let (raw, tape) = model.forward_taped(&image)?;
    let cfg = model.config();
    let detections = decode(&raw, cfg.conf_thresh, cfg.nms_iou).len();
    let (loss, d_raw) = attack_loss(&raw, &[], lambda);
    let pixel_grad = model
        .backward(&tape, &d_raw, None, true)
        .expect("input gradient requested");
    let g = grayscale_grad(mag, mapping, &pixel_grad)?;
    Ok((loss, g, detections))
}

/// Gradient of the vanishing loss with respect to the full magnitude matrix.
pub fn magnitude_gradient(model: &DetectorModel, mag: &MagnitudeMatrix, mapping: &DbMapping, lambda: f64) -> Result<(f64, RealMatrix)> {
    let (l, g, _) = loss_and_gradient(model, mag, mapping, lambda)?;
    Ok((l, g))
}

/// `base + step`, clamped at zero. Returns the matrix and the clamp count.
fn apply(base: &RealMatrix, step: &RealMatrix, sign: f64) -> (RealMatrix, usize) {
    let mut clamped = 0;
    let data = base
        .as_slice()
        .iter()
        .zip(step.as_slice())
        .map(|(&a, &b)| {
            let v = a + sign * b;
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    (RealMatrix::from_vec(base.bins(), base.frames(), data).expect("shape"), clamped)
}

fn finish(
    model: &DetectorModel,
    original: &SignalBuffer,
    engine: &StftEngine,
    clean: &CleanState,
    perturbed: RealMatrix,
    mut report: AttackReport,
    scope: NormScope,
) -> Result<AdversarialExample> {
    let perturbed = MagnitudeMatrix::new(perturbed)?;
    let sr = original.sample_rate();
    let rec = engine.inverse(&recombine(&perturbed, &clean.phase, *engine.config(), sr)?, original.len())?;
    let beta = perturbed.inner().sub(clean.mag.inner())?;
    let beta_norm = scope.norm(&beta);
    let diff: Vec<f64> = rec.signal.samples().iter().zip(original.samples()).map(|(a, b)| a - b).collect();
    let denom = if clean.norm > 0.0 { clean.norm } else { 1.0 };
    report.tf_ratio = beta_norm / denom;
    report.time_ratio = l2(&diff) / denom;
    report.signal_ratio = l2(&diff) / original.norm().max(f64::MIN_POSITIVE);
    report.bound_rhs = bound_constant(engine.config().n_fft) * beta_norm;
    report.imag_residue = rec.imag_residue;
    report.detections_after = detect_signal_auto(model, &rec.signal, engine)?.len();
    Ok(AdversarialExample {
        signal: rec.signal,
        perturbed_magnitude: perturbed,
        report,
    })
}

fn empty_report(method: AttackMethod, alpha: f64) -> AttackReport {
    AttackReport {
        method,
        alpha,
        iterations_used: 0,
        tf_ratio: 0.0,
        time_ratio: 0.0,
        signal_ratio: 0.0,
        bound_rhs: 0.0,
        detections_before: 0,
        detections_after: 0,
        terminated_by: Termination::MaxIter,
        clamped_bins: 0,
        imag_residue: 0.0,
        loss_trace: Vec::new(),
    }
}

/// Scales `diff` (a deviation from the clean magnitudes) onto the budget
/// sphere when it lies outside it.
fn project(clean: &RealMatrix, candidate: &RealMatrix, budget: f64, scope: NormScope) -> RealMatrix {
    let diff = candidate.sub(clean).expect("shape");
    let n = scope.norm(&diff);
    if n <= budget {
        return candidate.clone();
    }
    let s = budget / n * (1.0 - 1e-12);
    let data = clean
        .as_slice()
        .iter()
        .zip(diff.as_slice())
        .map(|(&c, &d)| (c + s * d).max(0.0))
        .collect();
    RealMatrix::from_vec(clean.bins(), clean.frames(), data).expect("shape")
}

/// Iterative attack on the magnitude matrix.
///
/// Each iteration normalizes the gradient of the vanishing loss to L2 size
/// `step_eps`, clips it element-wise, shrinks it by `decay` while the step
/// would leave the budget ball (at most [`MAX_DECAY_STEPS`] times, after
/// which the undecayed step is projected onto the ball), then descends. The
/// loop stops when the detector sees nothing or after `n_iter` steps.
pub fn pgd_attack(
    model: &DetectorModel,
    signal: &SignalBuffer,
    engine: &StftEngine,
    mapping: Option<&DbMapping>,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let scope = config.norm_scope;
    let clean = analyse(signal, engine, mapping, scope)?;
    let budget = config.alpha * clean.norm;
    let step_eps = config.step_eps.unwrap_or(0.2 * budget);
    let clip_eps = config.clip_eps.unwrap_or(10.0 * clean.mag.median());
    let y0 = clean.mag.inner();

    let mut report = empty_report(AttackMethod::Pgd, config.alpha);
    let mut current = y0.clone();
    let mut clamped_total = 0;
    let mut n = 0;
    loop {
        let mag = MagnitudeMatrix::new(current.clone())?;
        let (probe, realized) = if config.resynthesis_aware && n > 0 {
            let sig = engine
                .inverse(&recombine(&mag, &clean.phase, *engine.config(), signal.sample_rate())?, signal.len())?
                .signal;
            (split(&engine.forward(&sig)?).0, Some(sig))
        } else {
            (mag, None)
        };
        let (loss, g, detections) = loss_and_gradient(model, &probe, &clean.mapping, config.lambda)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(n));
        }
        let detections = match realized {
            Some(sig) => detect_signal_auto(model, &sig, engine)?.len(),
            None => detections,
        };
        if n == 0 {
            report.detections_before = detections;
        }
        report.loss_trace.push(loss);
        if detections == 0 {
            report.terminated_by = Termination::Vanished;
            break;
        }
        if n >= config.n_iter {
            report.terminated_by = Termination::MaxIter;
            break;
        }
        let gn = scope.norm(&g);
        if gn == 0.0 || !gn.is_finite() || step_eps <= 0.0 || budget <= 0.0 {
            report.terminated_by = Termination::MaxIter;
            break;
        }
        let mut beta = g;
        beta.scale(step_eps / gn);
        clip2(&mut beta, clip_eps);

        let (full_step, _) = apply(&current, &beta, -1.0);
        let mut step = beta.clone();
        let mut accepted = None;
        for _ in 0..=MAX_DECAY_STEPS {
            let (cand, clamped) = apply(&current, &step, -1.0);
            if scope.norm(&cand.sub(y0)?) <= budget {
                accepted = Some((cand, clamped));
                break;
            }
            step.scale(config.decay);
        }
        current = match accepted {
            Some((cand, clamped)) => {
                clamped_total += clamped;
                cand
            }
            None => project(y0, &full_step, budget, scope),
        };
        n += 1;
    }
    report.iterations_used = n;
    report.clamped_bins = clamped_total;
    finish(model, signal, engine, &clean, current, report, scope)
}

/// Single normalized step of L2 size alpha * ||y|| down the vanishing-loss
/// gradient.
pub fn fgm_attack(
    model: &DetectorModel,
    signal: &SignalBuffer,
    engine: &StftEngine,
    mapping: Option<&DbMapping>,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let scope = config.norm_scope;
    let clean = analyse(signal, engine, mapping, scope)?;
    let (loss, g, detections) = loss_and_gradient(model, &clean.mag, &clean.mapping, config.lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let mut report = empty_report(AttackMethod::Fgm, config.alpha);
    report.detections_before = detections;
    report.loss_trace.push(loss);
    let gn = scope.norm(&g);
    if gn == 0.0 && config.alpha > 0.0 {
        return Err(Error::ZeroGradient);
    }
    let mut beta = g;
    if gn > 0.0 {
        beta.scale(config.alpha * clean.norm / gn);
    }
    let (perturbed, clamped) = apply(clean.mag.inner(), &beta, -1.0);
    report.iterations_used = 1;
    report.clamped_bins = clamped;
    finish(model, signal, engine, &clean, perturbed, report, scope)
}

/// Gaussian magnitude noise scaled to exactly alpha * ||y|| before the
/// non-negativity clamp, mirrored to keep the spectrum conjugate-symmetric.
pub fn random_noise_baseline(
    model: &DetectorModel,
    signal: &SignalBuffer,
    engine: &StftEngine,
    alpha: f64,
    seed: u64,
) -> Result<AdversarialExample> {
    let clean = analyse(signal, engine, None, NormScope::Full)?;
    let noise = random_perturbation(clean.mag.bins(), clean.mag.frames(), alpha * clean.norm, seed, NormScope::Full);
    let (perturbed, clamped) = apply(clean.mag.inner(), &noise, 1.0);
    let mut report = empty_report(AttackMethod::RandomNoise, alpha);
    report.detections_before = detect_signal_auto(model, signal, engine)?.len();
    report.clamped_bins = clamped;
    finish(model, signal, engine, &clean, perturbed, report, NormScope::Full)
}

/// Conjugate-symmetric Gaussian matrix with the given norm.
pub fn random_perturbation(bins: usize, frames: usize, norm: f64, seed: u64, scope: NormScope) -> RealMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut m = RealMatrix::zeros(bins, frames);
    for f in 0..frames {
        for k in 0..bins / 2 {
            m.set(k, f, normal.sample(&mut rng));
        }
    }
    m.mirror_positive_half();
    let n = scope.norm(&m);
    if n > 0.0 {
        m.scale(norm / n);
    }
    m
}

/// Dispatches on `config.method`.
pub fn run_attack(
    model: &DetectorModel,
    signal: &SignalBuffer,
    engine: &StftEngine,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    match config.method {
        AttackMethod::Pgd => pgd_attack(model, signal, engine, None, config),
        AttackMethod::Fgm => fgm_attack(model, signal, engine, None, config),
        AttackMethod::RandomNoise => random_noise_baseline(model, signal, engine, config.alpha, config.seed),
    }
}

/// Recomputes (tf_ratio, time_ratio) from the stored adversarial artifacts;
/// both are relative to the clean time-frequency norm.
pub fn perturbation_ratios(original: &SignalBuffer, adv: &AdversarialExample, engine: &StftEngine, scope: NormScope) -> Result<(f64, f64)> {
    if original.len() != adv.signal.len() {
        return Err(Error::Dimension(format!(
            "original has {} samples, adversarial {}",
            original.len(),
            adv.signal.len()
        )));
    }
    let (mag, _) = split(&engine.forward(original)?);
    let beta = adv.perturbed_magnitude.inner().sub(mag.inner())?;
    let y_norm = scope.norm(mag.inner());
    let diff: Vec<f64> = adv.signal.samples().iter().zip(original.samples()).map(|(a, b)| a - b).collect();
    Ok((scope.norm(&beta) / y_norm, l2(&diff) / y_norm))
}

pub const REPORT_CSV_HEADER: &str =
    "file,method,alpha,iterations_used,tf_ratio,time_ratio,bound_rhs,detections_before,detections_after,terminated_by";

pub fn report_csv_row(file: &str, r: &AttackReport) -> String {
    let mut s = String::new();
    write!(
        s,
        "{},{},{},{},{:.9},{:.9},{:.9},{},{},{}",
        file,
        r.method.tag(),
        r.alpha,
        r.iterations_used,
        r.tf_ratio,
        r.time_ratio,
        r.bound_rhs,
        r.detections_before,
        r.detections_after,
        r.terminated_by.tag()
    )
    .unwrap();
    s
}
