//! Blackman-windowed STFT over the full N-bin spectrum, its weighted
//! overlap-add inverse, and the polar magnitude/phase split.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal::SignalBuffer;

/// Floor on the summed squared window in the overlap-add normalization.
pub const WOLA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Blackman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub overlap: usize,
    pub window: WindowKind,
}

impl StftConfig {
    pub fn new(n_fft: usize, overlap: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            overlap,
            window: WindowKind::Blackman,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 2048-point Blackman STFT with 48 overlapping samples.
    pub fn analysis() -> Self {
        Self {
            n_fft: 2048,
            overlap: 48,
            window: WindowKind::Blackman,
        }
    }

    /// 256-point STFT (128 displayed bins) with hop 172. Paired with the
    /// default generator length of 22100 samples this gives 128 frames.
    pub fn desk() -> Self {
        Self {
            n_fft: 256,
            overlap: 84,
            window: WindowKind::Blackman,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 3 || !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "stft.n_fft must be a power of two >= 4, got {}",
                self.n_fft
            )));
        }
        if self.overlap == 0 || self.overlap >= self.n_fft {
            return Err(Error::Config(format!(
                "stft.overlap must lie in (0, {}), got {}",
                self.n_fft, self.overlap
            )));
        }
        Ok(())
    }

    pub fn win_len(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.n_fft - self.overlap
    }

    /// Positive-frequency bins shown in the spectrogram image.
    pub fn display_bins(&self) -> usize {
        self.n_fft / 2
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        if signal_len < self.win_len() {
            0
        } else {
            (signal_len - self.win_len()) / self.hop() + 1
        }
    }

    /// Signal length that yields exactly `frames` frames with no remainder.
    pub fn signal_len_for(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop() + self.win_len()
    }
}

/// Symmetric Blackman window of length `config.win_len()`.
pub fn make_window(config: &StftConfig) -> Vec<f64> {
    let l = config.win_len();
    let denom = (l - 1) as f64;
    (0..l)
        .map(|n| {
            let x = 2.0 * PI * n as f64 / denom;
            (0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()).max(0.0)
        })
        .collect()
}

/// Complex STFT, K = n_fft bins by M frames, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFreqMatrix {
    config: StftConfig,
    sample_rate: u32,
    frames: usize,
    data: Vec<Complex64>,
}

impl TimeFreqMatrix {
    pub fn zeros(config: StftConfig, sample_rate: u32, frames: usize) -> Self {
        Self {
            config,
            sample_rate,
            frames,
            data: vec![Complex64::new(0.0, 0.0); config.n_fft * frames],
        }
    }

    pub fn from_frames(config: StftConfig, sample_rate: u32, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != config.n_fft * frames {
            return Err(Error::Dimension(format!(
                "{} entries for {} bins x {frames} frames",
                data.len(),
                config.n_fft
            )));
        }
        Ok(Self {
            config,
            sample_rate,
            frames,
            data,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bins(&self) -> usize {
        self.config.n_fft
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, k: usize, m: usize) -> Complex64 {
        self.data[m * self.bins() + k]
    }

    pub fn set(&mut self, k: usize, m: usize, v: Complex64) {
        let bins = self.bins();
        self.data[m * bins + k] = v;
    }

    pub fn frame(&self, m: usize) -> &[Complex64] {
        &self.data[m * self.bins()..(m + 1) * self.bins()]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.bins() != other.bins() || self.frames != other.frames {
            return Err(Error::Dimension("matrix sum of unequal shapes".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            config: self.config,
            sample_rate: self.sample_rate,
            frames: self.frames,
            data,
        })
    }

    /// Largest deviation from conjugate symmetry y(k) = conj(y(N-k)),
    /// relative to the largest entry.
    pub fn hermitian_error(&self) -> f64 {
        let n = self.bins();
        let scale = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for m in 0..self.frames {
            for k in 0..n {
                let mirror = (n - k) % n;
                worst = worst.max((self.get(k, m) - self.get(mirror, m).conj()).norm());
            }
        }
        worst / scale
    }
}

/// Real K x M matrix, frame-major. Used for magnitudes, phases, perturbations
/// and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    bins: usize,
    frames: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![0.0; bins * frames],
        }
    }

    pub fn from_vec(bins: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::Dimension(format!(
                "{} entries for {bins} bins x {frames} frames",
                data.len()
            )));
        }
        Ok(Self { bins, frames, data })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize) -> f64 {
        self.data[m * self.bins + k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, m: usize, v: f64) {
        self.data[m * self.bins + k] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        crate::signal::l2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &b| a.max(b.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { bins: self.bins, frames: self.frames, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { bins: self.bins, frames: self.frames, data })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Copies bins 1..N/2 onto their negative-frequency partners N-k and
    /// zeroes the Nyquist bin, so the matrix is even in k.
    pub fn mirror_positive_half(&mut self) {
        let n = self.bins;
        let half = n / 2;
        for m in 0..self.frames {
            let frame = &mut self.data[m * n..(m + 1) * n];
            for k in 1..half {
                frame[n - k] = frame[k];
            }
            if n % 2 == 0 {
                frame[half] = 0.0;
            }
        }
    }
}

/// Non-negative STFT magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMatrix(RealMatrix);

impl MagnitudeMatrix {
    pub fn new(m: RealMatrix) -> Result<Self> {
        for (i, &v) in m.as_slice().iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::NegativeMagnitude {
                    bin: i % m.bins(),
                    frame: i / m.bins(),
                    value: v,
                });
            }
        }
        Ok(Self(m))
    }

    pub fn inner(&self) -> &RealMatrix {
        &self.0
    }

    pub fn into_inner(self) -> RealMatrix {
        self.0
    }

    pub fn get(&self, k: usize, m: usize) -> f64 {
        self.0.get(k, m)
    }

    pub fn bins(&self) -> usize {
        self.0.bins()
    }

    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Median over all entries.
    pub fn median(&self) -> f64 {
        let mut v = self.0.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            0.0
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Phases in (-pi, pi].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix(RealMatrix);

impl PhaseMatrix {
    pub fn inner(&self) -> &RealMatrix {
        &self.0
    }

    pub fn get(&self, k: usize, m: usize) -> f64 {
        self.0.get(k, m)
    }
}

fn phase_of(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let p = c.im.atan2(c.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Polar decomposition of every entry. Zero entries get phase 0.
pub fn split(matrix: &TimeFreqMatrix) -> (MagnitudeMatrix, PhaseMatrix) {
    let (k, m) = (matrix.bins(), matrix.frames());
    let mag = matrix.as_slice().iter().map(|c| c.norm()).collect();
    let phase = matrix.as_slice().iter().map(|&c| phase_of(c)).collect();
    (
        MagnitudeMatrix(RealMatrix::from_vec(k, m, mag).expect("shape")),
        PhaseMatrix(RealMatrix::from_vec(k, m, phase).expect("shape")),
    )
}

/// Rebuilds complex entries mag * e^{j phase}.
pub fn recombine(mag: &MagnitudeMatrix, phase: &PhaseMatrix, config: StftConfig, sample_rate: u32) -> Result<TimeFreqMatrix> {
    mag.0.same_shape(&phase.0)?;
    if mag.bins() != config.n_fft {
        return Err(Error::Dimension(format!(
            "{} bins for n_fft {}",
            mag.bins(),
            config.n_fft
        )));
    }
    let data = mag
        .0
        .as_slice()
        .iter()
        .zip(phase.0.as_slice())
        .map(|(&r, &p)| Complex64::from_polar(r, p))
        .collect();
    TimeFreqMatrix::from_frames(config, sample_rate, mag.frames(), data)
}

/// Result of an inverse transform.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub signal: SignalBuffer,
    /// L2 norm of the discarded imaginary part relative to the real part.
    pub imag_residue: f64,
}

/// STFT with cached FFT plans and window; cheap to clone and share.
#[derive(Clone)]
pub struct StftEngine {
    config: StftConfig,
    window: Arc<Vec<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("config", &self.config).finish()
    }
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: Arc::new(make_window(&config)),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn forward(&self, signal: &SignalBuffer) -> Result<TimeFreqMatrix> {
        let cfg = self.config;
        let frames = cfg.n_frames(signal.len());
        if frames == 0 {
            return Err(Error::Dimension(format!(
                "signal of {} samples is shorter than one {}-sample window",
                signal.len(),
                cfg.win_len()
            )));
        }
        let n = cfg.n_fft;
        let x = signal.samples();
        let mut data = Vec::with_capacity(n * frames);
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for m in 0..frames {
            let start = m * cfg.hop();
            let mut buf: Vec<Complex64> = x[start..start + n]
                .iter()
                .zip(self.window.iter())
                .map(|(&s, &w)| Complex64::new(s * w, 0.0))
                .collect();
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf);
        }
        TimeFreqMatrix::from_frames(cfg, signal.sample_rate(), frames, data)
    }

    /// Weighted overlap-add inverse. `out_len` may exceed the span covered by
    /// the frames; uncovered samples are zero.
    pub fn inverse(&self, matrix: &TimeFreqMatrix, out_len: usize) -> Result<Reconstruction> {
        let cfg = self.config;
        if matrix.config() != &cfg {
            return Err(Error::Dimension("matrix was produced with a different STFT config".into()));
        }
        let frames = matrix.frames();
        let covered = cfg.signal_len_for(frames);
        if frames == 0 || out_len < covered {
            return Err(Error::Dimension(format!(
                "{frames} frames need out_len >= {covered}, got {out_len}"
            )));
        }
        let n = cfg.n_fft;
        let inv_n = 1.0 / n as f64;
        let mut acc = vec![Complex64::new(0.0, 0.0); out_len];
        let mut wsum = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for m in 0..frames {
            buf.copy_from_slice(matrix.frame(m));
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = m * cfg.hop();
            for (i, (&v, &w)) in buf.iter().zip(self.window.iter()).enumerate() {
                acc[start + i] += v * (w * inv_n);
                wsum[start + i] += w * w;
            }
        }
        let mut re = Vec::with_capacity(out_len);
        let (mut re_sq, mut im_sq) = (0.0, 0.0);
        for (a, &ws) in acc.iter().zip(&wsum) {
            let d = ws.max(WOLA_FLOOR);
            let v = if ws > 0.0 { a / d } else { Complex64::new(0.0, 0.0) };
            re_sq += v.re * v.re;
            im_sq += v.im * v.im;
            re.push(v.re);
        }
        let imag_residue = if re_sq > 0.0 {
            (im_sq / re_sq).sqrt()
        } else {
            im_sq.sqrt()
        };
        Ok(Reconstruction {
            signal: SignalBuffer::new(re, matrix.sample_rate())?,
            imag_residue,
        })
    }

    /// istft(stft(x)) at the original length.
    pub fn round_trip(&self, signal: &SignalBuffer) -> Result<SignalBuffer> {
        let y = self.forward(signal)?;
        Ok(self.inverse(&y, signal.len())?.signal)
    }
}

pub fn stft(signal: &SignalBuffer, config: &StftConfig) -> Result<TimeFreqMatrix> {
    StftEngine::new(*config)?.forward(signal)
}

pub fn istft(matrix: &TimeFreqMatrix, config: &StftConfig, out_len: usize) -> Result<Reconstruction> {
    StftEngine::new(*config)?.inverse(matrix, out_len)
}

/// Relative L2 error ||istft(stft(x)) - x|| / ||x||.
pub fn round_trip_error(signal: &SignalBuffer, engine: &StftEngine) -> Result<f64> {
    let rt = engine.round_trip(signal)?;
    let diff: Vec<f64> = rt
        .samples()
        .iter()
        .zip(signal.samples())
        .map(|(a, b)| a - b)
        .collect();
    let norm = signal.norm();
    Ok(if norm > 0.0 {
        crate::signal::l2(&diff) / norm
    } else {
        0.0
    })
}
