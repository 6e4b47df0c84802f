//! Time-domain signals: raw i16 file I/O, ground-truth labels and the
//! synthetic multi-burst dataset generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Real-valued samples, nominally normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl SignalBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.samples)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reads a headerless little-endian i16 file, scaling by 1/32768.
pub fn read_signal_file(path: impl AsRef<Path>, sample_rate: u32) -> Result<SignalBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptySignal);
    }
    if bytes.len() % 2 != 0 {
        return Err(Error::OddByteCount(path.to_path_buf()));
    }
    let samples = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    SignalBuffer::new(samples, sample_rate)
}

/// Quantizes one normalized sample to i16. Returns the code and whether the
/// input was outside [-1, 1].
pub fn quantize_sample(s: f64) -> (i16, bool) {
    let clipped = !(-1.0..=1.0).contains(&s);
    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0);
    (q as i16, clipped)
}

/// Writes samples as little-endian i16. Out-of-range samples are clamped;
/// the number of clamped samples is returned.
pub fn write_signal_file(buffer: &SignalBuffer, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut clamped = 0;
    let mut bytes = Vec::with_capacity(buffer.len() * 2);
    for &s in buffer.samples() {
        let (q, c) = quantize_sample(s);
        clamped += c as usize;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} out-of-range samples", path.display());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(clamped)
}

/// Normalized ground-truth box: `cx` is the time center, `cy` the frequency
/// center as a fraction of Nyquist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthLabel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || !(0.0..=1.0).contains(&self.cx)
            || !(0.0..=1.0).contains(&self.cy)
            || self.w <= 0.0
            || self.w > 1.0
            || self.h <= 0.0
            || self.h > 1.0
        {
            return Err(Error::Label(format!("{self:?} is outside the unit square")));
        }
        Ok(())
    }

    /// Clips the box extent to the unit square, keeping it non-degenerate.
    pub fn clamped(&self) -> Self {
        let (x0, x1) = clip_span(self.cx, self.w);
        let (y0, y1) = clip_span(self.cy, self.h);
        Self {
            class_id: self.class_id,
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }
}

fn clip_span(c: f64, len: f64) -> (f64, f64) {
    let lo = (c - 0.5 * len).clamp(0.0, 1.0);
    let hi = (c + 0.5 * len).clamp(0.0, 1.0);
    if hi - lo < 1e-6 {
        let mid = lo.clamp(5e-7, 1.0 - 5e-7);
        (mid - 5e-7, mid + 5e-7)
    } else {
        (lo, hi)
    }
}

pub fn format_labels(labels: &[GroundTruthLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            l.class_id, l.cx, l.cy, l.w, l.h
        )
        .unwrap();
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthLabel>> {
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "label line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |f: &str| Error::Parse(format!("label line {}: bad field {f:?}", lineno + 1));
        let class_id = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(f))?;
        }
        let label = GroundTruthLabel {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        label.validate()?;
        labels.push(label);
    }
    Ok(labels)
}

pub fn write_label_file(labels: &[GroundTruthLabel], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<GroundTruthLabel>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

/// Synthetic burst modulation. The discriminant is the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BurstKind {
    Tone = 0,
    Chirp = 1,
    Fsk = 2,
}

impl BurstKind {
    pub const ALL: [BurstKind; 3] = [BurstKind::Tone, BurstKind::Chirp, BurstKind::Fsk];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BurstKind::Tone => "tone",
            BurstKind::Chirp => "chirp",
            BurstKind::Fsk => "fsk",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_bursts: (usize, usize),
    /// Carrier (center) frequency range, Hz.
    pub freq_range: (f64, f64),
    /// Burst duration range, seconds.
    pub duration_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    /// Chirp sweep width range, Hz.
    pub chirp_bw_range: (f64, f64),
    /// FSK deviation (half the tone spacing) range, Hz.
    pub fsk_dev_range: (f64, f64),
    pub fsk_symbol_s: f64,
    /// Frequency margin added on both sides of a burst's occupied band when
    /// labelling; covers the analysis window's mainlobe.
    pub freq_guard_hz: f64,
    pub noise_floor_std: f64,
    pub burst_kinds: Vec<BurstKind>,
    pub signal_length: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for GenConfig {
    /// Desk-scale defaults, paired with [`crate::stft::StftConfig::desk`]: the
    /// signal length yields exactly 128 frames of 128 positive bins.
    fn default() -> Self {
        Self {
            n_bursts: (1, 4),
            freq_range: (40e3, 460e3),
            duration_range: (2.5e-3, 8e-3),
            amplitude_range: (0.05, 0.2),
            chirp_bw_range: (30e3, 80e3),
            fsk_dev_range: (10e3, 20e3),
            fsk_symbol_s: 0.5e-3,
            freq_guard_hz: 16e3,
            noise_floor_std: 0.02,
            burst_kinds: BurstKind::ALL.to_vec(),
            signal_length: 22_100,
            sample_rate: 1_000_000,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: (f64, f64)) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1 {
        return Err(Error::Config(format!(
            "{name}: min {} exceeds max {}",
            r.0, r.1
        )));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bursts.0 > self.n_bursts.1 {
            return Err(Error::Config(format!(
                "n_bursts: min {} exceeds max {}",
                self.n_bursts.0, self.n_bursts.1
            )));
        }
        check_range("freq_range", self.freq_range)?;
        check_range("duration_range", self.duration_range)?;
        check_range("amplitude_range", self.amplitude_range)?;
        check_range("chirp_bw_range", self.chirp_bw_range)?;
        check_range("fsk_dev_range", self.fsk_dev_range)?;
        if self.sample_rate == 0 || self.signal_length == 0 {
            return Err(Error::Config("sample_rate and signal_length must be positive".into()));
        }
        if self.noise_floor_std < 0.0 {
            return Err(Error::Config("noise_floor_std must be non-negative".into()));
        }
        if self.duration_range.0 <= 0.0 {
            return Err(Error::Config("duration_range: durations must be positive".into()));
        }
        let nyq = self.sample_rate as f64 / 2.0;
        if self.freq_range.0 <= 0.0 || self.freq_range.1 >= nyq {
            return Err(Error::Config(format!(
                "freq_range must lie strictly inside (0, {nyq}) Hz"
            )));
        }
        if self.n_bursts.1 > 0 {
            if self.burst_kinds.is_empty() {
                return Err(Error::Config("burst_kinds is empty".into()));
            }
            let longest = (self.duration_range.1 * self.sample_rate as f64).ceil() as usize;
            if longest > self.signal_length {
                return Err(Error::Config(format!(
                    "duration_range: bursts of {longest} samples exceed signal_length {}",
                    self.signal_length
                )));
            }
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.signal_length as f64 / self.sample_rate as f64
    }
}

/// Frequency occupancy of one burst, used both for synthesis and labelling.
#[derive(Debug, Clone, Copy)]
struct BurstPlan {
    kind: BurstKind,
    start: usize,
    len: usize,
    amplitude: f64,
    // Kind-specific frequency parameters, Hz.
    f_lo: f64,
    f_hi: f64,
}

impl BurstPlan {
    fn label(&self, cfg: &GenConfig) -> GroundTruthLabel {
        let n = cfg.signal_length as f64;
        let nyq = cfg.sample_rate as f64 / 2.0;
        let lo = (self.f_lo - cfg.freq_guard_hz) / nyq;
        let hi = (self.f_hi + cfg.freq_guard_hz) / nyq;
        GroundTruthLabel {
            class_id: self.kind.class_id(),
            cx: (self.start as f64 + 0.5 * self.len as f64) / n,
            cy: 0.5 * (lo + hi),
            w: self.len as f64 / n,
            h: hi - lo,
        }
        .clamped()
    }
}

fn overlaps(a: &GroundTruthLabel, b: &GroundTruthLabel, margin: f64) -> bool {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    ax0 < bx1 + margin && bx0 < ax1 + margin && ay0 < by1 + margin && by0 < ay1 + margin
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn plan_burst(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> BurstPlan {
    let fs = cfg.sample_rate as f64;
    let kind = cfg.burst_kinds[rng.random_range(0..cfg.burst_kinds.len())];
    let len = ((uniform(rng, cfg.duration_range) * fs).round() as usize).clamp(1, cfg.signal_length);
    let start = rng.random_range(0..=cfg.signal_length - len);
    let amplitude = uniform(rng, cfg.amplitude_range);
    let fc = uniform(rng, cfg.freq_range);
    let half = match kind {
        BurstKind::Tone => 0.0,
        BurstKind::Chirp => 0.5 * uniform(rng, cfg.chirp_bw_range),
        BurstKind::Fsk => uniform(rng, cfg.fsk_dev_range),
    };
    let nyq = fs / 2.0;
    let f_lo = (fc - half).max(1.0);
    let f_hi = (fc + half).min(nyq - 1.0);
    BurstPlan {
        kind,
        start,
        len,
        amplitude,
        f_lo,
        f_hi,
    }
}

fn synthesize(plan: &BurstPlan, cfg: &GenConfig, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let fs = cfg.sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let phase0 = rng.random_range(0.0..tau);
    let slice = &mut out[plan.start..plan.start + plan.len];
    match plan.kind {
        BurstKind::Tone => {
            let f = 0.5 * (plan.f_lo + plan.f_hi);
            for (n, s) in slice.iter_mut().enumerate() {
                *s += plan.amplitude * (phase0 + tau * f * n as f64 / fs).cos();
            }
        }
        BurstKind::Chirp => {
            let up = rng.random_bool(0.5);
            let (f0, f1) = if up {
                (plan.f_lo, plan.f_hi)
            } else {
                (plan.f_hi, plan.f_lo)
            };
            let dur = plan.len as f64 / fs;
            let rate = (f1 - f0) / dur;
            for (n, s) in slice.iter_mut().enumerate() {
                let t = n as f64 / fs;
                *s += plan.amplitude * (phase0 + tau * (f0 * t + 0.5 * rate * t * t)).cos();
            }
        }
        BurstKind::Fsk => {
            let sym = ((cfg.fsk_symbol_s * fs).round() as usize).max(1);
            let mut phase = phase0;
            let mut bit = rng.random_bool(0.5);
            for (n, s) in slice.iter_mut().enumerate() {
                if n > 0 && n % sym == 0 {
                    bit = rng.random_bool(0.5);
                }
                let f = if bit { plan.f_hi } else { plan.f_lo };
                *s += plan.amplitude * phase.cos();
                phase = (phase + tau * f / fs) % tau;
            }
        }
    }
}

/// Generates one synthetic signal with non-overlapping bursts plus a white
/// Gaussian noise floor. Deterministic in `config.seed`.
pub fn generate_burst_signal(config: &GenConfig) -> Result<(SignalBuffer, Vec<GroundTruthLabel>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = rng.random_range(config.n_bursts.0..=config.n_bursts.1);

    let mut plans = Vec::with_capacity(target);
    let mut labels: Vec<GroundTruthLabel> = Vec::with_capacity(target);
    const MAX_TRIES: usize = 200;
    for _ in 0..target {
        for _ in 0..MAX_TRIES {
            let plan = plan_burst(&mut rng, config);
            let label = plan.label(config);
            if labels.iter().all(|l| !overlaps(l, &label, 0.02)) {
                plans.push(plan);
                labels.push(label);
                break;
            }
        }
    }

    let mut samples = vec![0.0; config.signal_length];
    for plan in &plans {
        synthesize(plan, config, &mut rng, &mut samples);
    }
    if config.noise_floor_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_floor_std).expect("validated std");
        for s in samples.iter_mut() {
            *s += noise.sample(&mut rng);
        }
    }
    Ok((SignalBuffer::new(samples, config.sample_rate)?, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub signal: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
    pub signal_sha256: String,
    pub labels_sha256: String,
}

/// Index of a generated dataset. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub master_seed: u64,
    pub signal_length: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetManifest {
    pub fn signal_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].signal)
    }

    pub fn labels_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].labels)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_signal(&self, i: usize) -> Result<SignalBuffer> {
        read_signal_file(self.signal_path(i), self.sample_rate)
    }

    pub fn load_labels(&self, i: usize) -> Result<Vec<GroundTruthLabel>> {
        read_label_file(self.labels_path(i))
    }

    /// Keeps only the entries with index in `range`.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            entries: self.entries[range].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# tfadv dataset manifest\nversion = 1\n");
        writeln!(out, "sample_rate = {}", self.sample_rate).unwrap();
        writeln!(out, "master_seed = {}", self.master_seed).unwrap();
        writeln!(out, "signal_length = {}", self.signal_length).unwrap();
        writeln!(out, "n_files = {}", self.entries.len()).unwrap();
        for e in &self.entries {
            writeln!(
                out,
                "entry = {} {} {} {} {}",
                e.signal.display(),
                e.labels.display(),
                e.seed,
                e.signal_sha256,
                e.labels_sha256
            )
            .unwrap();
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut sample_rate = None;
        let mut master_seed = None;
        let mut signal_length = None;
        let mut n_files = None;
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("manifest line {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| Error::Parse(format!("manifest {key}: {v:?}")))
            };
            match key {
                "version" => {
                    if value != "1" {
                        return Err(Error::Parse(format!("unsupported manifest version {value}")));
                    }
                }
                "sample_rate" => sample_rate = Some(num(value)? as u32),
                "master_seed" => master_seed = Some(num(value)?),
                "signal_length" => signal_length = Some(num(value)? as usize),
                "n_files" => n_files = Some(num(value)? as usize),
                "entry" => {
                    let f: Vec<&str> = value.split_whitespace().collect();
                    if f.len() != 5 {
                        return Err(Error::Parse(format!("manifest entry {value:?}")));
                    }
                    entries.push(ManifestEntry {
                        signal: f[0].into(),
                        labels: f[1].into(),
                        seed: num(f[2])?,
                        signal_sha256: f[3].to_string(),
                        labels_sha256: f[4].to_string(),
                    });
                }
                other => return Err(Error::Parse(format!("unknown manifest key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("manifest is missing {k}"));
        let manifest = Self {
            root,
            sample_rate: sample_rate.ok_or_else(|| missing("sample_rate"))?,
            master_seed: master_seed.ok_or_else(|| missing("master_seed"))?,
            signal_length: signal_length.ok_or_else(|| missing("signal_length"))?,
            entries,
        };
        if let Some(n) = n_files {
            if n != manifest.entries.len() {
                return Err(Error::Parse(format!(
                    "manifest declares {n} files but lists {}",
                    manifest.entries.len()
                )));
            }
        }
        Ok(manifest)
    }
}

/// Generates `n_files` signals (seed = master seed + index) into `out_dir`,
/// with one label file each and a manifest.
pub fn build_dataset(n_files: usize, config: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let entries = (0..n_files)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let seed = config.seed.wrapping_add(i as u64);
            let cfg = GenConfig {
                seed,
                ..config.clone()
            };
            let (signal, labels) = generate_burst_signal(&cfg)?;
            let sig_name = format!("sig_{i:05}.i16");
            let lbl_name = format!("sig_{i:05}.txt");
            write_signal_file(&signal, out_dir.join(&sig_name))?;
            write_label_file(&labels, out_dir.join(&lbl_name))?;
            let sig_bytes = fs::read(out_dir.join(&sig_name)).map_err(|e| Error::io(out_dir.join(&sig_name), e))?;
            Ok(ManifestEntry {
                signal: sig_name.into(),
                labels: lbl_name.into(),
                seed,
                signal_sha256: sha256_hex(&sig_bytes),
                labels_sha256: sha256_hex(format_labels(&labels).as_bytes()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        sample_rate: config.sample_rate,
        master_seed: config.seed,
        signal_length: config.signal_length,
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
