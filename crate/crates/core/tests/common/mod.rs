#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use tfadv::attack::magnitude_gradient;
use tfadv::detector::{attack_loss, init_model, training_loss, DetectorConfig, DetectorModel, LossWeights, RawGrid};
use tfadv::signal::{generate_burst_signal, GenConfig, GroundTruthLabel, SignalBuffer};
use tfadv::spectrogram::{grayscale_grad, to_grayscale, DbMapping, SpectrogramImage};
use tfadv::stft::{make_window, split, MagnitudeMatrix, RealMatrix, StftConfig, StftEngine};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Coordinates where both the analytic and numeric derivative are smaller
/// than this are counted as agreeing; the central difference cannot resolve
/// them at double precision.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise_signal(len: usize, seed: u64) -> SignalBuffer {
    let mut r = rng(seed);
    let s = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    SignalBuffer::new(s, 1_000_000).unwrap()
}

pub fn desk_signal(seed: u64) -> (SignalBuffer, Vec<GroundTruthLabel>) {
    generate_burst_signal(&GenConfig {
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

/// Direct O(N^2) DFT of one windowed frame.
pub fn dft_frame(x: &[f64], window: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .zip(window)
                .enumerate()
                .map(|(t, (&s, &w))| Complex64::from_polar(s * w, -2.0 * PI * (k * t % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct StftSuite {
    pub dft_max_rel: f64,
    pub parseval_max_rel: f64,
    pub hermitian_max: f64,
    pub interior_roundtrip_max: f64,
}

/// STFT checks against a direct DFT, the windowed Parseval identity, conjugate
/// symmetry and the 75%-overlap reconstruction away from the edges.
pub fn stft_suite() -> StftSuite {
    let x = noise_signal(4096, 11);
    let cfg = StftConfig::new(256, 192).unwrap();
    let engine = StftEngine::new(cfg).unwrap();
    let y = engine.forward(&x).unwrap();
    let w = make_window(&cfg);
    let n = cfg.n_fft;

    let mut dft_max_rel: f64 = 0.0;
    let mut parseval_max_rel: f64 = 0.0;
    for m in 0..y.frames() {
        let seg = &x.samples()[m * cfg.hop()..m * cfg.hop() + n];
        let frame = y.frame(m);
        if m % 4 == 0 {
            let oracle = dft_frame(seg, &w);
            let err: f64 = oracle.iter().zip(frame).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            let scale: f64 = oracle.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            dft_max_rel = dft_max_rel.max(err / scale);
        }
        let energy_f: f64 = frame.iter().map(|c| c.norm_sqr()).sum();
        let energy_t: f64 = seg.iter().zip(&w).map(|(s, w)| (s * w) * (s * w)).sum();
        parseval_max_rel = parseval_max_rel.max((energy_f - n as f64 * energy_t).abs() / energy_f);
    }

    let mut hermitian_max: f64 = 0.0;
    for m in 0..y.frames() {
        let frame = y.frame(m);
        let scale = frame.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for k in 1..n {
            hermitian_max = hermitian_max.max((frame[k] - frame[n - k].conj()).norm() / scale);
        }
        hermitian_max = hermitian_max.max(frame[0].im.abs() / scale).max(frame[n / 2].im.abs() / scale);
    }

    let rec = engine.inverse(&y, x.len()).unwrap().signal;
    let (lo, hi) = (n, cfg.signal_len_for(y.frames()) - n);
    let interior_roundtrip_max = (lo..hi)
        .map(|i| (rec.samples()[i] - x.samples()[i]).abs())
        .fold(0.0, f64::max);

    StftSuite {
        dft_max_rel,
        parseval_max_rel,
        hermitian_max,
        interior_roundtrip_max,
    }
}

/// Agreement of one analytic derivative with its central difference.
pub fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < FD_ABS_FLOOR || (analytic - numeric).abs() <= FD_REL_TOL * scale
}

#[derive(Debug, Clone, Default)]
pub struct FdTally {
    pub name: String,
    pub checked: usize,
    pub agreed: usize,
    pub worst: f64,
}

impl FdTally {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        if fd_agrees(analytic, numeric) {
            self.agreed += 1;
        } else {
            let scale = analytic.abs().max(numeric.abs());
            self.worst = self.worst.max((analytic - numeric).abs() / scale);
        }
    }

    pub fn fraction(&self) -> f64 {
        self.agreed as f64 / self.checked.max(1) as f64
    }
}

fn central<F: FnMut(f64) -> f64>(x0: f64, f: F) -> f64 {
    central_with(x0, FD_STEP, f)
}

fn central_with<F: FnMut(f64) -> f64>(x0: f64, h: f64, mut f: F) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Magnitudes span several decades, so their step scales with the value.
fn mag_step(x0: f64) -> f64 {
    1e-4 * x0.abs().max(1e-6)
}

/// A small detector that still exercises strided and unit-stride blocks.
pub fn small_detector(seed: u64) -> DetectorModel {
    let cfg = DetectorConfig {
        input_h: 32,
        input_w: 32,
        grid_s: 4,
        n_classes: 3,
        channels: vec![4, 6, 8, 8],
        ..DetectorConfig::default()
    };
    let mut model = init_model(&cfg, seed).unwrap();
    // Move the head away from its near-zero initialization so every term of
    // the losses carries gradient.
    let mut r = rng(seed ^ 0x5eed);
    for p in model.params_mut() {
        *p += r.random_range(-0.05..0.05);
    }
    model
}

fn random_image(h: usize, w: usize, seed: u64) -> SpectrogramImage {
    let mut r = rng(seed);
    let px = (0..h * w).map(|_| r.random_range(0.05..0.95)).collect();
    SpectrogramImage::from_pixels(h, w, px, DbMapping::new(-80.0, 0.0, 1e-10).unwrap()).unwrap()
}

fn some_labels() -> Vec<GroundTruthLabel> {
    vec![
        GroundTruthLabel { class_id: 0, cx: 0.2, cy: 0.3, w: 0.15, h: 0.2 },
        GroundTruthLabel { class_id: 2, cx: 0.7, cy: 0.8, w: 0.3, h: 0.1 },
    ]
}

/// Every parameter of every layer against the training loss.
pub fn fd_layers(samples_per_layer: usize) -> FdTally {
    let mut model = small_detector(3);
    let image = random_image(32, 32, 4);
    let labels = some_labels();
    let w = LossWeights::default();
    let (raw, tape) = model.forward_taped(&image).unwrap();
    let (_, d_grid) = training_loss(&raw, &labels, &w).unwrap();
    let mut grad = vec![0.0; model.params().len()];
    model.backward(&tape, &d_grid, Some(&mut grad), false);

    let mut tally = FdTally::new("detector layers");
    let mut r = rng(5);
    let mut off = 0;
    let lens: Vec<usize> = model.shapes().iter().map(|s| s.param_len()).collect();
    for len in lens {
        for _ in 0..samples_per_layer {
            let i = off + r.random_range(0..len);
            let x0 = model.params()[i];
            let num = central(x0, |v| {
                model.params_mut()[i] = v;
                let raw = model.forward(&image).unwrap();
                training_loss(&raw, &labels, &w).unwrap().0
            });
            model.params_mut()[i] = x0;
            tally.push(grad[i], num);
        }
        off += len;
    }
    tally
}

/// Input-pixel gradient of the detector.
pub fn fd_input(samples: usize) -> FdTally {
    let model = small_detector(6);
    let mut image = random_image(32, 32, 7);
    let (_, g) = model
        .backward_to_input(&image, |raw| attack_loss(raw, &[], 1.0))
        .unwrap();
    let mut tally = FdTally::new("detector input");
    let mut r = rng(8);
    for _ in 0..samples {
        let i = r.random_range(0..g.len());
        let x0 = image.pixels()[i];
        let num = central(x0, |v| {
            image.pixels_mut()[i] = v;
            attack_loss(&model.forward(&image).unwrap(), &[], 1.0).0
        });
        image.pixels_mut()[i] = x0;
        tally.push(g[i], num);
    }
    tally
}

fn random_grid(s: usize, d: usize, seed: u64) -> RawGrid {
    let mut r = rng(seed);
    let mut g = RawGrid::zeros(s, d);
    for i in 0..s {
        for j in 0..s {
            for v in g.cell_mut(i, j) {
                *v = r.random_range(-3.0..3.0);
            }
        }
    }
    g
}

fn fd_grid<F: Fn(&RawGrid) -> (f64, RawGrid)>(name: &str, grid: RawGrid, f: F) -> FdTally {
    let (_, g) = f(&grid);
    let mut tally = FdTally::new(name);
    let mut probe = grid.clone();
    for i in 0..grid.grid_s {
        for j in 0..grid.grid_s {
            for c in 0..grid.cell_len {
                let x0 = grid.cell(i, j)[c];
                let num = central(x0, |v| {
                    probe.cell_mut(i, j)[c] = v;
                    f(&probe).0
                });
                probe.cell_mut(i, j)[c] = x0;
                tally.push(g.cell(i, j)[c], num);
            }
        }
    }
    tally
}

pub fn fd_training_loss() -> FdTally {
    let labels = some_labels();
    let w = LossWeights::default();
    fd_grid("training loss", random_grid(4, 8, 9), |g| training_loss(g, &labels, &w).unwrap())
}

pub fn fd_attack_loss() -> FdTally {
    let mut t = fd_grid("attack loss (empty set)", random_grid(4, 8, 10), |g| attack_loss(g, &[], 1.0));
    let u = fd_grid("attack loss (targets)", random_grid(4, 8, 11), |g| attack_loss(g, &[0, 5, 9], 0.5));
    t.name = "attack loss".into();
    t.checked += u.checked;
    t.agreed += u.agreed;
    t.worst = t.worst.max(u.worst);
    t
}

fn perturb(mag: &MagnitudeMatrix, k: usize, m: usize, v: f64) -> MagnitudeMatrix {
    let mut inner = mag.inner().clone();
    inner.set(k, m, v);
    MagnitudeMatrix::new(inner).unwrap()
}

/// d(sum u * pixels)/d|Y| on displayed bins.
pub fn fd_grayscale(samples: usize) -> FdTally {
    let (x, _) = desk_signal(12);
    let engine = StftEngine::new(StftConfig::desk()).unwrap();
    let (mag, _) = split(&engine.forward(&x).unwrap());
    let mapping = DbMapping::from_magnitude(&mag);
    let h = mag.bins() / 2;
    let mut r = rng(13);
    let u: Vec<f64> = (0..h * mag.frames()).map(|_| r.random_range(-1.0..1.0)).collect();
    let g = grayscale_grad(&mag, &mapping, &u).unwrap();
    let f = |m: &MagnitudeMatrix| -> f64 {
        to_grayscale(m, &mapping).pixels().iter().zip(&u).map(|(p, u)| p * u).sum()
    };
    let mut tally = FdTally::new("grayscale mapping");
    for _ in 0..samples {
        let (k, m) = (r.random_range(0..h), r.random_range(0..mag.frames()));
        let x0 = mag.get(k, m);
        let num = central_with(x0, mag_step(x0), |v| f(&perturb(&mag, k, m, v)));
        tally.push(g.get(k, m), num);
    }
    tally
}

/// Vanishing loss of a desk-size detector as a function of the magnitude
/// matrix, through the grayscale mapping and every layer.
pub fn fd_end_to_end(samples: usize) -> FdTally {
    let (x, _) = desk_signal(14);
    let engine = StftEngine::new(StftConfig::desk()).unwrap();
    let (mag, _) = split(&engine.forward(&x).unwrap());
    let mapping = DbMapping::from_magnitude(&mag);
    let mut model = init_model(&DetectorConfig::default(), 15).unwrap();
    let mut r = rng(16);
    for p in model.params_mut() {
        *p += r.random_range(-0.02..0.02);
    }
    let (_, g): (f64, RealMatrix) = magnitude_gradient(&model, &mag, &mapping, 1.0).unwrap();
    let h = mag.bins() / 2;
    let mut tally = FdTally::new("end-to-end to magnitude");
    for _ in 0..samples {
        let (k, m) = (r.random_range(0..h), r.random_range(0..mag.frames()));
        let x0 = mag.get(k, m);
        let num = central_with(x0, mag_step(x0), |v| {
            magnitude_gradient(&model, &perturb(&mag, k, m, v), &mapping, 1.0).unwrap().0
        });
        tally.push(g.get(k, m), num);
    }
    tally
}
