//! Grid-based single-stage detector over spectrogram images.
//!
//! A stack of 3x3 convolutions with leaky-ReLU (the first `log2(input/grid)`
//! strided by two) followed by a 1x1 head producing, per grid cell, an
//! objectness logit, four box offsets and one logit per class.

mod conv;
mod decode;
mod loss;
mod persist;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::SignalBuffer;
use crate::spectrogram::{to_grayscale, DbMapping, SpectrogramImage};
use crate::stft::{split, StftEngine};

pub use conv::ConvShape;
pub use decode::{decode, nms, DetectionBox};
pub use loss::{attack_loss, bce_from_logit, sigmoid, softplus, training_loss, LossWeights};
pub use persist::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train, validate, Sample, TrainConfig, TrainHistory};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub grid_s: usize,
    pub n_classes: usize,
    /// Output channels of each 3x3 block.
    pub channels: Vec<usize>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_h: 128,
            input_w: 128,
            grid_s: 8,
            n_classes: 3,
            channels: vec![8, 16, 32, 32, 32],
            conf_thresh: 0.25,
            nms_iou: 0.45,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 {
            return bad("detector.n_classes must be at least 1".into());
        }
        if self.grid_s == 0 || self.input_h % self.grid_s != 0 || self.input_w % self.grid_s != 0 {
            return bad(format!(
                "detector input {}x{} is not divisible by grid {}",
                self.input_h, self.input_w, self.grid_s
            ));
        }
        let (fh, fw) = (self.input_h / self.grid_s, self.input_w / self.grid_s);
        if fh != fw || !fh.is_power_of_two() {
            return bad(format!(
                "detector input/grid ratio must be the same power of two on both axes, got {fh}x{fw}"
            ));
        }
        if self.channels.len() < self.downsamples() || self.channels.contains(&0) {
            return bad(format!(
                "detector.channels needs at least {} non-zero widths",
                self.downsamples()
            ));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("detector thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn downsamples(&self) -> usize {
        (self.input_h / self.grid_s).trailing_zeros() as usize
    }

    /// Values per grid cell: objectness, tx, ty, tw, th, class logits.
    pub fn cell_len(&self) -> usize {
        5 + self.n_classes
    }

    /// Shapes of every layer, the 1x1 head last.
    pub fn layer_shapes(&self) -> Vec<ConvShape> {
        let down = self.downsamples();
        let (mut c, mut h, mut w) = (1, self.input_h, self.input_w);
        let mut shapes = Vec::with_capacity(self.channels.len() + 1);
        for (i, &co) in self.channels.iter().enumerate() {
            let s = ConvShape {
                c_in: c,
                c_out: co,
                kernel: 3,
                stride: if i < down { 2 } else { 1 },
                pad: 1,
                h_in: h,
                w_in: w,
            };
            (c, h, w) = (co, s.h_out(), s.w_out());
            shapes.push(s);
        }
        shapes.push(ConvShape {
            c_in: c,
            c_out: self.cell_len(),
            kernel: 1,
            stride: 1,
            pad: 0,
            h_in: h,
            w_in: w,
        });
        shapes
    }

    /// Closed-form parameter count: sum over layers of c_in*k*k*c_out + c_out.
    pub fn param_count(&self) -> usize {
        let mut c_in = 1;
        let mut total = 0;
        for &c in &self.channels {
            total += c_in * 9 * c + c;
            c_in = c;
        }
        total + c_in * self.cell_len() + self.cell_len()
    }
}

/// Per-cell raw predictions, `grid_s x grid_s x (5 + n_classes)`.
///
/// Row `i` counts frequency bands upward from DC (the image is drawn with the
/// highest frequency on top, so row `i` sits at image row `S - 1 - i`);
/// column `j` counts time cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub grid_s: usize,
    pub cell_len: usize,
    pub data: Vec<f64>,
}

impl RawGrid {
    pub fn zeros(grid_s: usize, cell_len: usize) -> Self {
        Self {
            grid_s,
            cell_len,
            data: vec![0.0; grid_s * grid_s * cell_len],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid_s * self.grid_s
    }

    pub fn n_classes(&self) -> usize {
        self.cell_len - 5
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.grid_s + j
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = self.cell_index(i, j);
        &self.data[c * self.cell_len..(c + 1) * self.cell_len]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let c = self.cell_index(i, j);
        &mut self.data[c * self.cell_len..(c + 1) * self.cell_len]
    }

    pub fn objectness_logit(&self, cell: usize) -> f64 {
        self.data[cell * self.cell_len]
    }

    /// Ĉ for every cell.
    pub fn objectness(&self) -> Vec<f64> {
        (0..self.n_cells())
            .map(|c| sigmoid(self.objectness_logit(c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    config: DetectorConfig,
    shapes: Vec<ConvShape>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of every layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of the hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Offset of the objectness bias inside the flat parameter vector.
fn objectness_bias_offset(shapes: &[ConvShape]) -> usize {
    let head = shapes.last().expect("head layer");
    let before: usize = shapes[..shapes.len() - 1].iter().map(|s| s.param_len()).sum();
    before + head.weight_len()
}

impl DetectorModel {
    pub fn from_params(config: DetectorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let expect: usize = shapes.iter().map(|s| s.param_len()).sum();
        if params.len() != expect {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture with {expect}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            shapes,
            params,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn shapes(&self) -> &[ConvShape] {
        &self.shapes
    }

    fn layer_params(&self) -> Vec<&[f64]> {
        let mut rest = self.params.as_slice();
        self.shapes
            .iter()
            .map(|s| {
                let (a, b) = rest.split_at(s.param_len());
                rest = b;
                a
            })
            .collect()
    }

    /// Rounds every parameter to f32 precision, as persisted on disk.
    pub fn quantize_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    }

    fn check_image(&self, image: &SpectrogramImage) -> Result<()> {
        if image.height() != self.config.input_h || image.width() != self.config.input_w {
            return Err(Error::Dimension(format!(
                "image {}x{} for detector input {}x{}",
                image.height(),
                image.width(),
                self.config.input_h,
                self.config.input_w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &SpectrogramImage) -> Result<RawGrid> {
        Ok(self.forward_taped(image)?.0)
    }

    pub fn forward_taped(&self, image: &SpectrogramImage) -> Result<(RawGrid, Tape)> {
        self.check_image(image)?;
        Ok(self.forward_pixels(image.pixels()))
    }

    pub(crate) fn forward_pixels(&self, pixels: &[f64]) -> (RawGrid, Tape) {
        let layers = self.layer_params();
        let n = self.shapes.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut x = pixels.to_vec();
        let mut out = Vec::new();
        for (l, s) in self.shapes.iter().enumerate() {
            conv::forward(s, layers[l], &x, &mut out);
            inputs.push(std::mem::take(&mut x));
            if l + 1 < n {
                x = out
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
                    .collect();
                pre.push(std::mem::take(&mut out));
            }
        }
        (self.head_to_grid(&out), Tape { inputs, pre })
    }

    /// Head output is [channel][image row][col]; grid rows run upward.
    fn head_to_grid(&self, head: &[f64]) -> RawGrid {
        let s = self.config.grid_s;
        let d = self.config.cell_len();
        let mut grid = RawGrid::zeros(s, d);
        for c in 0..d {
            for r in 0..s {
                for j in 0..s {
                    grid.cell_mut(s - 1 - r, j)[c] = head[(c * s + r) * s + j];
                }
            }
        }
        grid
    }

    fn grid_to_head(&self, grid: &RawGrid) -> Vec<f64> {
        let s = self.config.grid_s;
        let d = self.config.cell_len();
        let mut head = vec![0.0; d * s * s];
        for c in 0..d {
            for r in 0..s {
                for j in 0..s {
                    head[(c * s + r) * s + j] = grid.cell(s - 1 - r, j)[c];
                }
            }
        }
        head
    }

    /// Reverse pass from a gradient on the raw grid. Accumulates parameter
    /// gradients into `d_params` when given; returns the gradient with
    /// respect to the input pixels when `want_input` is set.
    pub fn backward(&self, tape: &Tape, d_grid: &RawGrid, d_params: Option<&mut [f64]>, want_input: bool) -> Option<Vec<f64>> {
        let layers = self.layer_params();
        let n = self.shapes.len();
        let mut g = self.grid_to_head(d_grid);
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for s in &self.shapes {
            offsets.push(off);
            off += s.param_len();
        }
        let mut d_params = d_params;
        let mut d_in = Vec::new();
        for l in (0..n).rev() {
            let s = &self.shapes[l];
            let dp = d_params
                .as_deref_mut()
                .map(|dp| &mut dp[offsets[l]..offsets[l] + s.param_len()]);
            let need_input = l > 0 || want_input;
            conv::backward(
                s,
                layers[l],
                &tape.inputs[l],
                &g,
                dp,
                if need_input { Some(&mut d_in) } else { None },
            );
            if l > 0 {
                // through the leaky-ReLU of layer l-1
                let pre = &tape.pre[l - 1];
                g = d_in
                    .iter()
                    .zip(pre)
                    .map(|(&d, &p)| if p > 0.0 { d } else { LEAKY_SLOPE * d })
                    .collect();
            }
        }
        want_input.then_some(d_in)
    }

    /// Gradient of a scalar loss of the raw grid with respect to every input
    /// pixel. `loss_fn` returns the loss and its gradient on the grid.
    pub fn backward_to_input<F>(&self, image: &SpectrogramImage, loss_fn: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&RawGrid) -> (f64, RawGrid),
    {
        let (raw, tape) = self.forward_taped(image)?;
        let (loss, d_grid) = loss_fn(&raw);
        let g = self.backward(&tape, &d_grid, None, true).expect("input gradient requested");
        Ok((loss, g))
    }
}

/// Deterministic initialization: He-normal hidden weights, small head
/// weights, zero biases except objectness at logit(0.01).
pub fn init_model(config: &DetectorConfig, seed: u64) -> Result<DetectorModel> {
    config.validate()?;
    let shapes = config.layer_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(config.param_count());
    for (l, s) in shapes.iter().enumerate() {
        let fan_in = (s.c_in * s.kernel * s.kernel) as f64;
        let mut std = (2.0 / fan_in).sqrt();
        if l + 1 == shapes.len() {
            // keep initial head outputs near their biases
            std *= 0.01;
        }
        let normal = Normal::new(0.0, std).expect("positive std");
        params.extend((0..s.weight_len()).map(|_| normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, s.c_out));
    }
    let obj = objectness_bias_offset(&shapes);
    params[obj] = (0.01f64 / 0.99).ln();
    DetectorModel::from_params(config.clone(), params)
}

/// Positive-frequency grayscale spectrogram of a signal.
pub fn spectrogram(signal: &SignalBuffer, engine: &StftEngine, mapping: &DbMapping) -> Result<SpectrogramImage> {
    let y = engine.forward(signal)?;
    let (mag, _) = split(&y);
    Ok(to_grayscale(&mag, mapping))
}

/// Full cascade: STFT, magnitude, grayscale, network, decoding.
pub fn detect_signal(model: &DetectorModel, signal: &SignalBuffer, engine: &StftEngine, mapping: &DbMapping) -> Result<Vec<DetectionBox>> {
    let image = spectrogram(signal, engine, mapping)?;
    let raw = model.forward(&image)?;
    Ok(decode(&raw, model.config.conf_thresh, model.config.nms_iou))
}

/// Detection with the mapping frozen from the signal's own magnitudes.
pub fn detect_signal_auto(model: &DetectorModel, signal: &SignalBuffer, engine: &StftEngine) -> Result<Vec<DetectionBox>> {
    let y = engine.forward(signal)?;
    let (mag, _) = split(&y);
    let mapping = DbMapping::from_magnitude(&mag);
    let raw = model.forward(&to_grayscale(&mag, &mapping))?;
    Ok(decode(&raw, model.config.conf_thresh, model.config.nms_iou))
}
