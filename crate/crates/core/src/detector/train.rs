//! Mini-batch SGD with momentum. Per-sample gradients are computed in
//! parallel and reduced in index order, so runs are bit-reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{decode, training_loss, DetectorModel, LossWeights};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::signal::GroundTruthLabel;
use crate::spectrogram::SpectrogramImage;

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: SpectrogramImage,
    pub labels: Vec<GroundTruthLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays on a cosine to `lr * lr_final_frac`.
    pub lr: f64,
    pub lr_final_frac: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling per step.
    pub clip_norm: f64,
    /// Std of Gaussian noise added to input pixels (0 disables).
    pub pixel_jitter: f64,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 0.01,
            lr_final_frac: 0.05,
            warmup_steps: 50,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            pixel_jitter: 0.0,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation metrics after each epoch (empty without a validation set).
    pub val: Vec<MetricsReport>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_map,val_recall,val_precision\n");
        for (e, loss) in self.epoch_loss.iter().enumerate() {
            match self.val.get(e) {
                Some(m) => out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    e + 1,
                    loss,
                    m.map,
                    m.recall,
                    m.precision
                )),
                None => out.push_str(&format!("{},{:.6},,,\n", e + 1, loss)),
            }
        }
        out
    }
}

fn sample_gradient(model: &DetectorModel, sample: &Sample, cfg: &TrainConfig, noise_seed: Option<u64>) -> Result<(f64, Vec<f64>)> {
    let pixels: std::borrow::Cow<[f64]> = match noise_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, cfg.pixel_jitter).expect("positive jitter");
            sample
                .image
                .pixels()
                .iter()
                .map(|&p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect::<Vec<_>>()
                .into()
        }
        None => sample.image.pixels().into(),
    };
    let (raw, tape) = model.forward_pixels(&pixels);
    let (loss, d_raw) = training_loss(&raw, &sample.labels, &cfg.loss)?;
    let mut grad = vec![0.0; model.params().len()];
    model.backward(&tape, &d_raw, Some(&mut grad), false);
    Ok((loss, grad))
}

/// Metrics of `model` on labelled samples at the model's decode thresholds.
pub fn validate(model: &DetectorModel, samples: &[Sample]) -> Result<MetricsReport> {
    let cfg = model.config();
    let pairs = samples
        .par_iter()
        .map(|s| {
            let raw = model.forward(&s.image)?;
            Ok((decode(&raw, cfg.conf_thresh, cfg.nms_iou), s.labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_predictions(&pairs, cfg.n_classes, cfg.conf_thresh))
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(model: &mut DetectorModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
    }
    let n_params = model.params().len();
    let mut velocity = vec![0.0; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jitter_base = step as u64 * 1_000_003 + cfg.seed;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(b, &idx)| {
                    let noise = (cfg.pixel_jitter > 0.0).then(|| jitter_base.wrapping_add(b as u64));
                    sample_gradient(model, &train_set[idx], cfg, noise)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let gnorm = crate::signal::l2(&grad);
            if gnorm > cfg.clip_norm {
                let s = cfg.clip_norm / gnorm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            let lr = learning_rate(cfg, step, total_steps);
            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            epoch_loss += batch_loss;
            step += 1;
        }
        let mean_loss = epoch_loss / train_set.len() as f64;
        history.epoch_loss.push(mean_loss);
        if !val_set.is_empty() {
            let m = validate(model, val_set)?;
            log::info!(
                "epoch {:3}  loss {:.4}  val mAP {:.3}  recall {:.3}  precision {:.3}",
                epoch + 1,
                mean_loss,
                m.map,
                m.recall,
                m.precision
            );
            history.val.push(m);
        } else {
            log::info!("epoch {:3}  loss {:.4}", epoch + 1, mean_loss);
        }
    }
    Ok(history)
}

fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let t = (step - cfg.warmup_steps) as f64 / (total.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let floor = cfg.lr * cfg.lr_final_frac;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}
