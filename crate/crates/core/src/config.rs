//! Run configuration: a flat table of dotted keys with built-in defaults,
//! overridden by a `key = value` file and then by individual assignments.
//! Unknown keys are rejected at every layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackMethod, NormScope};
use crate::detector::{DetectorConfig, LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::experiment::RatioBasis;
use crate::signal::{BurstKind, GenConfig};
use crate::stft::StftConfig;

/// Every accepted key with its default value and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("stft.n_fft", "256", "detector STFT window length"),
    ("stft.overlap", "84", "detector STFT overlap in samples"),
    ("analysis.n_fft", "2048", "window length for roundtrip and verify-theorem"),
    ("analysis.overlap", "48", "overlap for roundtrip and verify-theorem"),
    ("gen.n_files", "500", "number of generated signals"),
    ("gen.n_bursts", "1,4", "bursts per signal, min,max"),
    ("gen.freq_range", "40000,460000", "burst centre frequency range, Hz"),
    ("gen.duration_range", "0.0025,0.008", "burst duration range, s"),
    ("gen.amplitude_range", "0.05,0.2", "burst amplitude range"),
    ("gen.chirp_bw_range", "30000,80000", "chirp sweep width range, Hz"),
    ("gen.fsk_dev_range", "10000,20000", "FSK deviation range, Hz"),
    ("gen.fsk_symbol_s", "0.0005", "FSK symbol length, s"),
    ("gen.freq_guard_hz", "16000", "label margin around the occupied band, Hz"),
    ("gen.noise_floor_std", "0.02", "white noise standard deviation"),
    ("gen.burst_kinds", "tone,chirp,fsk", "burst classes to draw from"),
    ("gen.signal_length", "22100", "samples per signal"),
    ("gen.sample_rate", "1000000", "sample rate, Hz"),
    ("detector.input", "128", "input image side"),
    ("detector.grid", "8", "output grid side"),
    ("detector.n_classes", "3", "number of classes"),
    ("detector.channels", "8,16,32,32,32", "channels of the 3x3 blocks"),
    ("detector.conf_thresh", "0.25", "decode confidence threshold"),
    ("detector.nms_iou", "0.45", "non-maximum suppression IoU"),
    ("train.epochs", "50", "training epochs"),
    ("train.batch_size", "8", "mini-batch size"),
    ("train.lr", "0.01", "peak learning rate"),
    ("train.lr_final_frac", "0.05", "final learning rate as a fraction of the peak"),
    ("train.warmup_steps", "50", "linear warm-up steps"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0005", "L2 weight decay"),
    ("train.clip_norm", "10", "gradient norm ceiling"),
    ("train.pixel_jitter", "0", "std of input pixel noise"),
    ("train.val_fraction", "0.2", "trailing fraction of the dataset held out"),
    ("train.lambda_noobj", "1", "weight of the no-object term"),
    ("train.lambda_box", "5", "weight of the box term"),
    ("train.lambda_class", "1", "weight of the class term"),
    ("attack.method", "pgd", "pgd, fgm or rn"),
    ("attack.alpha", "0.02", "budget ||beta|| / ||y||"),
    ("attack.alphas", "0.01,0.02,0.05,0.1", "budgets swept by eval"),
    ("attack.methods", "rn,fgm,pgd", "methods swept by eval"),
    ("attack.n_iter", "50", "PGD iterations"),
    ("attack.step_eps", "auto", "PGD step L2 size (auto: 0.2 * alpha * ||y||)"),
    ("attack.clip_eps", "auto", "element clip (auto: 10 x median magnitude)"),
    ("attack.decay", "0.5", "step decay factor"),
    ("attack.lambda", "1", "vanishing loss weight"),
    ("attack.norm_scope", "full", "full or half: bins entering the norms"),
    ("attack.resynthesis_aware", "true", "PGD tests and differentiates the resynthesized signal"),
    ("attack.ratio_basis", "tf", "tf or signal: denominator of time ratios"),
    ("theorem.trials", "1000", "Monte-Carlo trials"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config file: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a known configuration key"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| err(key, format!("cannot parse {v:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| err(key, format!("cannot parse {s:?}"))))
            .collect()
    }

    fn pair<T: std::str::FromStr + Copy>(&self, key: &str) -> Result<(T, T)> {
        match self.list::<T>(key)?.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(err(key, "expected two comma-separated values")),
        }
    }

    fn auto(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            "auto" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.parse("stft.n_fft")?, self.parse("stft.overlap")?).map_err(|e| err("stft", e))
    }

    pub fn analysis_config(&self) -> Result<StftConfig> {
        StftConfig::new(self.parse("analysis.n_fft")?, self.parse("analysis.overlap")?).map_err(|e| err("analysis", e))
    }

    pub fn n_files(&self) -> Result<usize> {
        self.parse("gen.n_files")
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let kinds = self
            .get("gen.burst_kinds")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| BurstKind::from_name(s).ok_or_else(|| err("gen.burst_kinds", format!("unknown kind {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = GenConfig {
            n_bursts: self.pair("gen.n_bursts")?,
            freq_range: self.pair("gen.freq_range")?,
            duration_range: self.pair("gen.duration_range")?,
            amplitude_range: self.pair("gen.amplitude_range")?,
            chirp_bw_range: self.pair("gen.chirp_bw_range")?,
            fsk_dev_range: self.pair("gen.fsk_dev_range")?,
            fsk_symbol_s: self.parse("gen.fsk_symbol_s")?,
            freq_guard_hz: self.parse("gen.freq_guard_hz")?,
            noise_floor_std: self.parse("gen.noise_floor_std")?,
            burst_kinds: kinds,
            signal_length: self.parse("gen.signal_length")?,
            sample_rate: self.parse("gen.sample_rate")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let side: usize = self.parse("detector.input")?;
        let cfg = DetectorConfig {
            input_h: side,
            input_w: side,
            grid_s: self.parse("detector.grid")?,
            n_classes: self.parse("detector.n_classes")?,
            channels: self.list("detector.channels")?,
            conf_thresh: self.parse("detector.conf_thresh")?,
            nms_iou: self.parse("detector.nms_iou")?,
        };
        cfg.validate().map_err(|e| err("detector", e))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            lr: self.parse("train.lr")?,
            lr_final_frac: self.parse("train.lr_final_frac")?,
            warmup_steps: self.parse("train.warmup_steps")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            clip_norm: self.parse("train.clip_norm")?,
            pixel_jitter: self.parse("train.pixel_jitter")?,
            loss: LossWeights {
                noobj: self.parse("train.lambda_noobj")?,
                boxes: self.parse("train.lambda_box")?,
                class: self.parse("train.lambda_class")?,
            },
            seed: self.seed()?,
        })
    }

    pub fn val_fraction(&self) -> Result<f64> {
        let v: f64 = self.parse("train.val_fraction")?;
        if !(0.0..1.0).contains(&v) {
            return Err(err("train.val_fraction", format!("{v} is outside [0, 1)")));
        }
        Ok(v)
    }

    fn method(key: &str, s: &str) -> Result<AttackMethod> {
        AttackMethod::parse(s).ok_or_else(|| err(key, format!("unknown method {s:?}")))
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            method: Self::method("attack.method", self.get("attack.method"))?,
            alpha: self.parse("attack.alpha")?,
            n_iter: self.parse("attack.n_iter")?,
            step_eps: self.auto("attack.step_eps")?,
            clip_eps: self.auto("attack.clip_eps")?,
            decay: self.parse("attack.decay")?,
            lambda: self.parse("attack.lambda")?,
            norm_scope: match self.get("attack.norm_scope") {
                "full" => NormScope::Full,
                "half" => NormScope::PositiveHalf,
                other => return Err(err("attack.norm_scope", format!("expected full or half, got {other:?}"))),
            },
            resynthesis_aware: self.parse("attack.resynthesis_aware")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alphas(&self) -> Result<Vec<f64>> {
        let a: Vec<f64> = self.list("attack.alphas")?;
        if a.iter().any(|&x| !(x >= 0.0)) {
            return Err(err("attack.alphas", "budgets must be non-negative"));
        }
        Ok(a)
    }

    pub fn methods(&self) -> Result<Vec<AttackMethod>> {
        self.get("attack.methods")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::method("attack.methods", s))
            .collect()
    }

    pub fn ratio_basis(&self) -> Result<RatioBasis> {
        let v = self.get("attack.ratio_basis");
        RatioBasis::parse(v).ok_or_else(|| err("attack.ratio_basis", format!("expected tf or signal, got {v:?}")))
    }

    pub fn trials(&self) -> Result<usize> {
        self.parse("theorem.trials")
    }

    /// Every key with its resolved value, in the file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

/// Writes `run.txt` into `dir`: the command line, the resolved
/// configuration and a SHA-256 digest of each output file.
pub fn write_run_manifest(dir: impl AsRef<Path>, command: &str, config: &RunConfig, outputs: &[&Path]) -> Result<()> {
    let dir = dir.as_ref();
    let mut out = format!("# tfadv run manifest\ncommand = {command}\n\n[config]\n");
    out.push_str(&config.to_text());
    out.push_str("\n[outputs]\n");
    for p in outputs {
        let bytes = std::fs::read(p).map_err(|e| Error::io(*p, e))?;
        let name = p.strip_prefix(dir).unwrap_or(p);
        writeln!(out, "{} = {}", name.display(), hex::encode(Sha256::digest(&bytes))).unwrap();
    }
    let path = dir.join("run.txt");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
}
