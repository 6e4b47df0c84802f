//! Dataset-level drivers: loading training samples, evaluating a model on
//! clean or perturbed signals, and the attack/ratio experiment tables.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attack::{run_attack, AdversarialExample, AttackConfig, AttackMethod, AttackReport, Termination};
use crate::detector::{detect_signal_auto, DetectionBox, DetectorModel, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::signal::{DatasetManifest, GroundTruthLabel, SignalBuffer};
use crate::spectrogram::{to_grayscale, DbMapping};
use crate::stft::{split, StftEngine};

/// Spectrogram image (mapping taken from each signal) and labels for every
/// manifest entry.
pub fn load_samples(manifest: &DatasetManifest, engine: &StftEngine) -> Result<Vec<Sample>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let signal = manifest.load_signal(i)?;
            let (mag, _) = split(&engine.forward(&signal)?);
            let mapping = DbMapping::from_magnitude(&mag);
            Ok(Sample {
                image: to_grayscale(&mag, &mapping),
                labels: manifest.load_labels(i)?,
            })
        })
        .collect()
}

/// Splits a manifest into (train, validation), the validation part being the
/// trailing `val_fraction` of entries (at least one when there are two or
/// more entries and the fraction is positive).
pub fn train_val_split(manifest: &DatasetManifest, val_fraction: f64) -> (DatasetManifest, DatasetManifest) {
    let n = manifest.len();
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let n_val = n_val.min(n);
    (manifest.subset(0..n - n_val), manifest.subset(n - n_val..n))
}

fn require_entries(manifest: &DatasetManifest) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::Config(format!(
            "manifest under {} has no entries",
            manifest.root.display()
        )));
    }
    Ok(())
}

/// What happens to each signal before detection.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturber {
    None,
    /// STFT followed by ISTFT, no perturbation.
    RoundTrip,
    /// Attack (or random noise) with the per-file seed `config.seed + index`.
    Attack(AttackConfig),
}

/// One perturbed signal with its attack report (absent for `None`).
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub signal: SignalBuffer,
    pub report: Option<AttackReport>,
    pub labels: Vec<GroundTruthLabel>,
}

fn zero_gradient_fallback(signal: &SignalBuffer, engine: &StftEngine, model: &DetectorModel, config: &AttackConfig) -> Result<AdversarialExample> {
    // FGM has no direction to move in; the signal only goes through the
    // round trip, like an attack with alpha = 0.
    let zero = AttackConfig {
        alpha: 0.0,
        ..config.clone()
    };
    let mut adv = run_attack(model, signal, engine, &zero)?;
    adv.report.alpha = config.alpha;
    adv.report.terminated_by = Termination::MaxIter;
    Ok(adv)
}

pub fn perturb_one(model: &DetectorModel, manifest: &DatasetManifest, i: usize, engine: &StftEngine, perturber: &Perturber) -> Result<Perturbed> {
    let signal = manifest.load_signal(i)?;
    let labels = manifest.load_labels(i)?;
    let (signal, report) = match perturber {
        Perturber::None => (signal, None),
        Perturber::RoundTrip => (engine.round_trip(&signal)?, None),
        Perturber::Attack(cfg) => {
            let cfg = AttackConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let adv = match run_attack(model, &signal, engine, &cfg) {
                Err(Error::ZeroGradient) => zero_gradient_fallback(&signal, engine, model, &cfg)?,
                other => other?,
            };
            (adv.signal, Some(adv.report))
        }
    };
    Ok(Perturbed { signal, report, labels })
}

/// Perturbs every manifest entry (in parallel, results in manifest order).
pub fn perturb_dataset(model: &DetectorModel, manifest: &DatasetManifest, engine: &StftEngine, perturber: &Perturber) -> Result<Vec<Perturbed>> {
    require_entries(manifest)?;
    (0..manifest.len())
        .into_par_iter()
        .map(|i| perturb_one(model, manifest, i, engine, perturber))
        .collect()
}

/// Detections of every perturbed signal paired with its labels.
pub fn detect_all(model: &DetectorModel, items: &[Perturbed], engine: &StftEngine) -> Result<Vec<(Vec<DetectionBox>, Vec<GroundTruthLabel>)>> {
    items
        .par_iter()
        .map(|p| Ok((detect_signal_auto(model, &p.signal, engine)?, p.labels.clone())))
        .collect()
}

pub fn evaluate_dataset(model: &DetectorModel, manifest: &DatasetManifest, engine: &StftEngine, perturber: &Perturber) -> Result<MetricsReport> {
    let items = perturb_dataset(model, manifest, engine, perturber)?;
    let pairs = detect_all(model, &items, engine)?;
    let cfg = model.config();
    Ok(evaluate_predictions(&pairs, cfg.n_classes, cfg.conf_thresh))
}

/// Metrics table row: a name such as `Sample`, `RN_0.01` or `PGD_0.02` and the
/// metrics under that condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub name: String,
    pub method: Option<AttackMethod>,
    pub alpha: f64,
    pub metrics: MetricsReport,
}

/// Per-file reports of one (method, alpha) condition.
#[derive(Debug, Clone)]
pub struct ConditionReports {
    pub method: AttackMethod,
    pub alpha: f64,
    pub reports: Vec<AttackReport>,
}

#[derive(Debug, Clone)]
pub struct AttackExperiment {
    pub rows: Vec<ExperimentRow>,
    pub conditions: Vec<ConditionReports>,
}

/// Order of the method blocks in the results table.
pub const TABLE_METHOD_ORDER: [AttackMethod; 3] = [AttackMethod::RandomNoise, AttackMethod::Fgm, AttackMethod::Pgd];

pub fn row_name(method: AttackMethod, alpha: f64) -> String {
    format!("{}_{}", method.tag(), alpha)
}

/// Clean row followed by one row per (method, alpha), methods in
/// [`TABLE_METHOD_ORDER`] restricted to `methods`, alphas in the given order.
pub fn attack_experiment(
    model: &DetectorModel,
    manifest: &DatasetManifest,
    engine: &StftEngine,
    methods: &[AttackMethod],
    alphas: &[f64],
    base: &AttackConfig,
) -> Result<AttackExperiment> {
    require_entries(manifest)?;
    let cfg = model.config();
    let mut rows = vec![ExperimentRow {
        name: "Sample".into(),
        method: None,
        alpha: 0.0,
        metrics: evaluate_dataset(model, manifest, engine, &Perturber::None)?,
    }];
    let mut conditions = Vec::new();
    for method in TABLE_METHOD_ORDER.into_iter().filter(|m| methods.contains(m)) {
        for &alpha in alphas {
            let attack = AttackConfig {
                method,
                alpha,
                ..base.clone()
            };
            let items = perturb_dataset(model, manifest, engine, &Perturber::Attack(attack))?;
            let pairs = detect_all(model, &items, engine)?;
            let metrics = evaluate_predictions(&pairs, cfg.n_classes, cfg.conf_thresh);
            log::info!(
                "{:<10} mAP {:.3}  recall {:.3}  precision {:.3}",
                row_name(method, alpha),
                metrics.map,
                metrics.recall,
                metrics.precision
            );
            rows.push(ExperimentRow {
                name: row_name(method, alpha),
                method: Some(method),
                alpha,
                metrics,
            });
            conditions.push(ConditionReports {
                method,
                alpha,
                reports: items.into_iter().map(|p| p.report.expect("attack report")).collect(),
            });
        }
    }
    Ok(AttackExperiment { rows, conditions })
}

pub const TABLE2_HEADER: &str = "row,map,recall,precision";

pub fn table2_csv(rows: &[ExperimentRow], conf_thresh: f64) -> String {
    let mut out = format!("# precision and recall at confidence >= {conf_thresh}\n{TABLE2_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.name, r.metrics.map, r.metrics.recall, r.metrics.precision
        )
        .unwrap();
    }
    out
}

/// Denominator of the time-domain perturbation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioBasis {
    /// ||x' - x|| / ||y||, the same denominator as the budget.
    TimeFrequency,
    /// ||x' - x|| / ||x||.
    Signal,
}

impl RatioBasis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tf" | "time_frequency" => Some(RatioBasis::TimeFrequency),
            "signal" => Some(RatioBasis::Signal),
            _ => None,
        }
    }

    fn pick(self, r: &AttackReport) -> f64 {
        match self {
            RatioBasis::TimeFrequency => r.time_ratio,
            RatioBasis::Signal => r.signal_ratio,
        }
    }
}

/// Ratio table row. `method` is `None` for the unperturbed round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub method: Option<AttackMethod>,
    pub alpha: f64,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

fn stats(method: Option<AttackMethod>, alpha: f64, v: &[f64]) -> RatioRow {
    let n = v.len().max(1) as f64;
    RatioRow {
        method,
        alpha,
        mean: v.iter().sum::<f64>() / n,
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Time-domain ratio of the plain round trip of each signal.
pub fn round_trip_ratios(manifest: &DatasetManifest, engine: &StftEngine, basis: RatioBasis) -> Result<Vec<f64>> {
    require_entries(manifest)?;
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let x = manifest.load_signal(i)?;
            let y = engine.forward(&x)?;
            let rec = engine.inverse(&y, x.len())?.signal;
            let d = crate::signal::l2(&rec.samples().iter().zip(x.samples()).map(|(a, b)| a - b).collect::<Vec<_>>());
            let denom = match basis {
                RatioBasis::TimeFrequency => y.norm(),
                RatioBasis::Signal => x.norm(),
            };
            Ok(if denom > 0.0 { d / denom } else { 0.0 })
        })
        .collect()
}

/// Ratio table from already computed attack reports: the round-trip row first,
/// then one row per condition.
pub fn ratio_table(manifest: &DatasetManifest, engine: &StftEngine, conditions: &[ConditionReports], basis: RatioBasis) -> Result<Vec<RatioRow>> {
    let mut rows = vec![stats(None, 0.0, &round_trip_ratios(manifest, engine, basis)?)];
    for c in conditions {
        let v: Vec<f64> = c.reports.iter().map(|r| basis.pick(r)).collect();
        rows.push(stats(Some(c.method), c.alpha, &v));
    }
    Ok(rows)
}

/// Runs the attacks for every (method, alpha) and tabulates the time-domain
/// perturbation ratios.
pub fn ratio_experiment(
    model: &DetectorModel,
    manifest: &DatasetManifest,
    engine: &StftEngine,
    methods: &[AttackMethod],
    alphas: &[f64],
    base: &AttackConfig,
    basis: RatioBasis,
) -> Result<Vec<RatioRow>> {
    require_entries(manifest)?;
    let mut conditions = Vec::new();
    for &method in methods {
        for &alpha in alphas {
            let attack = AttackConfig {
                method,
                alpha,
                ..base.clone()
            };
            let items = perturb_dataset(model, manifest, engine, &Perturber::Attack(attack))?;
            conditions.push(ConditionReports {
                method,
                alpha,
                reports: items.into_iter().map(|p| p.report.expect("attack report")).collect(),
            });
        }
    }
    ratio_table(manifest, engine, &conditions, basis)
}

pub const TABLE1_HEADER: &str = "method,alpha,mean,max,min";

pub fn table1_csv(rows: &[RatioRow], basis: RatioBasis) -> String {
    let denom = match basis {
        RatioBasis::TimeFrequency => "||x'-x|| / ||stft(x)||",
        RatioBasis::Signal => "||x'-x|| / ||x||",
    };
    let mut out = format!("# time-domain perturbation ratio {denom}\n{TABLE1_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9}",
            r.method.map_or("None", |m| m.tag()),
            r.alpha,
            r.mean,
            r.max,
            r.min
        )
        .unwrap();
    }
    out
}
