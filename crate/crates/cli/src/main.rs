use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tfadv::attack::{report_csv_row, AttackMethod, REPORT_CSV_HEADER};
use tfadv::config::{write_run_manifest, RunConfig, KEYS};
use tfadv::detector::{init_model, load_model, save_model, spectrogram, train};
use tfadv::experiment::{
    attack_experiment, load_samples, perturb_dataset, ratio_table, round_trip_ratios, table1_csv, table2_csv,
    train_val_split, Perturber, RatioBasis,
};
use tfadv::norm_theory::{bound_constant, monte_carlo, summarize, trials_csv, vector_sum_inequality_check};
use tfadv::signal::{build_dataset, generate_burst_signal, read_signal_file, write_signal_file, DatasetManifest};
use tfadv::spectrogram::DbMapping;
use tfadv::stft::{round_trip_error, split, StftEngine};
use tfadv::{Error, Result};

/// Adversarial magnitude perturbations against a spectrogram burst detector.
#[derive(Parser)]
#[command(name = "tfadv", version, after_help = keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set attack.alpha=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pgd,
    Fgm,
    Rn,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic burst dataset with labels and a manifest.
    GenData {
        /// Number of signals (default: gen.n_files).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack every signal of a dataset split and write adversarial signals.
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides attack.method.
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Overrides attack.alpha.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Clean and attacked metrics table plus the perturbation ratio table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Monte-Carlo check of the time-domain norm bound and the vector-sum
    /// inequality.
    VerifyTheorem {
        #[arg(long)]
        out: PathBuf,
        /// Overrides theorem.trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Signal to perturb (default: one generated from the gen.* keys).
        #[arg(long)]
        signal: Option<PathBuf>,
    },
    /// Spectrogram images and a waveform CSV for a clean/adversarial pair.
    Plot {
        #[arg(long)]
        signal: PathBuf,
        #[arg(long)]
        adv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Round-trip reconstruction error of a dataset at the analysis STFT.
    Roundtrip {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (default):\n");
    for (k, v, d) in KEYS {
        s.push_str(&format!("  {k:<26} {v:<20} {d}\n"));
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::layered(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(s) = cli.common.seed {
        config.set("seed", &s.to_string())?;
    }
    if let Some(w) = cli.common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    match cli.command {
        Command::GenData { n, out } => gen_data(&config, n, &out, &command_line),
        Command::Train { data, out } => cmd_train(&config, &data, &out, &command_line),
        Command::Attack {
            data,
            model,
            out,
            method,
            alpha,
            split,
        } => {
            if let Some(m) = method {
                let name = match m {
                    Method::Pgd => "pgd",
                    Method::Fgm => "fgm",
                    Method::Rn => "rn",
                };
                config.set("attack.method", name)?;
            }
            if let Some(a) = alpha {
                config.set("attack.alpha", &a.to_string())?;
            }
            cmd_attack(&config, &data, &model, &out, split, &command_line)
        }
        Command::Eval { data, model, out, split } => cmd_eval(&config, &data, &model, &out, split, &command_line),
        Command::VerifyTheorem { out, trials, signal } => {
            if let Some(t) = trials {
                config.set("theorem.trials", &t.to_string())?;
            }
            cmd_verify(&config, signal.as_deref(), &out, &command_line)
        }
        Command::Plot { signal, adv, out } => cmd_plot(&config, &signal, adv.as_deref(), &out, &command_line),
        Command::Roundtrip { data, out } => cmd_roundtrip(&config, &data, &out, &command_line),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn select(config: &RunConfig, data: &Path, split: Split) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(data)?;
    let (train_set, val_set) = train_val_split(&manifest, config.val_fraction()?);
    let chosen = match split {
        Split::All => manifest,
        Split::Train => train_set,
        Split::Val => val_set,
    };
    if chosen.is_empty() {
        return Err(Error::Config(format!("no signals selected from {}", data.display())));
    }
    Ok(chosen)
}

fn gen_data(config: &RunConfig, n: Option<usize>, out: &Path, command: &str) -> Result<()> {
    let n = match n {
        Some(n) => n,
        None => config.n_files()?,
    };
    let gen = config.gen_config()?;
    let manifest = build_dataset(n, &gen, out)?;
    let bursts: usize = (0..manifest.len())
        .map(|i| manifest.load_labels(i).map(|l| l.len()))
        .sum::<Result<usize>>()?;
    log::info!("wrote {} signals with {bursts} bursts to {}", manifest.len(), out.display());
    write_run_manifest(out, command, config, &[&out.join(tfadv::signal::MANIFEST_FILE)])
}

fn cmd_train(config: &RunConfig, data: &Path, out: &Path, command: &str) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", data.display())));
    }
    let engine = StftEngine::new(config.stft_config()?)?;
    let (train_m, val_m) = train_val_split(&manifest, config.val_fraction()?);
    let train_set = load_samples(&train_m, &engine)?;
    let val_set = load_samples(&val_m, &engine)?;
    log::info!("training on {} signals, validating on {}", train_set.len(), val_set.len());
    let mut model = init_model(&config.detector_config()?, config.seed()?)?;
    let history = train(&mut model, &train_set, &val_set, &config.train_config()?)?;
    create_dir(out)?;
    let model_path = out.join("model.bin");
    let hist_path = out.join("history.csv");
    save_model(&model, &model_path)?;
    write(&hist_path, history.to_csv())?;
    if let Some(m) = history.val.last() {
        println!("val mAP {:.4}  recall {:.4}  precision {:.4}", m.map, m.recall, m.precision);
    }
    write_run_manifest(out, command, config, &[&model_path, &hist_path])
}

fn cmd_attack(config: &RunConfig, data: &Path, model_path: &Path, out: &Path, split: Split, command: &str) -> Result<()> {
    let model = load_model(model_path)?;
    let manifest = select(config, data, split)?;
    let engine = StftEngine::new(config.stft_config()?)?;
    let attack = config.attack_config()?;
    create_dir(out)?;
    let items = perturb_dataset(&model, &manifest, &engine, &Perturber::Attack(attack.clone()))?;
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    let mut outputs = Vec::new();
    let mut clipped = 0;
    for (entry, item) in manifest.entries.iter().zip(&items) {
        let name = entry.signal.display().to_string();
        let path = out.join(format!("adv_{name}"));
        clipped += write_signal_file(&item.signal, &path)?;
        outputs.push(path);
        csv.push_str(&report_csv_row(&name, item.report.as_ref().expect("attack report")));
        csv.push('\n');
    }
    if clipped > 0 {
        log::warn!("{clipped} samples clipped to the i16 range");
    }
    let report_path = out.join("attack_report.csv");
    write(&report_path, &csv)?;
    outputs.push(report_path);
    let fewer = items
        .iter()
        .filter_map(|i| i.report.as_ref())
        .filter(|r| r.detections_after < r.detections_before)
        .count();
    println!(
        "{} {}: {} signals, detections reduced on {fewer}",
        attack.method,
        attack.alpha,
        items.len()
    );
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_run_manifest(out, command, config, &refs)
}

fn cmd_eval(config: &RunConfig, data: &Path, model_path: &Path, out: &Path, split: Split, command: &str) -> Result<()> {
    let model = load_model(model_path)?;
    let manifest = select(config, data, split)?;
    let engine = StftEngine::new(config.stft_config()?)?;
    let base = config.attack_config()?;
    let methods = config.methods()?;
    let alphas = config.alphas()?;
    let basis = config.ratio_basis()?;
    let exp = attack_experiment(&model, &manifest, &engine, &methods, &alphas, &base)?;
    let ratio_conditions: Vec<_> = exp
        .conditions
        .iter()
        .filter(|c| c.method != AttackMethod::RandomNoise)
        .cloned()
        .collect();
    let table1 = ratio_table(&manifest, &engine, &ratio_conditions, basis)?;
    create_dir(out)?;
    let t1 = out.join("table1_ratios.csv");
    let t2 = out.join("table2_metrics.csv");
    let rp = out.join("attack_reports.csv");
    write(&t1, table1_csv(&table1, basis))?;
    write(&t2, table2_csv(&exp.rows, model.config().conf_thresh))?;
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for c in &exp.conditions {
        for (entry, r) in manifest.entries.iter().zip(&c.reports) {
            csv.push_str(&report_csv_row(&entry.signal.display().to_string(), r));
            csv.push('\n');
        }
    }
    write(&rp, csv)?;
    for r in &exp.rows {
        println!(
            "{:<10} mAP {:.4}  recall {:.4}  precision {:.4}",
            r.name, r.metrics.map, r.metrics.recall, r.metrics.precision
        );
    }
    write_run_manifest(out, command, config, &[&t1, &t2, &rp])
}

fn cmd_verify(config: &RunConfig, signal: Option<&Path>, out: &Path, command: &str) -> Result<()> {
    let engine = StftEngine::new(config.analysis_config()?)?;
    let gen = config.gen_config()?;
    let signal = match signal {
        Some(p) => read_signal_file(p, gen.sample_rate)?,
        None => generate_burst_signal(&gen)?.0,
    };
    let trials = config.trials()?;
    let rows = monte_carlo(&signal, &engine, trials, config.seed()?)?;
    create_dir(out)?;
    let trials_path = out.join("theorem_trials.csv");
    write(&trials_path, trials_csv(&rows))?;

    let mut vs = String::from("n,lhs,rhs,holds\n");
    for n in 1..=8usize {
        let c = vector_sum_inequality_check(&vec![1.0; n], &vec![0.0; n])?;
        vs.push_str(&format!("{n},{},{},{}\n", c.lhs, c.rhs, c.holds));
    }
    let vs_path = out.join("vector_sum.csv");
    write(&vs_path, vs)?;

    let s = summarize(&rows);
    let floor = rows.first().map_or(0.0, |r| r.check.roundtrip_floor);
    let summary = format!(
        "n_fft = {}\nbound_constant = {:.10}\ntrials = {}\nviolations = {}\nslack_ratio min = {:.6e}\nslack_ratio median = {:.6e}\nslack_ratio max = {:.6e}\nroundtrip_floor = {:.6e}\n",
        engine.config().n_fft,
        bound_constant(engine.config().n_fft),
        s.trials,
        s.violations,
        s.min,
        s.median,
        s.max,
        floor
    );
    let summary_path = out.join("summary.txt");
    write(&summary_path, &summary)?;
    println!(
        "trials {}  violations {}  slack median {:.3e}  max {:.3e}  (sqrt(3/N) = {:.7})",
        s.trials,
        s.violations,
        s.median,
        s.max,
        bound_constant(engine.config().n_fft)
    );
    write_run_manifest(out, command, config, &[&trials_path, &vs_path, &summary_path])
}

fn cmd_plot(config: &RunConfig, signal: &Path, adv: Option<&Path>, out: &Path, command: &str) -> Result<()> {
    let rate = config.gen_config()?.sample_rate;
    let engine = StftEngine::new(config.stft_config()?)?;
    let clean = read_signal_file(signal, rate)?;
    let adv = adv.map(|p| read_signal_file(p, rate)).transpose()?;
    if let Some(a) = &adv {
        if a.len() != clean.len() {
            return Err(Error::Dimension(format!(
                "clean signal has {} samples, adversarial {}",
                clean.len(),
                a.len()
            )));
        }
    }
    create_dir(out)?;
    let (mag, _) = split(&engine.forward(&clean)?);
    let mapping = DbMapping::from_magnitude(&mag);
    let mut outputs = vec![out.join("clean.pgm")];
    spectrogram(&clean, &engine, &mapping)?.write_pgm(&outputs[0])?;

    let mut csv = String::from("index,clean,adversarial,perturbation\n");
    match &adv {
        Some(a) => {
            let p = out.join("adversarial.pgm");
            spectrogram(a, &engine, &mapping)?.write_pgm(&p)?;
            outputs.push(p);
            for (i, (c, x)) in clean.samples().iter().zip(a.samples()).enumerate() {
                csv.push_str(&format!("{i},{c},{x},{}\n", x - c));
            }
        }
        None => {
            for (i, c) in clean.samples().iter().enumerate() {
                csv.push_str(&format!("{i},{c},{c},0\n"));
            }
        }
    }
    let wave = out.join("waveform.csv");
    write(&wave, csv)?;
    outputs.push(wave);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_run_manifest(out, command, config, &refs)
}

fn cmd_roundtrip(config: &RunConfig, data: &Path, out: &Path, command: &str) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    if manifest.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", data.display())));
    }
    let engine = StftEngine::new(config.analysis_config()?)?;
    let tf = round_trip_ratios(&manifest, &engine, RatioBasis::TimeFrequency)?;
    let mut rel = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        rel.push(round_trip_error(&manifest.load_signal(i)?, &engine)?);
    }
    create_dir(out)?;
    let mut csv = String::from("file,relative_error,time_ratio\n");
    for ((e, r), t) in manifest.entries.iter().zip(&rel).zip(&tf) {
        csv.push_str(&format!("{},{r:.9},{t:.9}\n", e.signal.display()));
    }
    let n = rel.len() as f64;
    let mean = rel.iter().sum::<f64>() / n;
    let summary = format!(
        "n_fft = {}\noverlap = {}\nsignals = {}\nrelative_error mean = {:.6}\nrelative_error min = {:.6}\nrelative_error max = {:.6}\ntime_ratio mean = {:.6e}\nreference (published, different data) = 0.04692\n",
        engine.config().n_fft,
        engine.config().overlap,
        rel.len(),
        mean,
        rel.iter().copied().fold(f64::INFINITY, f64::min),
        rel.iter().copied().fold(0.0, f64::max),
        tf.iter().sum::<f64>() / n
    );
    let csv_path = out.join("roundtrip.csv");
    let sum_path = out.join("summary.txt");
    write(&csv_path, csv)?;
    write(&sum_path, &summary)?;
    println!("mean relative round-trip error {:.3}% (published reference 4.692%)", 100.0 * mean);
    write_run_manifest(out, command, config, &[&csv_path, &sum_path])
}
