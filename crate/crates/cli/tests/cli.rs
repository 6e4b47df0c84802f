use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tfadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfadv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run tfadv")
}

fn ok(args: &[&str]) -> Output {
    let out = tfadv(args);
    assert!(
        out.status.success(),
        "tfadv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn usage_error(args: &[&str]) -> String {
    let out = tfadv(args);
    assert_eq!(out.status.code(), Some(2), "tfadv {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Small dataset and a one-epoch model shared by several tests.
fn trained(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&["gen-data", "--n", "12", "--out", p(&data), "--seed", "4"]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--seed", "4", "--set", "train.epochs=1"]);
    (data, run.join("model.bin"))
}

#[test]
fn gen_data_writes_the_requested_count_reproducibly() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--n", "5", "--out", p(&a), "--seed", "11"]);
    ok(&["gen-data", "--n", "5", "--out", p(&b), "--seed", "11"]);
    let manifest = read(a.join("manifest.txt"));
    assert_eq!(manifest, read(b.join("manifest.txt")));
    let signals: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "i16"))
        .collect();
    assert_eq!(signals.len(), 5);
    for e in signals {
        let bytes = fs::read(e.path()).unwrap();
        assert_eq!(bytes.len(), 2 * 22_100);
        assert_eq!(bytes, fs::read(b.join(e.file_name())).unwrap());
    }
    assert!(read(a.join("run.txt")).contains("seed = 11"));
}

#[test]
fn inverted_range_is_a_usage_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let err = usage_error(&[
        "gen-data",
        "--n",
        "2",
        "--out",
        p(&dir.path().join("d")),
        "--set",
        "gen.freq_range=400000,100000",
    ]);
    assert!(err.contains("freq_range"), "{err}");
}

#[test]
fn unknown_key_and_bad_values_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir.path().join("d")).to_string();
    let err = usage_error(&["gen-data", "--out", &out, "--set", "gen.bogus=1"]);
    assert!(err.contains("gen.bogus"), "{err}");
    let err = usage_error(&["gen-data", "--out", &out, "--set", "gen.n_files=many"]);
    assert!(err.contains("gen.n_files"), "{err}");
    usage_error(&["gen-data", "--out", &out, "--workers", "0"]);
    usage_error(&["attack", "--data", &out]);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = dir.path().join("out");
    usage_error(&["train", "--data", p(&nowhere), "--out", p(&out)]);
    usage_error(&["roundtrip", "--data", p(&nowhere), "--out", p(&out)]);
    let data = dir.path().join("data");
    ok(&["gen-data", "--n", "3", "--out", p(&data)]);
    usage_error(&["attack", "--data", p(&data), "--model", p(&nowhere), "--out", p(&out)]);
    fs::write(dir.path().join("junk.bin"), b"not a model").unwrap();
    usage_error(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&dir.path().join("junk.bin")),
        "--out",
        p(&out),
    ]);
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--n", "0", "--out", p(&data)]);
    let err = usage_error(&["train", "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn verify_theorem_writes_every_trial() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("thm");
    ok(&["verify-theorem", "--out", p(&out), "--trials", "20"]);
    let trials = read(out.join("theorem_trials.csv"));
    assert_eq!(trials.lines().count(), 21);
    let vs = read(out.join("vector_sum.csv"));
    assert!(vs.lines().any(|l| l == "5,25,15,false"), "{vs}");
    assert!(vs.lines().any(|l| l == "3,9,9,true"), "{vs}");
    let summary = read(out.join("summary.txt"));
    assert!(summary.contains("n_fft = 2048"));
    assert!(summary.contains("bound_constant = 0.0382732"));
}

#[test]
fn roundtrip_reports_every_file() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("rt");
    ok(&["gen-data", "--n", "4", "--out", p(&data)]);
    let run = ok(&["roundtrip", "--data", p(&data), "--out", p(&out)]);
    let csv = read(out.join("roundtrip.csv"));
    assert_eq!(csv.lines().next(), Some("file,relative_error,time_ratio"));
    assert_eq!(csv.lines().count(), 5);
    assert!(read(out.join("summary.txt")).contains("0.04692"));
    assert!(!run.stdout.is_empty());
}

#[test]
fn train_attack_plot_and_eval() {
    let dir = TempDir::new().unwrap();
    let (data, model) = trained(dir.path());
    let run = model.parent().unwrap();
    let hist = read(run.join("history.csv"));
    assert_eq!(hist.lines().count(), 2);
    assert!(read(run.join("run.txt")).contains("train.epochs = 1"));

    let adv = dir.path().join("adv");
    ok(&[
        "attack", "--data", p(&data), "--model", p(&model), "--out", p(&adv), "--method", "pgd", "--alpha", "0.02",
        "--set", "attack.n_iter=3",
    ]);
    let report = read(adv.join("attack_report.csv"));
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let tf_col = header.iter().position(|h| *h == "tf_ratio").unwrap();
    let rows: Vec<&str> = lines.collect();
    // 12 signals, the trailing 20% are validation.
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let tf: f64 = r.split(',').nth(tf_col).unwrap().parse().unwrap();
        assert!(tf <= 0.02 + 1e-6, "{r}");
    }
    let adv_file = fs::read_dir(&adv)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "i16"))
        .unwrap();

    let clean_file = data.join(adv_file.file_name().unwrap().to_str().unwrap().trim_start_matches("adv_"));
    let plot = dir.path().join("plot");
    ok(&["plot", "--signal", p(&clean_file), "--adv", p(&adv_file), "--out", p(&plot)]);
    for img in ["clean.pgm", "adversarial.pgm"] {
        let bytes = fs::read(plot.join(img)).unwrap();
        assert!(bytes.starts_with(b"P5 128 128 255\n"), "{img}");
        assert_eq!(bytes.len(), b"P5 128 128 255\n".len() + 128 * 128);
    }
    let wave = read(plot.join("waveform.csv"));
    assert_eq!(wave.lines().next(), Some("index,clean,adversarial,perturbation"));
    assert_eq!(wave.lines().count(), 22_101);

    let eval = dir.path().join("eval");
    ok(&[
        "eval", "--data", p(&data), "--model", p(&model), "--out", p(&eval), "--set", "attack.alphas=0.02",
        "--set", "attack.n_iter=2",
    ]);
    let t2 = read(eval.join("table2_metrics.csv"));
    for row in ["Sample,", "RN_0.02,", "FGM_0.02,", "PGD_0.02,"] {
        assert!(t2.lines().any(|l| l.starts_with(row)), "{row} missing:\n{t2}");
    }
    let t1 = read(eval.join("table1_ratios.csv"));
    assert!(t1.lines().any(|l| l.starts_with("None,0,")));
    assert!(!t1.lines().any(|l| l.starts_with("RN,")));
    assert_eq!(read(eval.join("attack_reports.csv")).lines().count(), 1 + 3 * 2);
}

#[test]
fn zero_budget_attack_returns_the_round_trip() {
    let dir = TempDir::new().unwrap();
    let (data, model) = trained(dir.path());
    let adv = dir.path().join("adv");
    ok(&[
        "attack", "--data", p(&data), "--model", p(&model), "--out", p(&adv), "--method", "fgm", "--alpha", "0",
        "--split", "all",
    ]);
    let report = read(adv.join("attack_report.csv"));
    assert_eq!(report.lines().count(), 13);
    for row in report.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn pipeline_csvs_are_byte_identical_across_runs() {
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let dir = TempDir::new().unwrap();
            let (data, model) = trained(dir.path());
            let adv = dir.path().join("adv");
            let eval = dir.path().join("eval");
            ok(&[
                "attack", "--data", p(&data), "--model", p(&model), "--out", p(&adv), "--method", "rn", "--seed", "4",
            ]);
            ok(&[
                "eval", "--data", p(&data), "--model", p(&model), "--out", p(&eval), "--seed", "4", "--set",
                "attack.alphas=0.05", "--set", "attack.n_iter=2",
            ]);
            let run = model.parent().unwrap().to_path_buf();
            [
                run.join("history.csv"),
                run.join("model.bin"),
                adv.join("attack_report.csv"),
                eval.join("table1_ratios.csv"),
                eval.join("table2_metrics.csv"),
                eval.join("attack_reports.csv"),
            ]
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(f).unwrap()))
            .collect()
        })
        .collect();
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert!(a == b, "{} differs between runs", a.0);
    }
}
