mod common;

use tfadv::detector::{
    detect_signal_auto, init_model, load_model, save_model, spectrogram, train, validate, DetectorConfig, Sample,
    TrainConfig,
};
use tfadv::spectrogram::DbMapping;
use tfadv::stft::{split, StftConfig, StftEngine};

fn sample(seed: u64, engine: &StftEngine) -> Sample {
    let (x, labels) = common::desk_signal(seed);
    let mapping = DbMapping::from_magnitude(&split(&engine.forward(&x).unwrap()).0);
    Sample {
        image: spectrogram(&x, engine, &mapping).unwrap(),
        labels,
    }
}

#[test]
fn memorizes_a_single_sample() {
    let engine = StftEngine::new(StftConfig::desk()).unwrap();
    let s = sample(21, &engine);
    assert!(!s.labels.is_empty());
    let mut model = init_model(&DetectorConfig::default(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 1,
        warmup_steps: 10,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let set = vec![s];
    let hist = train(&mut model, &set, &[], &cfg).unwrap();
    assert!(hist.val.is_empty());
    let first = hist.epoch_loss[0];
    let last = *hist.epoch_loss.last().unwrap();
    assert!(last < 0.05 * first, "loss {first} -> {last}");
    let m = validate(&model, &set).unwrap();
    assert_eq!(m.map, 1.0, "{m:?}");
}

#[test]
fn training_is_deterministic() {
    let engine = StftEngine::new(StftConfig::desk()).unwrap();
    let set: Vec<Sample> = (0..4).map(|i| sample(30 + i, &engine)).collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        pixel_jitter: 0.02,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = init_model(&DetectorConfig::default(), 9).unwrap();
        let h = train(&mut m, &set[..3], &set[3..], &cfg).unwrap();
        (m.params().to_vec(), h.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn saved_model_reloads_with_identical_detections() {
    let engine = StftEngine::new(StftConfig::desk()).unwrap();
    let mut model = init_model(&DetectorConfig::default(), 5).unwrap();
    let head = *model.shapes().last().unwrap();
    let off = model.params().len() - head.param_len();
    model.params_mut()[off + head.weight_len()] = 1.0;
    model.quantize_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    let (x, _) = common::desk_signal(6);
    assert_eq!(
        detect_signal_auto(&model, &x, &engine).unwrap(),
        detect_signal_auto(&back, &x, &engine).unwrap()
    );
}

#[test]
fn truncated_model_file_is_rejected() {
    let model = init_model(&DetectorConfig::default(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&path).unwrap_err().is_usage());
}
