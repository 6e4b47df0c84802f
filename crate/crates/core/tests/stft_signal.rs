mod common;

use proptest::prelude::*;
use tfadv::signal::{build_dataset, quantize_sample, read_signal_file, write_signal_file, DatasetManifest, GenConfig, SignalBuffer};
use tfadv::stft::{make_window, recombine, split, WOLA_FLOOR, StftConfig, StftEngine};

#[test]
fn desk_frames_match_the_direct_dft() {
    let cfg = StftConfig::desk();
    let engine = StftEngine::new(cfg).unwrap();
    let (x, _) = common::desk_signal(1);
    let y = engine.forward(&x).unwrap();
    assert_eq!((y.bins(), y.frames()), (256, 128));
    let w = make_window(&cfg);
    for m in [0, 63, 127] {
        let start = m * cfg.hop();
        let oracle = common::dft_frame(&x.samples()[start..start + cfg.n_fft], &w);
        for (a, b) in oracle.iter().zip(y.frame(m)) {
            assert!((a - b).norm() < 1e-9, "frame {m}: {a} vs {b}");
        }
    }
}

#[test]
fn analysis_config_frame_count() {
    let cfg = StftConfig::analysis();
    assert_eq!(cfg.hop(), 2000);
    assert_eq!(cfg.n_frames(22_100), 11);
    assert_eq!(cfg.signal_len_for(11), 22_048);
}

#[test]
fn transform_is_linear() {
    let engine = StftEngine::new(StftConfig::new(64, 32).unwrap()).unwrap();
    let a = common::noise_signal(1000, 2);
    let b = common::noise_signal(1000, 3);
    let sum = SignalBuffer::new(
        a.samples().iter().zip(b.samples()).map(|(p, q)| 2.0 * p - 0.5 * q).collect(),
        a.sample_rate(),
    )
    .unwrap();
    let (ya, yb, ys) = (
        engine.forward(&a).unwrap(),
        engine.forward(&b).unwrap(),
        engine.forward(&sum).unwrap(),
    );
    for ((p, q), s) in ya.as_slice().iter().zip(yb.as_slice()).zip(ys.as_slice()) {
        assert!((p * 2.0 - q * 0.5 - s).norm() < 1e-12);
    }
}

/// Unmodified analysis-synthesis returns x * W / max(W, floor), W being the
/// summed squared window at each sample; only the edges feel the floor.
#[test]
fn desk_round_trip_matches_the_window_sum_oracle() {
    let cfg = StftConfig::desk();
    let engine = StftEngine::new(cfg).unwrap();
    let (x, _) = common::desk_signal(2);
    let w = make_window(&cfg);
    let mut wsum = vec![0.0; x.len()];
    for m in 0..cfg.n_frames(x.len()) {
        for (i, wi) in w.iter().enumerate() {
            wsum[m * cfg.hop() + i] += wi * wi;
        }
    }
    let rec = engine.round_trip(&x).unwrap();
    let mut affected = 0;
    for (i, (&r, &s)) in rec.samples().iter().zip(x.samples()).enumerate() {
        let expect = if wsum[i] > 0.0 { s * wsum[i] / wsum[i].max(WOLA_FLOOR) } else { 0.0 };
        assert!((r - expect).abs() < 1e-9, "sample {i}: {r} vs {expect}");
        affected += usize::from(wsum[i] < WOLA_FLOOR);
    }
    assert!(affected > 0 && affected < 16, "{affected} samples under the floor");
}

#[test]
fn split_then_recombine_restores_the_matrix() {
    let cfg = StftConfig::new(128, 64).unwrap();
    let engine = StftEngine::new(cfg).unwrap();
    let y = engine.forward(&common::noise_signal(2048, 4)).unwrap();
    let (mag, phase) = split(&y);
    let back = recombine(&mag, &phase, cfg, y.sample_rate()).unwrap();
    for (a, b) in y.as_slice().iter().zip(back.as_slice()) {
        assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
    }
    assert!(back.hermitian_error() < 1e-12);
}

#[test]
fn dataset_is_reproducible_and_reloadable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = GenConfig { seed: 9, ..GenConfig::default() };
    let ma = build_dataset(6, &cfg, a.path()).unwrap();
    let mb = build_dataset(6, &cfg, b.path()).unwrap();
    assert_eq!(ma.len(), 6);
    assert_eq!(ma.to_text(), mb.to_text());
    for i in 0..6 {
        assert_eq!(std::fs::read(ma.signal_path(i)).unwrap(), std::fs::read(mb.signal_path(i)).unwrap());
        assert_eq!(ma.load_labels(i).unwrap(), mb.load_labels(i).unwrap());
        assert_eq!(ma.load_signal(i).unwrap().len(), cfg.signal_length);
    }
    let reloaded = DatasetManifest::load(a.path().join(tfadv::signal::MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded.to_text(), ma.to_text());

    let other = build_dataset(6, &GenConfig { seed: 10, ..cfg }, b.path().join("x")).unwrap();
    assert_ne!(std::fs::read(other.signal_path(0)).unwrap(), std::fs::read(ma.signal_path(0)).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantization_error_is_half_a_step(s in -1.0f64..(32767.0 / 32768.0)) {
        let (q, clipped) = quantize_sample(s);
        prop_assert!(!clipped);
        prop_assert!((q as f64 / 32768.0 - s).abs() <= 0.5 / 32768.0 + 1e-15);
    }

    #[test]
    fn out_of_range_samples_clip(s in 1.0f64..10.0) {
        prop_assert_eq!(quantize_sample(s), (i16::MAX, true));
        prop_assert_eq!(quantize_sample(-s - 1.0 / 32768.0), (i16::MIN, true));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn file_round_trip_is_within_quantization(seed in 0u64..1000, len in 1usize..300) {
        let x = common::noise_signal(len, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.i16");
        prop_assert_eq!(write_signal_file(&x, &path).unwrap(), 0);
        let back = read_signal_file(&path, x.sample_rate()).unwrap();
        prop_assert_eq!(back.len(), len);
        for (a, b) in back.samples().iter().zip(x.samples()) {
            prop_assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-15);
        }
    }

    #[test]
    fn interior_round_trip_at_75_percent_overlap(seed in 0u64..1000, log_n in 4u32..9, frames in 5usize..20) {
        let n = 1usize << log_n;
        let cfg = StftConfig::new(n, 3 * n / 4).unwrap();
        let engine = StftEngine::new(cfg).unwrap();
        let x = common::noise_signal(cfg.signal_len_for(frames), seed);
        let rec = engine.round_trip(&x).unwrap();
        for i in n..x.len() - n {
            prop_assert!((rec.samples()[i] - x.samples()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn magnitudes_are_conjugate_symmetric(seed in 0u64..1000) {
        let engine = StftEngine::new(StftConfig::new(32, 16).unwrap()).unwrap();
        let y = engine.forward(&common::noise_signal(200, seed)).unwrap();
        prop_assert!(y.hermitian_error() < 1e-12);
        let (mag, _) = split(&y);
        for m in 0..mag.frames() {
            for k in 1..16 {
                prop_assert!((mag.get(k, m) - mag.get(32 - k, m)).abs() < 1e-12);
            }
        }
    }
}
