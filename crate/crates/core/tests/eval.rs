mod common;

use std::f64::consts::{LN_10, PI};

use common::{random, tiny_training_config, tone_clip};
use hwg_autograd::Tensor;
use hwg_core::config::Config;
use hwg_core::eval::*;
use hwg_core::synthesis::Vocoder;
use hwg_core::training::{Dataset, Trainer};
use hwg_core::Error;
use proptest::prelude::*;

#[test]
fn ground_truth_against_itself_scores_zero() {
    let cfg = Config::preset(hwg_core::config::Preset::Desk);
    let clip = tone_clip(0.3, 170.0, 4);
    let (stft, mcd) = score_pair(&cfg, &clip, &clip).unwrap();
    assert_eq!(mcd, 0.0);
    assert!(stft.abs() < 1e-12, "{stft}");
}

#[test]
fn a_constant_log_offset_only_moves_the_energy_coefficient() {
    let a = random(&[7, 40], 1).scale(3.0);
    let b = a.map(|v| v + 1.7);
    assert!(mel_cepstral_distortion(&a, &b).unwrap() < 1e-9);
}

#[test]
fn one_cosine_component_gives_the_closed_form_distance() {
    // Orthonormal DCT: adding δ times basis vector k moves c_k by exactly δ.
    let (frames, n, k, delta) = (5, 40, 3, 0.25);
    let scale = (2.0 / n as f64).sqrt();
    let a = random(&[frames, n], 2);
    let b = Tensor::from_fn([frames, n], |i| {
        let m = i % n;
        a.data()[i] + delta * scale * (PI * k as f64 * (m as f64 + 0.5) / n as f64).cos()
    });
    let expected = 10.0 * 2f64.sqrt() / LN_10 * delta;
    let got = mel_cepstral_distortion(&a, &b).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn cepstrum_keeps_order_plus_one_coefficients() {
    let c = mel_cepstrum(&random(&[3, 120], 3), MCD_ORDER);
    assert_eq!(c.shape(), &[3, MCD_ORDER + 1]);
    let short = mel_cepstrum(&random(&[3, 10], 3), MCD_ORDER);
    assert_eq!(short.shape(), &[3, 10]);
}

#[test]
fn mismatched_inputs_are_rejected() {
    assert!(matches!(
        mel_cepstral_distortion(&random(&[3, 10], 1), &random(&[4, 10], 1)),
        Err(Error::Shape(_))
    ));
    let cfg = Config::preset(hwg_core::config::Preset::Desk);
    assert!(stft_error(&[0.0; 5000], &[0.0; 5001], &cfg.loss.stft_resolutions).is_err());
    assert!(stft_error(&[0.0; 100], &[0.0; 100], &cfg.loss.stft_resolutions).is_err());
    assert!(stft_error(&[0.0; 5000], &[0.0; 5000], &[]).is_err());
}

#[test]
fn corpus_means_are_brute_force_means() {
    let score = |name: &str, stft, mcd, audio, synth| UtteranceScore {
        name: name.into(),
        stft_error: stft,
        mcd_db: mcd,
        audio_seconds: audio,
        synthesis_seconds: synth,
        rtf: synth / audio,
    };
    let scores = vec![
        score("b", 1.0, 4.0, 2.0, 1.0),
        score("a", 2.0, 5.0, 1.0, 3.0),
        score("c", 4.5, 9.0, 1.0, 0.5),
    ];
    let report = EvalReport::new(scores.clone(), Vec::new(), 123);
    let names: Vec<&str> = report.utterances.iter().map(|u| u.name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    let mut sum = (0.0, 0.0);
    for s in &scores {
        sum.0 += s.stft_error;
        sum.1 += s.mcd_db;
    }
    assert!((report.mean_stft_error.unwrap() - sum.0 / 3.0).abs() < 1e-12);
    assert!((report.mean_mcd_db.unwrap() - sum.1 / 3.0).abs() < 1e-12);
    assert!((report.rtf.unwrap() - 4.5 / 4.0).abs() < 1e-12);
    assert_eq!(report.parameter_count, 123);

    let empty = EvalReport::new(Vec::new(), Vec::new(), 1);
    assert_eq!((empty.mean_stft_error, empty.mean_mcd_db, empty.rtf), (None, None, None));
}

#[test]
fn evaluate_skips_unreadable_clips_and_counts_parameters() {
    let cfg = tiny_training_config();
    let data = Dataset::from_clips(vec![("a".into(), tone_clip(0.05, 200.0, 1))], &cfg).unwrap();
    let trainer = Trainer::new(cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.hwgc");
    trainer.save(&path).unwrap();
    let vocoder = Vocoder::load(&path).unwrap();
    let clips = vec![
        ("z".to_string(), Ok(tone_clip(0.1, 150.0, 2))),
        ("gone".to_string(), Err(Error::InvalidInput("missing".into()))),
        ("m".to_string(), Ok(tone_clip(0.12, 250.0, 3))),
    ];
    let report = evaluate(&vocoder, clips, 0).unwrap();
    assert_eq!(report.utterances.len(), 2);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].name, "gone");
    assert_eq!(report.parameter_count, trainer.generator().count_parameters());
    for u in &report.utterances {
        assert!(u.mcd_db >= 0.0 && u.stft_error >= 0.0 && u.rtf > 0.0, "{u:?}");
    }
    assert!(report.rtf.unwrap() > 0.0);
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mcd_is_a_non_negative_symmetric_distance(seed in any::<u64>(), frames in 1usize..6, n in 2usize..40) {
        let a = random(&[frames, n], seed);
        let b = random(&[frames, n], seed ^ 0x55);
        let ab = mel_cepstral_distortion(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mel_cepstral_distortion(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(mel_cepstral_distortion(&a, &a).unwrap(), 0.0);
    }
}
