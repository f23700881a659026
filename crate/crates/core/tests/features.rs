use hwg_autograd::Tensor;
use hwg_core::audio::AudioClip;
use hwg_core::config::{StftConfig, WindowKind};
use hwg_core::features::{
    compute_stats, content_key, extract_f0, mel_spectrogram, stft, stft_samples, LOG_FLOOR, STD_FLOOR,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SR: u32 = 48_000;

fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new(samples, SR).unwrap()
}

fn noise(len: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Counts frame placements by sliding an `n_fft` window over the padded
/// signal one hop at a time.
fn frame_count_oracle(len: usize, n_fft: usize, hop: usize) -> usize {
    let padded = len + 2 * (n_fft / 2);
    let mut count = 0;
    let mut start = 0;
    while start + n_fft <= padded {
        count += 1;
        start += hop;
    }
    count
}

#[test]
fn frame_count_matches_window_placement_oracle() {
    let cfg = StftConfig::hann(2048, 960, 240);
    let s = stft(&clip(noise(4800, 1, 0.1)), &cfg).unwrap();
    assert_eq!(s.frames, frame_count_oracle(4800, 2048, 240));
    for len in [1025, 1500, 2047, 2048, 4799, 48_000] {
        let s = stft(&clip(noise(len, 2, 0.1)), &cfg).unwrap();
        assert_eq!(s.frames, frame_count_oracle(len, 2048, 240), "len {len}");
    }
}

#[test]
fn doubling_amplitude_adds_log_two() {
    let cfg = StftConfig::hann(2048, 960, 240);
    let x = noise(9600, 3, 0.05);
    let a = mel_spectrogram(&clip(x.clone()), &cfg, 120, 0.0, 24_000.0).unwrap();
    let b = mel_spectrogram(&clip(x.iter().map(|v| 2.0 * v).collect()), &cfg, 120, 0.0, 24_000.0).unwrap();
    for (&u, &v) in a.values.data().iter().zip(b.values.data()) {
        if u > LOG_FLOOR.ln() + 1.0 {
            assert!((v - u - 2f64.ln()).abs() < 1e-9);
        }
    }
}

#[test]
fn sawtooth_pitch_is_tracked() {
    let period = SR as f64 / 200.0;
    let x: Vec<f64> = (0..48_000).map(|n| 0.5 * (2.0 * ((n as f64 / period) % 1.0) - 1.0)).collect();
    let p = extract_f0(&clip(x), 240, 60.0, 1500.0, 0.45).unwrap();
    assert_eq!(p.len(), 201);
    assert!(p.voiced_fraction() > 0.9, "voiced fraction {}", p.voiced_fraction());
    let mut voiced: Vec<f64> = p.f0.iter().copied().filter(|&f| f > 0.0).collect();
    voiced.sort_by(f64::total_cmp);
    let median = voiced[voiced.len() / 2];
    assert!((median - 200.0).abs() <= 2.0, "median f0 {median}");
}

#[test]
fn white_noise_is_mostly_unvoiced() {
    let p = extract_f0(&clip(noise(48_000, 4, 0.3)), 240, 60.0, 1500.0, 0.45).unwrap();
    assert!(p.voiced_fraction() < 0.1, "voiced fraction {}", p.voiced_fraction());
}

#[test]
fn pitch_track_invariants() {
    let x: Vec<f64> = (0..24_000)
        .map(|n| if n < 12_000 { (2.0 * std::f64::consts::PI * 330.0 * n as f64 / SR as f64).sin() } else { 0.0 })
        .collect();
    let p = extract_f0(&clip(x.clone()), 240, 60.0, 1500.0, 0.45).unwrap();
    let m = mel_spectrogram(&clip(x), &StftConfig::hann(2048, 960, 240), 120, 0.0, 24_000.0).unwrap();
    assert_eq!(p.len(), m.frames());
    for (&f, &v) in p.f0.iter().zip(&p.vuv) {
        assert_eq!(f > 0.0, v);
        if v {
            assert!((60.0..=1500.0).contains(&f));
        }
    }
    assert!(p.vuv[20] && !p.vuv[90]);
}

fn two_pass_stats(corpus: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = corpus[0].dim(1);
    let mut mean = vec![0.0; c];
    let mut n = 0.0;
    for m in corpus {
        for row in m.data().chunks(c) {
            n += 1.0;
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for m in corpus {
        for row in m.data().chunks(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

#[test]
fn stats_match_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_fn([10 + 7 * i, 6], |_| rng.gen_range(-12.0..3.0)))
        .collect();
    let s = compute_stats(&corpus).unwrap();
    let (mean, std) = two_pass_stats(&corpus);
    for c in 0..6 {
        assert!((s.mean[c] - mean[c]).abs() < 1e-10);
        assert!((s.std[c] - std[c]).abs() < 1e-10);
    }
}

#[test]
fn identical_audio_shares_a_key() {
    let x = noise(1000, 6, 0.1);
    assert_eq!(content_key(&clip(x.clone())), content_key(&clip(x.clone())));
    let mut y = x;
    y[500] += 1e-12;
    assert_ne!(content_key(&clip(y.clone())), content_key(&clip(y.iter().map(|v| v * 0.5).collect())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_are_deterministic_and_aligned(len in 1100usize..6000, seed in any::<u64>()) {
        let x = noise(len, seed, 0.2);
        let cfg = StftConfig::hann(2048, 960, 240);
        let a = mel_spectrogram(&clip(x.clone()), &cfg, 120, 0.0, 24_000.0).unwrap();
        let b = mel_spectrogram(&clip(x.clone()), &cfg, 120, 0.0, 24_000.0).unwrap();
        prop_assert_eq!(&a, &b);
        let p = extract_f0(&clip(x), 240, 60.0, 1500.0, 0.45).unwrap();
        prop_assert_eq!(p.len(), a.frames());
        prop_assert_eq!(a.frames(), frame_count_oracle(len, 2048, 240));
    }

    #[test]
    fn louder_never_lowers_log_mel(len in 1100usize..4000, seed in any::<u64>(), gain in 1.0f64..8.0) {
        let x = noise(len, seed, 0.1);
        let cfg = StftConfig::hann(1024, 480, 120);
        let a = mel_spectrogram(&clip(x.clone()), &cfg, 40, 0.0, 24_000.0).unwrap();
        let b = mel_spectrogram(&clip(x.iter().map(|v| v * gain).collect()), &cfg, 40, 0.0, 24_000.0).unwrap();
        for (u, v) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!(v >= u);
        }
    }

    #[test]
    fn parseval_with_rectangular_frames(frames in 1usize..12, log_n in 4u32..10, seed in any::<u64>()) {
        let n = 1usize << log_n;
        let x = noise(frames * n, seed, 1.0);
        let cfg = StftConfig { fft_size: n, window_length: n, hop_length: n, window: WindowKind::Rectangular };
        let s = stft_samples(&x, &cfg, false).unwrap();
        prop_assert_eq!(s.frames, frames);
        let mut spectral = 0.0;
        for t in 0..s.frames {
            for k in 0..s.bins {
                let (re, im) = s.get(t, k);
                let w = if k == 0 || k == s.bins - 1 { 1.0 } else { 2.0 };
                spectral += w * (re * re + im * im);
            }
        }
        spectral /= n as f64;
        let energy: f64 = x.iter().map(|v| v * v).sum();
        prop_assert!((spectral - energy).abs() <= 1e-6 * energy);
    }
}
