mod common;

use std::f64::consts::{E, PI};

use common::{input_gradcheck, random, tiny_mpd, tiny_mrsd};
use hwg_autograd::{Graph, Tensor, Var};
use hwg_core::config::{Config, LossWeights, Preset, ScDenominator};
use hwg_core::discriminators::{DiscriminatorOutput, Discriminators};
use hwg_core::losses::*;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec())
}

fn eval2(x: &Tensor, y: &Tensor, f: impl for<'g> Fn(Var<'g>, Var<'g>) -> Var<'g>) -> f64 {
    let g = Graph::new();
    f(g.constant(x.clone()), g.constant(y.clone())).item()
}

fn sc(x: Var<'_>, y: Var<'_>) -> f64 {
    spectral_convergence(x, y, ScDenominator::Fake).unwrap().item()
}

fn reference_aux() -> AuxLoss {
    let cfg = Config::preset(Preset::Desk);
    AuxLoss::new(&cfg.loss, 48_000, cfg.features.fmin, cfg.features.fmax).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| v.abs() + 0.1)
}

#[test]
fn spectral_convergence_closed_forms() {
    let g = Graph::new();
    let y = g.constant(positive(&[3, 5], 1));
    assert_eq!(sc(y, y), 0.0);
    assert!((sc(y.scale(2.0), y) - 0.5).abs() < 1e-12);
    let a = g.constant(t(&[1, 2], &[3.0, 4.0]));
    let z = g.constant(Tensor::zeros([1, 2]));
    assert!((sc(a, z) - 1.0).abs() < 1e-12);
    // The standard form divides by the real magnitude instead.
    let real = spectral_convergence(y.scale(2.0), y, ScDenominator::Real).unwrap();
    assert!((real.item() - 1.0).abs() < 1e-12);
    // Zero fake magnitude hits the epsilon guard instead of dividing by zero.
    let guarded = spectral_convergence(z, a, ScDenominator::Fake).unwrap().item();
    assert!((guarded - 5.0 / NORM_EPS).abs() < 1e-3 * guarded);
}

#[test]
fn log_magnitude_closed_forms() {
    let y = positive(&[4, 3], 2);
    assert_eq!(eval2(&y, &y, |a, b| log_magnitude_loss(a, b).unwrap()), 0.0);
    let ey = y.scale(E);
    assert!((eval2(&ey, &y, |a, b| log_magnitude_loss(a, b).unwrap()) - 1.0).abs() < 1e-12);
    let x = t(&[2], &[1.0, E * E]);
    let ones = t(&[2], &[1.0, 1.0]);
    assert!((eval2(&x, &ones, |a, b| log_magnitude_loss(a, b).unwrap()) - 1.0).abs() < 1e-12);
    // Non-positive entries are clamped at the floor before the log.
    let zero = t(&[1], &[0.0]);
    let v = eval2(&zero, &t(&[1], &[1.0]), |a, b| log_magnitude_loss(a, b).unwrap());
    assert!((v - 1e-5f64.ln().abs()).abs() < 1e-12);
}

#[test]
fn phase_convergence_closed_forms() {
    let p = random(&[3, 4], 3).scale(3.0);
    assert_eq!(eval2(&p, &p, |a, b| phase_convergence(a, b).unwrap()), 0.0);
    let x = t(&[1], &[PI - 0.1]);
    let y = t(&[1], &[-PI + 0.1]);
    let v = eval2(&x, &y, |a, b| phase_convergence(a, b).unwrap());
    assert!((v - 0.2 / (PI - 0.1)).abs() < 1e-12, "{v}");
    assert!((v - 0.0658).abs() < 1e-4);
    let shifted = p.map(|v| v + 2.0 * PI);
    assert!(eval2(&p, &shifted, |a, b| phase_convergence(a, b).unwrap()) < 1e-12);
}

fn scores(g: &Graph, value: f64, n: usize) -> Vec<Var<'_>> {
    (0..n).map(|i| g.constant(Tensor::full([1, 1, 3 + i, 2], value))).collect()
}

#[test]
fn adversarial_closed_forms() {
    let g = Graph::new();
    let gl = |v| adversarial_g_loss(&scores(&g, v, 9)).unwrap().item();
    assert_eq!(gl(1.0), 0.0);
    assert_eq!(gl(0.0), 1.0);
    assert!((gl(0.5) - 0.25).abs() < 1e-12);
    let dl = |r, f| adversarial_d_loss(&scores(&g, r, 9), &scores(&g, f, 9)).unwrap().item();
    assert_eq!(dl(1.0, 0.0), 0.0);
    assert!((dl(0.0, 1.0) - 2.0).abs() < 1e-12);
    assert!((dl(0.5, 0.5) - 0.5).abs() < 1e-12);
    assert!(adversarial_g_loss(&[]).is_err());
    assert!(adversarial_d_loss(&scores(&g, 0.0, 2), &scores(&g, 0.0, 3)).is_err());
}

fn output<'g>(g: &'g Graph, maps: &[Vec<Tensor>]) -> DiscriminatorOutput<'g> {
    let features: Vec<Vec<Var<'g>>> = maps.iter().map(|f| f.iter().map(|t| g.constant(t.clone())).collect()).collect();
    DiscriminatorOutput {
        scores: features.iter().map(|f| *f.last().unwrap()).collect(),
        features,
    }
}

fn random_maps(seed: u64) -> Vec<Vec<Tensor>> {
    (0..3)
        .map(|i| (0..4).map(|j| random(&[2, 1 + j, 5 + i, 3], seed * 100 + (i * 10 + j) as u64)).collect())
        .collect()
}

fn l1_oracle(a: &[Vec<Tensor>], b: &[Vec<Tensor>]) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            let mut s = 0.0;
            for i in 0..p.numel() {
                s += (p.data()[i] - q.data()[i]).abs();
            }
            total += s / p.numel() as f64;
        }
    }
    total
}

#[test]
fn feature_match_values() {
    let g = Graph::new();
    let a = random_maps(1);
    assert_eq!(feature_match_loss(&output(&g, &a), &output(&g, &a)).unwrap().item(), 0.0);
    let mut shifted = a.clone();
    shifted[1][2] = shifted[1][2].map(|v| v + 0.7);
    let v = feature_match_loss(&output(&g, &a), &output(&g, &shifted)).unwrap().item();
    assert!((v - 0.7).abs() < 1e-12);
    let b = random_maps(2);
    let v = feature_match_loss(&output(&g, &a), &output(&g, &b)).unwrap().item();
    assert!((v - l1_oracle(&a, &b)).abs() < 1e-10);
    let swapped = feature_match_loss(&output(&g, &b), &output(&g, &a)).unwrap().item();
    assert_eq!(v, swapped);
    let mut short = b.clone();
    short[0].pop();
    assert!(feature_match_loss(&output(&g, &a), &output(&g, &short)).is_err());
}

#[test]
fn weighted_totals() {
    let g = Graph::new();
    let s = |v| hwg_autograd::scalar(&g, v);
    let w = LossWeights::default();
    assert_eq!((w.adversarial, w.auxiliary, w.feature_match), (1.0, 120.0, 10.0));
    let total = generator_total_loss(s(0.25), s(0.1), s(0.05), &w).item();
    assert!((total - 12.75).abs() < 1e-9);
    assert_eq!(generator_total_loss(s(0.0), s(0.0), s(0.0), &w).item(), 0.0);
    let only_aux = LossWeights {
        adversarial: 0.0,
        auxiliary: 1.0,
        feature_match: 0.0,
    };
    assert_eq!(generator_total_loss(s(0.3), s(0.123), s(0.7), &only_aux).item(), 0.123);
    assert_eq!(discriminator_total_loss(s(0.4)).item(), 0.4);
}

#[test]
fn aux_loss_identity_and_scaling() {
    let aux = reference_aux();
    let real = random(&[1, 4800], 4).scale(0.5);
    let same = aux_loss_value(&aux, real.data(), real.data()).unwrap().0;
    assert!(same.abs() < 1e-6);

    let doubled = real.scale(2.0);
    let (total, br) = aux_loss_value(&aux, doubled.data(), real.data()).unwrap();
    for v in br.stft_sc.iter().chain(&br.mel_sc) {
        assert!((v - 0.5).abs() < 1e-9, "{v}");
    }
    for v in br.stft_log_mag.iter().chain(&br.mel_log_mag) {
        assert!((v - 2f64.ln()).abs() < 1e-9, "{v}");
    }
    assert!(br.phase.iter().all(|&p| p == 0.0));
    // (1/H1) Σ (0.5 + ln 2 + 0) + (1/H2) Σ (0.5 + ln 2)
    assert!((total - (1.0 + 2.0 * 2f64.ln())).abs() < 1e-9, "{total}");
}

#[test]
fn aux_loss_rejects_short_or_mismatched_waves() {
    let aux = reference_aux();
    assert!(aux_loss_value(&aux, &[0.0; 1000], &[0.0; 1000]).is_err());
    assert!(aux_loss_value(&aux, &[0.0; 3000], &[0.0; 3001]).is_err());
    assert!(aux.min_len() <= 2048);
}

#[test]
fn convergence_and_log_magnitude_gradients() {
    let y = positive(&[6, 5], 5);
    let x = positive(&[6, 5], 6);
    let r = input_gradcheck(&x, 30, |v| {
        let y = v.graph().constant(y.clone());
        spectral_convergence(v, y, ScDenominator::Fake).unwrap()
    });
    assert!(r.passes(1e-3), "sc {r:?}");
    let r = input_gradcheck(&x, 30, |v| {
        let y = v.graph().constant(y.clone());
        spectral_convergence(v, y, ScDenominator::Real).unwrap()
    });
    assert!(r.passes(1e-3), "sc real {r:?}");
    let r = input_gradcheck(&x, 30, |v| log_magnitude_loss(v, v.graph().constant(y.clone())).unwrap());
    assert!(r.passes(1e-3), "log-mag {r:?}");
    let px = random(&[6, 5], 7).scale(3.0);
    let py = random(&[6, 5], 8).scale(3.0);
    let r = input_gradcheck(&px, 30, |v| phase_convergence(v, v.graph().constant(py.clone())).unwrap());
    assert!(r.passes(1e-3), "phase {r:?}");
}

#[test]
fn aux_total_gradient_on_2048_samples() {
    let aux = reference_aux();
    let real = random(&[1, 2048], 9).scale(0.3);
    let fake = random(&[1, 2048], 10).scale(0.3);
    let r = input_gradcheck(&fake, 40, |v| aux.compute(v, v.graph().constant(real.clone())).unwrap().total);
    assert!(r.passes(1e-3), "{r:?}");
}

#[test]
fn adversarial_and_feature_match_gradients() {
    let s = random(&[2, 1, 7, 3], 11);
    let r = input_gradcheck(&s, 30, |v| adversarial_g_loss(&[v, v.scale(0.5)]).unwrap());
    assert!(r.passes(1e-3), "adv g {r:?}");
    let other = random(&[2, 1, 7, 3], 12);
    let r = input_gradcheck(&s, 30, |v| adversarial_d_loss(&[v], &[v.graph().constant(other.clone())]).unwrap());
    assert!(r.passes(1e-3), "adv d real {r:?}");
    let r = input_gradcheck(&s, 30, |v| adversarial_d_loss(&[v.graph().constant(other.clone())], &[v]).unwrap());
    assert!(r.passes(1e-3), "adv d fake {r:?}");

    // Feature matching through a real discriminator, w.r.t. the fake wave.
    let d = Discriminators::new(&tiny_mpd(), &tiny_mrsd(), 13).unwrap();
    let real = random(&[1, 150], 14);
    let fake = random(&[1, 150], 15);
    let r = input_gradcheck(&fake, 40, |v| {
        let g = v.graph();
        let bound = d.params().bind(g, false);
        let ro = d.forward(&bound, g.constant(real.clone())).unwrap();
        let fo = d.forward(&bound, v).unwrap();
        feature_match_loss(&ro, &fo).unwrap()
    });
    assert!(r.passes(1e-3), "fm {r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), scale in 0.01f64..4.0) {
        let x = random(&[4, 6], seed).map(|v| v * scale);
        let y = random(&[4, 6], seed ^ 1);
        let g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        prop_assert!(spectral_convergence(xv.abs(), yv.abs(), ScDenominator::Fake).unwrap().item() >= 0.0);
        prop_assert!(log_magnitude_loss(xv, yv).unwrap().item() >= 0.0);
        prop_assert!(phase_convergence(xv, yv).unwrap().item() >= 0.0);
        prop_assert!(adversarial_g_loss(&[xv]).unwrap().item() >= 0.0);
        prop_assert!(adversarial_d_loss(&[xv], &[yv]).unwrap().item() >= 0.0);
        let a = output(&g, &[vec![x.clone()]]);
        let b = output(&g, &[vec![y.clone()]]);
        let fm = feature_match_loss(&a, &b).unwrap().item();
        prop_assert!(fm >= 0.0);
        prop_assert_eq!(fm, feature_match_loss(&b, &a).unwrap().item());
    }

    #[test]
    fn aux_loss_positive_when_spectra_differ(seed in any::<u64>(), gain in 1.1f64..3.0) {
        let aux = reference_aux();
        let real = random(&[1, 2400], seed).scale(0.2);
        let fake = real.scale(gain);
        let (v, _) = aux_loss_value(&aux, fake.data(), real.data()).unwrap();
        prop_assert!(v > 0.0);
        let (same, _) = aux_loss_value(&aux, real.data(), real.data()).unwrap();
        prop_assert!(same.abs() < 1e-6);
    }
}
