#![allow(dead_code)]

use hwg_autograd::gradcheck::{central_differences, spread_indices};
use hwg_autograd::{ParamId, ParamSet, Tensor};
use hwg_core::config::GeneratorConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        layers: 4,
        stacks: 2,
        kernel_sizes: vec![3, 5],
        dilations: vec![1, 2],
        residual_channels: 3,
        gate_channels: 4,
        skip_channels: 3,
        condition_channels: 4,
        noise_channels: 2,
        upsample_channels: 2,
        upsample_factors: vec![2, 3],
        use_pulse: true,
    }
}

/// Factorizations of 240 used to vary the upsampler depth.
pub const HOP_240_FACTORS: &[&[usize]] = &[
    &[8, 6, 5],
    &[5, 6, 8],
    &[4, 6, 10],
    &[2, 120],
    &[16, 15],
    &[3, 80],
    &[240],
    &[2, 2, 2, 2, 15],
];

/// A small random generator whose upsampling factors multiply to 240.
pub fn random_generator_240(rng: &mut ChaCha8Rng) -> GeneratorConfig {
    let per_stack = rng.gen_range(1..=4);
    let stacks = rng.gen_range(1..=3);
    GeneratorConfig {
        layers: per_stack * stacks,
        stacks,
        kernel_sizes: (0..per_stack).map(|_| 2 * rng.gen_range(0..5) + 1).collect(),
        dilations: (0..per_stack).map(|_| rng.gen_range(1..=8)).collect(),
        residual_channels: rng.gen_range(1..=4),
        gate_channels: 2 * rng.gen_range(1..=3),
        skip_channels: rng.gen_range(1..=4),
        condition_channels: 121,
        noise_channels: rng.gen_range(1..=121),
        upsample_channels: rng.gen_range(1..=3),
        upsample_factors: HOP_240_FACTORS.choose(rng).unwrap().to_vec(),
        use_pulse: rng.gen_bool(0.5),
    }
}

/// Random body geometry for receptive-field checks; widths stay tiny.
pub fn random_body(rng: &mut ChaCha8Rng) -> GeneratorConfig {
    let per_stack = rng.gen_range(1..=6);
    let stacks = rng.gen_range(1..=3);
    GeneratorConfig {
        layers: per_stack * stacks,
        stacks,
        kernel_sizes: (0..per_stack).map(|_| 2 * rng.gen_range(1..=8) + 1).collect(),
        dilations: (0..per_stack).map(|_| rng.gen_range(1..=16)).collect(),
        residual_channels: 2,
        gate_channels: 2,
        skip_channels: 2,
        condition_channels: 3,
        noise_channels: 3,
        upsample_channels: 2,
        upsample_factors: vec![2],
        use_pulse: false,
    }
}

/// Checks the gradient of `loss` with respect to every array in `params`
/// at a spread of entries per array; returns the worst relative error and
/// the name of the array that produced it.
pub fn param_gradcheck(
    params: &ParamSet,
    analytic: &[Tensor],
    per_array: usize,
    h: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let x = params.get(id).clone();
        let idx = spread_indices(x.numel(), per_array);
        let mut probe = params.clone();
        let mut f = |t: &Tensor| {
            *probe.get_mut(id) = t.clone();
            loss(&probe)
        };
        let numeric = central_differences(&mut f, &x, &idx, h);
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for (&i, &n) in idx.iter().zip(&numeric) {
            let a = grad.data()[i];
            d2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-12 { d2.sqrt() } else { d2.sqrt() / scale };
        if rel >= worst.0 {
            worst = (rel, params.name(id).to_string());
        }
    }
    worst
}

/// Gradient check of a scalar graph function of one input tensor.
pub fn input_gradcheck(
    x: &Tensor,
    probes: usize,
    f: impl for<'g> Fn(hwg_autograd::Var<'g>) -> hwg_autograd::Var<'g>,
) -> hwg_autograd::gradcheck::GradCheck {
    use hwg_autograd::Graph;
    let graph = Graph::new();
    let xv = graph.variable(x.clone());
    let analytic = graph.backward(f(xv)).get_or_zeros(xv);
    let mut eval = |t: &Tensor| {
        let graph = Graph::new();
        f(graph.constant(t.clone())).item()
    };
    let idx = spread_indices(x.numel(), probes);
    hwg_autograd::gradcheck::check(&mut eval, x, &analytic, &idx, 1e-6, 1e-8)
}

pub fn tiny_mpd() -> hwg_core::config::MpdConfig {
    hwg_core::config::MpdConfig {
        periods: vec![2, 3],
        channels: vec![2, 3],
        strides: vec![3, 3],
        kernel_size: 5,
        post_kernel_size: 3,
        slope: 0.1,
    }
}

pub fn tiny_mrsd() -> hwg_core::config::MrsdConfig {
    use hwg_core::config::StftConfig;
    hwg_core::config::MrsdConfig {
        resolutions: vec![StftConfig::hann(64, 48, 16), StftConfig::hann(32, 24, 8)],
        channels: vec![2, 2],
        strides: vec![(1, 1), (1, 2)],
        slope: 0.1,
    }
}

/// A harmonic tone with vibrato, loud enough to be voiced throughout.
pub fn tone_clip(seconds: f64, f0: f64, seed: u64) -> hwg_core::audio::AudioClip {
    use std::f64::consts::PI;
    let sr = 48_000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sr).round() as usize;
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            phase += 2.0 * PI * f0 * (1.0 + 0.02 * (2.0 * PI * 5.0 * t).sin()) / sr;
            let harmonics: f64 = (1..=8).map(|h| 0.3 / h as f64 * (h as f64 * phase).sin()).sum();
            harmonics + 0.003 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    hwg_core::audio::AudioClip::new(samples, 48_000).unwrap()
}

/// Reference features with a toy model and short segments, for training
/// tests that must run in seconds.
pub fn tiny_training_config() -> hwg_core::config::Config {
    use hwg_core::config::{Config, MelResolution, Preset, StftConfig};
    let mut cfg = Config::preset(Preset::Desk);
    cfg.generator = GeneratorConfig {
        layers: 2,
        stacks: 1,
        kernel_sizes: vec![3, 5],
        dilations: vec![1, 2],
        residual_channels: 2,
        gate_channels: 4,
        skip_channels: 2,
        condition_channels: 121,
        noise_channels: 2,
        upsample_channels: 2,
        upsample_factors: vec![8, 6, 5],
        use_pulse: true,
    };
    cfg.mpd = tiny_mpd();
    cfg.mrsd = tiny_mrsd();
    cfg.loss.stft_resolutions = vec![StftConfig::hann(256, 200, 50), StftConfig::hann(512, 400, 100)];
    cfg.loss.mel_resolutions = vec![MelResolution {
        fft_size: 512,
        window_length: 480,
        hop_length: 120,
        n_mels: 40,
    }];
    cfg.train.segment_seconds = 0.02;
    cfg.train.batch_size = 2;
    cfg.train.max_iterations = 6;
    cfg.train.checkpoint_interval = 3;
    cfg
}

/// Span of the support of one output sample, propagated backwards through
/// the layer taps as index sets: a residual layer keeps its input positions
/// and adds every dilated tap offset. Dilated stacks may leave holes; the
/// receptive field is the span.
pub fn support_oracle(specs: &[(usize, usize)]) -> usize {
    let mut support: std::collections::BTreeSet<i64> = std::collections::BTreeSet::from([0]);
    for &(k, d) in specs.iter().rev() {
        let half = (k as i64 - 1) / 2;
        let mut next = support.clone();
        for &p in &support {
            for j in -half..=half {
                next.insert(p + j * d as i64);
            }
        }
        support = next;
    }
    let (lo, hi) = (*support.first().unwrap(), *support.last().unwrap());
    assert_eq!(lo, -hi);
    (hi - lo + 1) as usize
}

/// Span of body-input positions with a nonzero gradient for one output
/// sample. Exact zeros only arise outside the structural support (or where
/// the post-net ReLUs are inactive, in which case another sample or seed is
/// tried).
pub fn gradient_support(cfg: &GeneratorConfig, seed: u64) -> usize {
    (seed..seed + 20)
        .find_map(|s| gradient_support_once(cfg, s))
        .expect("no output sample with a nonzero gradient")
}

fn gradient_support_once(cfg: &GeneratorConfig, seed: u64) -> Option<usize> {
    let gen = hwg_core::generator::Generator::new(cfg, seed).unwrap();
    let rf = hwg_core::generator::body_receptive_field(cfg);
    let t = 2 * rf + 64;
    let x = random(&[1, cfg.upsample_channels, t], seed + 1);
    let local = random(&[1, cfg.local_channels(), t], seed + 2);
    for t0 in (t / 2..t / 2 + 40).step_by(7) {
        let graph = hwg_autograd::Graph::new();
        let bound = gen.params().bind(&graph, false);
        let xv = graph.variable(x.clone());
        let out = gen.body_forward(&bound, xv, graph.constant(local.clone()));
        let grads = graph.backward(out.narrow(1, t0, 1).sum());
        let gx = grads.get_or_zeros(xv);
        let touched: Vec<usize> = (0..t)
            .filter(|&i| (0..cfg.upsample_channels).any(|c| gx.data()[c * t + i] != 0.0))
            .collect();
        if touched.is_empty() {
            // Post-net ReLUs happened to be inactive here.
            continue;
        }
        let span = touched.last().unwrap() - touched.first().unwrap() + 1;
        assert_eq!(touched[0] + span / 2, t0, "support is not centred");
        return Some(span);
    }
    None
}

fn conv_count(c_out: usize, c_in: usize, k: usize, bias: bool) -> usize {
    // weight-norm direction, per-channel gain, optional bias
    c_out * c_in * k + c_out + if bias { c_out } else { 0 }
}

/// Closed-form parameter count, summed layer by layer.
pub fn closed_form_count(cfg: &GeneratorConfig) -> usize {
    let cu = cfg.upsample_channels;
    let up = |c_in: usize| {
        conv_count(cu, c_in, 1, true) + cfg.upsample_factors.iter().map(|f| conv_count(cu, cu, 2 * f + 1, true)).sum::<usize>()
    };
    let (r, g, s) = (cfg.residual_channels, cfg.gate_channels, cfg.skip_channels);
    let layers: usize = cfg
        .layer_specs()
        .iter()
        .map(|&(k, _)| conv_count(g, r, k, true) + conv_count(g, cfg.local_channels(), 1, false) + conv_count(r + s, g / 2, 1, true))
        .sum();
    up(cfg.condition_channels)
        + up(cfg.noise_channels)
        + conv_count(r, cu, 1, true)
        + layers
        + conv_count(s, s, 1, true)
        + conv_count(1, s, 1, true)
}

/// Eight harmonics of a 220 Hz tone with 5 Hz vibrato and no noise floor.
pub fn harmonic_clip(seconds: f64) -> hwg_core::audio::AudioClip {
    use std::f64::consts::PI;
    let sr = 48_000.0;
    let samples = (0..(seconds * sr).round() as usize)
        .map(|i| {
            let t = i as f64 / sr;
            let f0 = 220.0 + 10.0 * (2.0 * PI * 5.0 * t).sin();
            (1..=8).map(|h| 0.3 / h as f64 * (2.0 * PI * f0 * h as f64 * t).sin()).sum()
        })
        .collect();
    hwg_core::audio::AudioClip::new(samples, 48_000).unwrap()
}
