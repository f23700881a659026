//! Training objectives: least-squares adversarial losses, the
//! multi-resolution spectrogram/phase auxiliary loss and feature matching.
//!
//! Every loss is a graph expression returning a scalar `Var`, so the same
//! code serves training (with gradients) and evaluation (on constants).

use std::sync::Arc;

use hwg_autograd::{scalar, Graph, StftPlan, Tensor, Var};

use crate::config::{LossConfig, LossWeights, ScDenominator};
use crate::discriminators::DiscriminatorOutput;
use crate::error::{Error, Result};
use crate::features::{mel_filterbank, LOG_FLOOR};

/// Denominator guard for the convergence terms.
pub const NORM_EPS: f64 = 1e-12;

fn guarded_norm(x: Var<'_>) -> Var<'_> {
    let n = x.norm();
    if n.item() < NORM_EPS {
        scalar(x.graph(), NORM_EPS)
    } else {
        n
    }
}

fn check_same_shape(what: &str, x: &Var<'_>, y: &Var<'_>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    Ok(())
}

/// `‖x − y‖ / ‖x‖` for fake magnitudes `x` and real magnitudes `y`, or with
/// `‖y‖` underneath when `denominator` is [`ScDenominator::Real`].
pub fn spectral_convergence<'g>(x: Var<'g>, y: Var<'g>, denominator: ScDenominator) -> Result<Var<'g>> {
    check_same_shape("spectral convergence", &x, &y)?;
    let under = match denominator {
        ScDenominator::Fake => x,
        ScDenominator::Real => y,
    };
    Ok(x.sub(y).norm().div(guarded_norm(under)))
}

/// Mean absolute difference of `ln(max(·, 1e-5))`.
pub fn log_magnitude_loss<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    check_same_shape("log-magnitude loss", &x, &y)?;
    Ok(x.log_floor(LOG_FLOOR).sub(y.log_floor(LOG_FLOOR)).abs().mean())
}

/// `‖wrap(x_p − y_p)‖ / ‖x_p‖` with differences wrapped into (−π, π].
pub fn phase_convergence<'g>(x_phase: Var<'g>, y_phase: Var<'g>) -> Result<Var<'g>> {
    check_same_shape("phase convergence", &x_phase, &y_phase)?;
    Ok(x_phase.sub(y_phase).wrap_angle().norm().div(guarded_norm(x_phase)))
}

/// Per-resolution terms of the auxiliary loss, as plain numbers for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxBreakdown {
    pub stft_sc: Vec<f64>,
    pub stft_log_mag: Vec<f64>,
    pub phase: Vec<f64>,
    pub mel_sc: Vec<f64>,
    pub mel_log_mag: Vec<f64>,
}

pub struct AuxTerms<'g> {
    /// Sum of the STFT and mel parts.
    pub total: Var<'g>,
    /// Mean over STFT resolutions of SC + log-magnitude + weighted phase term.
    pub stft: Var<'g>,
    /// Mean over mel resolutions of SC + log-magnitude.
    pub mel: Var<'g>,
    pub breakdown: AuxBreakdown,
}

struct MelRes {
    plan: Arc<StftPlan>,
    /// Transposed filterbank, `[bins, n_mels]`.
    basis: Tensor,
}

/// Multi-resolution STFT, phase and mel-spectrogram loss.
pub struct AuxLoss {
    stft: Vec<Arc<StftPlan>>,
    mel: Vec<MelRes>,
    phase_weight: f64,
    denominator: ScDenominator,
    min_len: usize,
}

impl AuxLoss {
    pub fn new(cfg: &LossConfig, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        cfg.validate()?;
        let mel = cfg
            .mel_resolutions
            .iter()
            .map(|m| {
                let fb = mel_filterbank(sample_rate, m.fft_size, m.n_mels, fmin, fmax)?;
                let (n, bins) = (fb.dim(0), fb.dim(1));
                let basis = Tensor::from_fn([bins, n], |i| fb.data()[(i % n) * bins + i / n]);
                Ok(MelRes {
                    plan: Arc::new(m.stft().plan()),
                    basis,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stft: Vec<_> = cfg.stft_resolutions.iter().map(|r| Arc::new(r.plan())).collect();
        let min_len = cfg
            .longest_window()
            .max(stft.iter().chain(mel.iter().map(|m| &m.plan)).map(|p| p.min_len()).max().unwrap_or(0));
        Ok(Self {
            stft,
            mel,
            phase_weight: cfg.phase_weight,
            denominator: cfg.sc_denominator,
            min_len,
        })
    }

    /// Shortest waveform the loss accepts.
    pub fn min_len(&self) -> usize {
        self.min_len
    }

    /// `fake` and `real` are `[batch, samples]`.
    pub fn compute<'g>(&self, fake: Var<'g>, real: Var<'g>) -> Result<AuxTerms<'g>> {
        check_same_shape("auxiliary loss", &fake, &real)?;
        let shape = fake.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("auxiliary loss expects [batch, samples], got {shape:?}")));
        }
        if shape[1] < self.min_len {
            return Err(Error::InvalidInput(format!(
                "auxiliary loss needs at least {} samples, got {}",
                self.min_len, shape[1]
            )));
        }
        let graph = fake.graph();
        let mut br = AuxBreakdown::default();

        let mut stft_sum = scalar(graph, 0.0);
        for plan in &self.stft {
            let zf = fake.stft(plan.clone());
            let zr = real.stft(plan.clone());
            let (mf, mr) = (zf.complex_abs(), zr.complex_abs());
            let sc = spectral_convergence(mf, mr, self.denominator)?;
            let lm = log_magnitude_loss(mf, mr)?;
            let pc = phase_convergence(zf.complex_angle(), zr.complex_angle())?;
            br.stft_sc.push(sc.item());
            br.stft_log_mag.push(lm.item());
            br.phase.push(pc.item());
            stft_sum = stft_sum.add(sc).add(lm).add(pc.scale(self.phase_weight));
        }
        let stft = stft_sum.scale(1.0 / self.stft.len().max(1) as f64);

        let mut mel_sum = scalar(graph, 0.0);
        for m in &self.mel {
            let basis = graph.constant(m.basis.clone());
            let project = |wave: Var<'g>| {
                let mag = wave.stft(m.plan.clone()).complex_abs();
                let (b, f, k) = (mag.dim(0), mag.dim(1), mag.dim(2));
                mag.reshape([b * f, k]).matmul(basis)
            };
            let (xf, xr) = (project(fake), project(real));
            let sc = spectral_convergence(xf, xr, self.denominator)?;
            let lm = log_magnitude_loss(xf, xr)?;
            br.mel_sc.push(sc.item());
            br.mel_log_mag.push(lm.item());
            mel_sum = mel_sum.add(sc).add(lm);
        }
        let mel = mel_sum.scale(1.0 / self.mel.len().max(1) as f64);

        Ok(AuxTerms {
            total: stft.add(mel),
            stft,
            mel,
            breakdown: br,
        })
    }
}

fn check_scores(what: &str, scores: &[Var<'_>]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: no score maps")));
    }
    Ok(())
}

/// Mean over sub-discriminators of `mean((1 − D(G(z)))²)`.
pub fn adversarial_g_loss<'g>(fake_scores: &[Var<'g>]) -> Result<Var<'g>> {
    check_scores("generator adversarial loss", fake_scores)?;
    let graph = fake_scores[0].graph();
    let mut acc = scalar(graph, 0.0);
    for s in fake_scores {
        acc = acc.add(s.neg().add_scalar(1.0).square().mean());
    }
    Ok(acc.scale(1.0 / fake_scores.len() as f64))
}

/// Mean over sub-discriminators of `mean((1 − D(y))²) + mean(D(G(z))²)`.
pub fn adversarial_d_loss<'g>(real_scores: &[Var<'g>], fake_scores: &[Var<'g>]) -> Result<Var<'g>> {
    check_scores("discriminator adversarial loss", real_scores)?;
    if real_scores.len() != fake_scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} real score maps but {} fake ones",
            real_scores.len(),
            fake_scores.len()
        )));
    }
    let graph = real_scores[0].graph();
    let mut acc = scalar(graph, 0.0);
    for (r, f) in real_scores.iter().zip(fake_scores) {
        check_same_shape("discriminator adversarial loss", r, f)?;
        acc = acc.add(r.neg().add_scalar(1.0).square().mean()).add(f.square().mean());
    }
    Ok(acc.scale(1.0 / real_scores.len() as f64))
}

/// Sum over every feature map of the mean absolute real/fake difference.
pub fn feature_match_loss<'g>(real: &DiscriminatorOutput<'g>, fake: &DiscriminatorOutput<'g>) -> Result<Var<'g>> {
    if real.features.len() != fake.features.len() || real.features.is_empty() {
        return Err(Error::InvalidInput(format!(
            "feature lists differ: {} vs {} sub-discriminators",
            real.features.len(),
            fake.features.len()
        )));
    }
    let graph = real.features[0]
        .first()
        .map(|v| v.graph())
        .ok_or_else(|| Error::InvalidInput("sub-discriminator without feature maps".into()))?;
    let mut acc = scalar(graph, 0.0);
    for (i, (r, f)) in real.features.iter().zip(&fake.features).enumerate() {
        if r.len() != f.len() {
            return Err(Error::InvalidInput(format!(
                "sub-discriminator {i}: {} real feature maps but {} fake",
                r.len(),
                f.len()
            )));
        }
        for (a, b) in r.iter().zip(f) {
            check_same_shape("feature match", a, b)?;
            acc = acc.add(a.sub(*b).abs().mean());
        }
    }
    Ok(acc)
}

/// `λ_adv · adversarial + λ_aux · auxiliary + λ_fm · feature_match`.
pub fn generator_total_loss<'g>(
    adversarial: Var<'g>,
    auxiliary: Var<'g>,
    feature_match: Var<'g>,
    weights: &LossWeights,
) -> Var<'g> {
    adversarial
        .scale(weights.adversarial)
        .add(auxiliary.scale(weights.auxiliary))
        .add(feature_match.scale(weights.feature_match))
}

/// The discriminator objective is its adversarial loss alone.
pub fn discriminator_total_loss(adversarial: Var<'_>) -> Var<'_> {
    adversarial
}

/// Evaluates the auxiliary loss on plain waveforms (no gradients).
pub fn aux_loss_value(aux: &AuxLoss, fake: &[f64], real: &[f64]) -> Result<(f64, AuxBreakdown)> {
    if fake.len() != real.len() {
        return Err(Error::Shape(format!("waveform lengths {} and {} differ", fake.len(), real.len())));
    }
    let graph = Graph::new();
    let f = graph.constant(Tensor::new([1, fake.len()], fake.to_vec()));
    let r = graph.constant(Tensor::new([1, real.len()], real.to_vec()));
    let t = aux.compute(f, r)?;
    Ok((t.total.item(), t.breakdown))
}
