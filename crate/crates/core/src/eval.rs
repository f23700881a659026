//! Objective evaluation: multi-resolution STFT error, mel-cepstral
//! distortion and real-time factor.

use std::f64::consts::{LN_10, PI};

use hwg_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::config::{Config, StftConfig};
use crate::error::{Error, Result};
use crate::features::mel_spectrogram;
use crate::losses::{log_magnitude_loss, spectral_convergence};
use crate::synthesis::Vocoder;

/// Cepstral coefficients compared by [`mel_cepstral_distortion`], the
/// energy term excluded.
pub const MCD_ORDER: usize = 25;

/// Orthonormal DCT-II of each log-mel frame (`[frames, n_mels]`), keeping
/// coefficients `0..=order`.
pub fn mel_cepstrum(log_mel: &Tensor, order: usize) -> Tensor {
    let (frames, n) = (log_mel.dim(0), log_mel.dim(1));
    let keep = (order + 1).min(n);
    let mut basis = vec![0.0; keep * n];
    for k in 0..keep {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            basis[k * n + i] = scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos();
        }
    }
    let x = log_mel.data();
    Tensor::from_fn([frames, keep], |idx| {
        let (t, k) = (idx / keep, idx % keep);
        x[t * n..(t + 1) * n].iter().zip(&basis[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum()
    })
}

/// Mean over frames of `10√2 / ln 10 · ‖c − ĉ‖` over cepstral coefficients
/// `1..=MCD_ORDER`, in dB.
pub fn mel_cepstral_distortion(log_mel_a: &Tensor, log_mel_b: &Tensor) -> Result<f64> {
    if log_mel_a.shape() != log_mel_b.shape() || log_mel_a.ndim() != 2 || log_mel_a.dim(0) == 0 {
        return Err(Error::Shape(format!(
            "log-mel shapes {:?} and {:?} are not comparable",
            log_mel_a.shape(),
            log_mel_b.shape()
        )));
    }
    let a = mel_cepstrum(log_mel_a, MCD_ORDER);
    let b = mel_cepstrum(log_mel_b, MCD_ORDER);
    let (frames, keep) = (a.dim(0), a.dim(1));
    let k = 10.0 * 2f64.sqrt() / LN_10;
    let mut total = 0.0;
    for t in 0..frames {
        let d2: f64 = (1..keep).map(|c| (a.data()[t * keep + c] - b.data()[t * keep + c]).powi(2)).sum();
        total += k * d2.sqrt();
    }
    Ok(total / frames as f64)
}

/// Mean over resolutions of spectral convergence plus log-magnitude
/// distance between `fake` and `real`.
pub fn stft_error(fake: &[f64], real: &[f64], resolutions: &[StftConfig]) -> Result<f64> {
    if fake.len() != real.len() {
        return Err(Error::Shape(format!("waveform lengths {} and {} differ", fake.len(), real.len())));
    }
    if resolutions.is_empty() {
        return Err(Error::Config("no STFT resolutions to evaluate".into()));
    }
    let graph = Graph::new();
    let f = graph.constant(Tensor::new([1, fake.len()], fake.to_vec()));
    let r = graph.constant(Tensor::new([1, real.len()], real.to_vec()));
    let mut total = 0.0;
    for res in resolutions {
        let plan = std::sync::Arc::new(res.plan());
        if fake.len() < plan.min_len().max(res.window_length) {
            return Err(Error::InvalidInput(format!(
                "{} samples is too short for the {}-point evaluation STFT",
                fake.len(),
                res.fft_size
            )));
        }
        let mf = f.stft(plan.clone()).complex_abs();
        let mr = r.stft(plan).complex_abs();
        let sc = spectral_convergence(mf, mr, crate::config::ScDenominator::Real)?;
        total += sc.item() + log_magnitude_loss(mf, mr)?.item();
    }
    Ok(total / resolutions.len() as f64)
}

/// STFT error and MCD of `fake` against `real`, over their common length.
pub fn score_pair(cfg: &Config, fake: &AudioClip, real: &AudioClip) -> Result<(f64, f64)> {
    let n = fake.len().min(real.len());
    let fake = AudioClip::new(fake.samples[..n].to_vec(), fake.sample_rate)?;
    let real = AudioClip::new(real.samples[..n].to_vec(), real.sample_rate)?;
    let stft = stft_error(&fake.samples, &real.samples, &cfg.loss.stft_resolutions)?;
    let f = &cfg.features;
    let mf = mel_spectrogram(&fake, &f.stft, f.n_mels, f.fmin, f.fmax)?;
    let mr = mel_spectrogram(&real, &f.stft, f.n_mels, f.fmin, f.fmax)?;
    Ok((stft, mel_cepstral_distortion(&mf.values, &mr.values)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub name: String,
    pub stft_error: f64,
    pub mcd_db: f64,
    pub audio_seconds: f64,
    pub synthesis_seconds: f64,
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by name.
    pub utterances: Vec<UtteranceScore>,
    pub skipped: Vec<Skipped>,
    /// Arithmetic means over `utterances`; absent when nothing was scored.
    pub mean_stft_error: Option<f64>,
    pub mean_mcd_db: Option<f64>,
    /// Total synthesis time over total audio duration.
    pub rtf: Option<f64>,
    pub parameter_count: usize,
}

impl EvalReport {
    pub fn new(mut utterances: Vec<UtteranceScore>, mut skipped: Vec<Skipped>, parameter_count: usize) -> Self {
        utterances.sort_by(|a, b| a.name.cmp(&b.name));
        skipped.sort_by(|a, b| a.name.cmp(&b.name));
        let n = utterances.len() as f64;
        let mean = |f: fn(&UtteranceScore) -> f64| (n > 0.0).then(|| utterances.iter().map(f).sum::<f64>() / n);
        let audio: f64 = utterances.iter().map(|u| u.audio_seconds).sum();
        let synth: f64 = utterances.iter().map(|u| u.synthesis_seconds).sum();
        Self {
            mean_stft_error: mean(|u| u.stft_error),
            mean_mcd_db: mean(|u| u.mcd_db),
            rtf: (audio > 0.0).then(|| synth / audio),
            utterances,
            skipped,
            parameter_count,
        }
    }
}

/// Copy-synthesizes every readable clip and scores it against the
/// original. Clips that failed to load are listed as skipped.
pub fn evaluate(vocoder: &Vocoder, clips: Vec<(String, Result<AudioClip>)>, seed: u64) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (name, clip) in clips {
        let clip = match clip {
            Ok(c) => c,
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push(Skipped {
                    name,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let synth = vocoder.copy_synthesize(&clip, seed)?;
        let (stft, mcd) = score_pair(vocoder.config(), &synth.audio, &clip)?;
        scores.push(UtteranceScore {
            name,
            stft_error: stft,
            mcd_db: mcd,
            audio_seconds: synth.audio.duration_seconds(),
            synthesis_seconds: synth.seconds,
            rtf: synth.real_time_factor(),
        });
    }
    Ok(EvalReport::new(scores, skipped, vocoder.generator().count_parameters()))
}
