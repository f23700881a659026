//! Excitation pulse train: one impulse per pitch period on voiced samples,
//! Gaussian noise on unvoiced ones.
//!
//! Pulse positions come from an exact integer phase accumulator. F0 is
//! quantized to micro-hertz and the phase of a voiced run after `k` samples
//! is `Σ f0 / sample_rate` in those units, so a pulse fires whenever the
//! integer part of the phase increases (and on the first sample of each
//! run). Exact arithmetic makes the fast implementation and the per-sample
//! reference agree bit for bit.

use hwg_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::PitchTrack;

const MICRO: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    pub values: Vec<f64>,
    pub seed: u64,
}

impl PulseSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct Prepared {
    /// F0 per frame in micro-hertz; 0 when unvoiced.
    f0: Vec<u64>,
    period: u128,
    normal: Normal<f64>,
}

fn prepare(mel: &Tensor, pitch: &PitchTrack, sample_rate: u32, hop: usize, noise_std: f64) -> Result<Prepared> {
    if mel.ndim() != 2 {
        return Err(Error::Shape(format!("mel must be [frames, channels], got {:?}", mel.shape())));
    }
    if mel.dim(0) != pitch.f0.len() || pitch.f0.len() != pitch.vuv.len() {
        return Err(Error::InvalidInput(format!(
            "{} mel frames but {} pitch frames",
            mel.dim(0),
            pitch.f0.len()
        )));
    }
    if hop == 0 || sample_rate == 0 {
        return Err(Error::InvalidInput("hop and sample rate must be positive".into()));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidInput(format!("noise_std must be positive, got {noise_std}")));
    }
    let mut f0 = Vec::with_capacity(pitch.f0.len());
    for (t, (&f, &v)) in pitch.f0.iter().zip(&pitch.vuv).enumerate() {
        if !v {
            f0.push(0);
            continue;
        }
        let q = (f * MICRO).round();
        if !(f.is_finite() && q >= 1.0 && q < u64::MAX as f64) {
            return Err(Error::InvalidInput(format!("voiced frame {t} has f0 {f}")));
        }
        f0.push(q as u64);
    }
    Ok(Prepared {
        f0,
        period: u128::from(sample_rate) * MICRO as u128,
        normal: Normal::new(0.0, noise_std).expect("positive std"),
    })
}

/// Euclidean norm of a mel frame, summed in channel order.
fn frame_norm(mel: &Tensor, t: usize) -> f64 {
    let c = mel.dim(1);
    let mut acc = 0.0;
    for v in &mel.data()[t * c..(t + 1) * c] {
        acc += v * v;
    }
    acc.sqrt()
}

/// Builds the excitation for `mel.dim(0) · hop` samples. `mel` should be the
/// normalized log-mel the generator is conditioned on; pulse heights are the
/// norms of its frames.
pub fn extract_pulse(
    mel: &Tensor,
    pitch: &PitchTrack,
    sample_rate: u32,
    hop: usize,
    noise_std: f64,
    seed: u64,
) -> Result<PulseSequence> {
    let p = prepare(mel, pitch, sample_rate, hop, noise_std)?;
    let frames = p.f0.len();
    let mut out = vec![0.0; frames * hop];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Phase entering the current sample, and the multiple of the period it
    // has to reach for the next pulse.
    let mut phase: u128 = 0;
    let mut next: u128 = 0;
    let mut in_run = false;
    for t in 0..frames {
        let block = &mut out[t * hop..(t + 1) * hop];
        let f = u128::from(p.f0[t]);
        if f == 0 {
            in_run = false;
            for v in block.iter_mut() {
                *v = p.normal.sample(&mut rng);
            }
            continue;
        }
        let amp = frame_norm(mel, t);
        let mut k = 0usize;
        if !in_run {
            in_run = true;
            block[0] = amp;
            next = p.period;
            phase = f;
            k = 1;
        }
        while k < hop {
            let steps = next.saturating_sub(phase).div_ceil(f);
            let hit = k as u128 + steps;
            if hit >= hop as u128 {
                phase += f * (hop - k) as u128;
                break;
            }
            let hit = hit as usize;
            phase += f * steps;
            block[hit] = amp;
            next = (phase / p.period + 1) * p.period;
            phase += f;
            k = hit + 1;
        }
    }
    Ok(PulseSequence { values: out, seed })
}

/// Per-sample reference implementation of [`extract_pulse`].
pub fn pulse_oracle(
    mel: &Tensor,
    pitch: &PitchTrack,
    sample_rate: u32,
    hop: usize,
    noise_std: f64,
    seed: u64,
) -> Result<PulseSequence> {
    let p = prepare(mel, pitch, sample_rate, hop, noise_std)?;
    let mut out = vec![0.0; p.f0.len() * hop];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: u128 = 0;
    let mut prev_phase: u128 = 0;
    let mut prev_voiced = false;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i / hop;
        let f = u128::from(p.f0[t]);
        if f == 0 {
            *o = p.normal.sample(&mut rng);
            prev_voiced = false;
            continue;
        }
        if !prev_voiced {
            phase = 0;
            *o = frame_norm(mel, t);
        } else if phase / p.period > prev_phase / p.period {
            *o = frame_norm(mel, t);
        }
        prev_phase = phase;
        phase += f;
        prev_voiced = true;
    }
    Ok(PulseSequence { values: out, seed })
}
