//! Acoustic front end: STFT, log-mel spectrogram, YIN pitch tracking,
//! corpus normalization statistics and the on-disk feature cache.

use std::path::{Path, PathBuf};

use hwg_autograd::Tensor;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, AudioClip};
use crate::config::{FeatureConfig, StftConfig};
use crate::container::Container;
use crate::error::{Error, Result};

/// Magnitudes are clamped to this before taking logs.
pub const LOG_FLOOR: f64 = 1e-5;
/// Standard deviations are clamped to this in [`FeatureStats`].
pub const STD_FLOOR: f64 = 1e-8;

/// Complex one-sided spectrogram, interleaved `[frames, bins, (re, im)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> (f64, f64) {
        let i = 2 * (frame * self.bins + bin);
        (self.data[i], self.data[i + 1])
    }

    /// `[frames * bins]`, row-major by frame.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.chunks(2).map(|c| c[0].hypot(c[1])).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.data.chunks(2).map(|c| c[1].atan2(c[0])).collect()
    }
}

/// Centred STFT: frame `t` is centred on sample `t · hop`.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    stft_samples(&clip.samples, cfg, true)
}

/// STFT of raw samples; without `center` frames start at `t · hop`.
pub fn stft_samples(x: &[f64], cfg: &StftConfig, center: bool) -> Result<Spectrogram> {
    cfg.validate()?;
    let plan = hwg_autograd::StftPlan::new(cfg.fft_size, cfg.window_length, cfg.hop_length, cfg.window.into(), center);
    let frames = plan.n_frames(x.len()).ok_or_else(|| {
        Error::InvalidInput(format!(
            "clip of {} samples is shorter than one {}-point analysis frame",
            x.len(),
            cfg.fft_size
        ))
    })?;
    Ok(Spectrogram {
        frames,
        bins: plan.n_bins(),
        data: plan.forward(x),
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Slaney-style triangular filters with area normalization, `[n_mels, bins]`.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Tensor> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Config(format!("mel range {fmin}..{fmax} Hz invalid for {sample_rate} Hz audio")));
    }
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be positive".into()));
    }
    let bins = fft_size / 2 + 1;
    let fft_freqs: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate as f64 / fft_size as f64).collect();
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (w, &f) in row.iter_mut().zip(&fft_freqs) {
            let up = (f - left) / (centre - left);
            let down = (right - f) / (right - centre);
            *w = up.min(down).max(0.0) * norm;
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "{n_mels} mel filters is too many for a {fft_size}-point FFT: filter {m} covers no bins"
            )));
        }
    }
    Ok(Tensor::new([n_mels, bins], fb))
}

/// `log(max(fb · mag, floor))` per frame; `mag` is `[frames, bins]`.
pub fn log_mel_from_magnitude(fb: &Tensor, mag: &[f64], frames: usize) -> Tensor {
    let (n_mels, bins) = (fb.dim(0), fb.dim(1));
    assert_eq!(mag.len(), frames * bins);
    let mut out = vec![0.0; frames * n_mels];
    for t in 0..frames {
        let m = &mag[t * bins..(t + 1) * bins];
        for c in 0..n_mels {
            let w = &fb.data()[c * bins..(c + 1) * bins];
            let e: f64 = w.iter().zip(m).map(|(a, b)| a * b).sum();
            out[t * n_mels + c] = e.max(LOG_FLOOR).ln();
        }
    }
    Tensor::new([frames, n_mels], out)
}

/// Natural-log mel magnitudes, `[frames, n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub stft: StftConfig,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.dim(0)
    }

    pub fn n_mels(&self) -> usize {
        self.values.dim(1)
    }
}

pub fn mel_spectrogram(clip: &AudioClip, cfg: &StftConfig, n_mels: usize, fmin: f64, fmax: f64) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(clip.sample_rate, cfg.fft_size, n_mels, fmin, fmax)?;
    let spec = stft(clip, cfg)?;
    Ok(MelSpectrogram {
        values: log_mel_from_magnitude(&fb, &spec.magnitude(), spec.frames),
        stft: *cfg,
        fmin,
        fmax,
    })
}

/// Per-frame F0 in Hz (0 when unvoiced) with voicing decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub vuv: Vec<bool>,
    pub frame_rate: f64,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        self.vuv.iter().filter(|&&v| v).count() as f64 / self.vuv.len().max(1) as f64
    }

    /// `ln f0` on voiced frames, 0 elsewhere.
    pub fn log_f0(&self) -> Vec<f64> {
        self.f0.iter().zip(&self.vuv).map(|(&f, &v)| if v { f.ln() } else { 0.0 }).collect()
    }
}

/// Cumulative-mean-normalized-difference threshold that marks the first
/// period candidate.
const YIN_DIP: f64 = 0.1;
/// Frames quieter than this RMS are unvoiced without analysis.
const SILENCE_RMS: f64 = 1e-4;

/// YIN pitch tracker with one frame per `hop` samples, centred like the
/// STFT so frame `t` describes sample `t · hop`. A frame is voiced when its
/// periodicity confidence (one minus the normalized difference at the chosen
/// lag) reaches `threshold` and the estimate lies in `[f0_min, f0_max]`.
pub fn extract_f0(clip: &AudioClip, hop: usize, f0_min: f64, f0_max: f64, threshold: f64) -> Result<PitchTrack> {
    let sr = clip.sample_rate as f64;
    if hop == 0 {
        return Err(Error::InvalidInput("hop must be positive".into()));
    }
    if !(f0_min >= 20.0 && f0_min < f0_max && f0_max <= sr / 4.0) {
        return Err(Error::InvalidInput(format!(
            "f0 range {f0_min}..{f0_max} Hz must satisfy 20 <= f0_min < f0_max <= {}",
            sr / 4.0
        )));
    }
    let lag_min = ((sr / f0_max).floor() as usize).max(2);
    let lag_max = (sr / f0_min).ceil() as usize;
    let width = lag_max;
    let frames = clip.len() / hop + 1;
    let x = &clip.samples;
    let mut seg = vec![0.0; width + lag_max + 1];
    let mut diff = vec![0.0; lag_max + 2];
    let mut cmnd = vec![1.0; lag_max + 2];
    let mut f0 = vec![0.0; frames];
    let mut vuv = vec![false; frames];
    for t in 0..frames {
        let start = (t * hop) as isize - (width / 2) as isize;
        for (j, s) in seg.iter_mut().enumerate() {
            let i = start + j as isize;
            *s = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
        }
        let energy: f64 = seg[..width].iter().map(|v| v * v).sum();
        if (energy / width as f64).sqrt() < SILENCE_RMS {
            continue;
        }
        for (tau, d) in diff.iter_mut().enumerate().take(lag_max + 1).skip(1) {
            *d = seg[..width]
                .iter()
                .zip(&seg[tau..tau + width])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
        let mut running = 0.0;
        for tau in 1..=lag_max {
            running += diff[tau];
            cmnd[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
        }
        let mut best = None;
        let mut tau = lag_min;
        while tau <= lag_max {
            if cmnd[tau] < YIN_DIP {
                while tau < lag_max && cmnd[tau + 1] < cmnd[tau] {
                    tau += 1;
                }
                best = Some(tau);
                break;
            }
            tau += 1;
        }
        let tau = best.unwrap_or_else(|| {
            (lag_min..=lag_max)
                .min_by(|&a, &b| cmnd[a].total_cmp(&cmnd[b]))
                .expect("non-empty lag range")
        });
        let mut period = tau as f64;
        if tau > 1 && tau < lag_max {
            let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
            let denom = a - 2.0 * b + c;
            if denom > 0.0 {
                let shift = 0.5 * (a - c) / denom;
                if shift.abs() < 1.0 {
                    period += shift;
                }
            }
        }
        let confidence = 1.0 - cmnd[tau];
        let freq = sr / period;
        if confidence >= threshold && (f0_min..=f0_max).contains(&freq) {
            f0[t] = freq;
            vuv[t] = true;
        }
    }
    Ok(PitchTrack {
        f0,
        vuv,
        frame_rate: sr / hop as f64,
    })
}

/// Per-channel log-mel mean and standard deviation over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Z-scores a `[frames, channels]` matrix.
    pub fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        if mel.ndim() != 2 || mel.dim(1) != self.mean.len() {
            return Err(Error::Shape(format!(
                "mel of shape {:?} does not match {} normalization channels",
                mel.shape(),
                self.mean.len()
            )));
        }
        let c = self.mean.len();
        let mut out = mel.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let c = self.mean.len();
        (Tensor::new([c], self.mean.clone()), Tensor::new([c], self.std.clone()))
    }

    pub fn from_tensors(mean: &Tensor, std: &Tensor) -> Result<Self> {
        if mean.shape() != std.shape() || mean.ndim() != 1 || std.data().iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidInput("malformed feature statistics".into()));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }
}

/// Streaming (Welford) per-channel mean and population standard deviation.
pub fn compute_stats(corpus: &[Tensor]) -> Result<FeatureStats> {
    let first = corpus.first().ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
    if first.ndim() != 2 {
        return Err(Error::Shape("mel matrices must be [frames, channels]".into()));
    }
    let c = first.dim(1);
    let mut n = 0u64;
    let mut mean = vec![0.0; c];
    let mut m2 = vec![0.0; c];
    for mel in corpus {
        if mel.ndim() != 2 || mel.dim(1) != c {
            return Err(Error::Shape(format!("mel of shape {:?} in a {c}-channel corpus", mel.shape())));
        }
        for row in mel.data().chunks(c) {
            n += 1;
            for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let delta = v - *m;
                *m += delta / n as f64;
                *s += delta * (v - *m);
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("corpus has no frames".into()));
    }
    let std = m2.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(FeatureStats { mean, std })
}

/// Everything the vocoder needs from one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// Raw (unnormalized) log-mel, `[frames, n_mels]`.
    pub mel: Tensor,
    pub f0: Vec<f64>,
    pub vuv: Vec<bool>,
    pub sample_rate: u32,
    pub hop_length: usize,
    /// Length of the source audio.
    pub n_samples: usize,
}

impl FeatureBundle {
    pub fn frames(&self) -> usize {
        self.mel.dim(0)
    }

    pub fn pitch(&self) -> PitchTrack {
        PitchTrack {
            f0: self.f0.clone(),
            vuv: self.vuv.clone(),
            frame_rate: self.sample_rate as f64 / self.hop_length as f64,
        }
    }

    /// Generator conditioning, `[n_mels + 1, frames]`: normalized log-mel
    /// rows followed by a log-F0 row.
    pub fn condition(&self, stats: &FeatureStats) -> Result<Tensor> {
        let mel = stats.normalize(&self.mel)?;
        let (frames, c) = (mel.dim(0), mel.dim(1));
        let mut out = vec![0.0; (c + 1) * frames];
        for t in 0..frames {
            for ch in 0..c {
                out[ch * frames + t] = mel.data()[t * c + ch];
            }
        }
        out[c * frames..].copy_from_slice(&self.pitch().log_f0());
        Ok(Tensor::new([c + 1, frames], out))
    }

    /// Frames `[start, start + len)`, padding past the end with silent,
    /// unvoiced frames.
    pub fn slice_frames(&self, start: usize, len: usize) -> FeatureBundle {
        let c = self.mel.dim(1);
        let silent = LOG_FLOOR.ln();
        let mut mel = vec![silent; len * c];
        let mut f0 = vec![0.0; len];
        let mut vuv = vec![false; len];
        for i in 0..len {
            let t = start + i;
            if t < self.frames() {
                mel[i * c..(i + 1) * c].copy_from_slice(&self.mel.data()[t * c..(t + 1) * c]);
                f0[i] = self.f0[t];
                vuv[i] = self.vuv[t];
            }
        }
        FeatureBundle {
            mel: Tensor::new([len, c], mel),
            f0,
            vuv,
            sample_rate: self.sample_rate,
            hop_length: self.hop_length,
            n_samples: len * self.hop_length,
        }
    }
}

pub fn extract_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureBundle> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "audio at {} Hz, features configured for {} Hz",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let mel = mel_spectrogram(clip, &cfg.stft, cfg.n_mels, cfg.fmin, cfg.fmax)?;
    let pitch = extract_f0(clip, cfg.hop_length(), cfg.f0_min, cfg.f0_max, cfg.voicing_threshold)?;
    debug_assert_eq!(mel.frames(), pitch.len());
    Ok(FeatureBundle {
        mel: mel.values,
        f0: pitch.f0,
        vuv: pitch.vuv,
        sample_rate: clip.sample_rate,
        hop_length: cfg.hop_length(),
        n_samples: clip.len(),
    })
}

/// Content hash of a clip: identical audio gives identical keys.
pub fn content_key(clip: &AudioClip) -> String {
    let mut h = Sha256::new();
    h.update(clip.sample_rate.to_le_bytes());
    for s in &clip.samples {
        h.update(s.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn save_features(path: &Path, bundle: &FeatureBundle, cfg: &FeatureConfig, key: &str) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "features",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "content_key": key,
        "sample_rate": bundle.sample_rate,
        "hop_length": bundle.hop_length,
        "n_samples": bundle.n_samples,
    }));
    c.insert("mel", bundle.mel.clone());
    c.insert("f0", Tensor::new([bundle.f0.len()], bundle.f0.clone()));
    c.insert(
        "vuv",
        Tensor::new([bundle.vuv.len()], bundle.vuv.iter().map(|&v| f64::from(u8::from(v))).collect()),
    );
    c.write(path)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a cached bundle and the config hash it was extracted with.
pub fn load_features_with_hash(path: &Path) -> Result<(FeatureBundle, String)> {
    let c = Container::read(path)?;
    let meta = &c.meta;
    if meta["kind"] != "features" {
        return Err(corrupt(path, "not a feature file"));
    }
    let num = |k: &str| meta[k].as_u64().ok_or_else(|| corrupt(path, format!("missing {k}")));
    let array = |k: &str| c.get(k).ok_or_else(|| corrupt(path, format!("missing array {k}")));
    let mel = array("mel")?.clone();
    let f0 = array("f0")?.data().to_vec();
    let vuv: Vec<bool> = array("vuv")?.data().iter().map(|&v| v != 0.0).collect();
    if mel.ndim() != 2 || f0.len() != mel.dim(0) || vuv.len() != mel.dim(0) {
        return Err(corrupt(path, "misaligned feature arrays"));
    }
    let hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
    Ok((
        FeatureBundle {
            mel,
            f0,
            vuv,
            sample_rate: num("sample_rate")? as u32,
            hop_length: num("hop_length")? as usize,
            n_samples: num("n_samples")? as usize,
        },
        hash,
    ))
}

pub fn load_features(path: &Path) -> Result<FeatureBundle> {
    load_features_with_hash(path).map(|(b, _)| b)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Computed,
    /// An entry existed but was stale or unreadable.
    Recomputed(String),
}

/// Cache file for a clip, named by its content hash.
pub fn cache_path(out_dir: &Path, key: &str) -> PathBuf {
    out_dir.join(format!("{}.feat", &key[..32]))
}

/// Loads the clip's features from `out_dir`, extracting and storing them on
/// a miss. Entries written under a different feature config, or that fail
/// to parse, are recomputed.
pub fn cache_features(clip_path: &Path, out_dir: &Path, cfg: &FeatureConfig) -> Result<(FeatureBundle, CacheOutcome)> {
    let clip = read_wav(clip_path, cfg.sample_rate)?;
    cache_clip_features(&clip, out_dir, cfg)
}

pub fn cache_clip_features(clip: &AudioClip, out_dir: &Path, cfg: &FeatureConfig) -> Result<(FeatureBundle, CacheOutcome)> {
    let key = content_key(clip);
    let path = cache_path(out_dir, &key);
    let mut outcome = CacheOutcome::Computed;
    if path.exists() {
        match load_features_with_hash(&path) {
            Ok((bundle, hash)) if hash == cfg.hash() => return Ok((bundle, CacheOutcome::Hit)),
            Ok(_) => {
                log::info!("{}: feature config changed, recomputing", path.display());
                outcome = CacheOutcome::Recomputed("config hash mismatch".into());
            }
            Err(e) => {
                log::warn!("{e}; recomputing");
                outcome = CacheOutcome::Recomputed(e.to_string());
            }
        }
    }
    let bundle = extract_features(clip, cfg)?;
    save_features(&path, &bundle, cfg, &key)?;
    Ok((bundle, outcome))
}
