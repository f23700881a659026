//! Every hyperparameter of the vocoder, its presets, and TOML loading.
//!
//! A config file is a partial TOML document merged key by key over a preset,
//! so a file only needs to name what it changes. Unknown keys are rejected
//! with their full dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

impl From<WindowKind> for hwg_autograd::Window {
    fn from(w: WindowKind) -> Self {
        match w {
            WindowKind::Hann => hwg_autograd::Window::Hann,
            WindowKind::Rectangular => hwg_autograd::Window::Rectangular,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl StftConfig {
    pub const fn hann(fft_size: usize, window_length: usize, hop_length: usize) -> Self {
        Self {
            fft_size,
            window_length,
            hop_length,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.window_length == 0 || self.window_length > self.fft_size {
            return Err(Error::Config(format!(
                "window length {} must be in 1..={} (fft size)",
                self.window_length, self.fft_size
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.window_length {
            return Err(Error::Config(format!(
                "hop length {} must be in 1..={} (window length)",
                self.hop_length, self.window_length
            )));
        }
        Ok(())
    }

    /// Centred (reflect-padded) analysis plan.
    pub fn plan(&self) -> hwg_autograd::StftPlan {
        hwg_autograd::StftPlan::new(self.fft_size, self.window_length, self.hop_length, self.window.into(), true)
    }
}

/// A mel-spectrogram resolution used by the auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelResolution {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
}

impl MelResolution {
    pub fn stft(&self) -> StftConfig {
        StftConfig::hann(self.fft_size, self.window_length, self.hop_length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum periodicity confidence for a voiced frame.
    pub voicing_threshold: f64,
}

impl FeatureConfig {
    pub fn hop_length(&self) -> usize {
        self.stft.hop_length
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "mel range {}..{} Hz must satisfy 0 <= fmin < fmax <= {nyquist}",
                self.fmin, self.fmax
            )));
        }
        if !(self.f0_min >= 20.0 && self.f0_min < self.f0_max && self.f0_max <= self.sample_rate as f64 / 4.0) {
            return Err(Error::Config(format!(
                "f0 range {}..{} Hz must satisfy 20 <= f0_min < f0_max <= sample_rate/4",
                self.f0_min, self.f0_max
            )));
        }
        if !(0.0..=1.0).contains(&self.voicing_threshold) {
            return Err(Error::Config("voicing_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of the settings that determine extracted features.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    /// Standard deviation of the excitation noise on unvoiced samples.
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub stacks: usize,
    /// Kernel size of each layer within a stack.
    pub kernel_sizes: Vec<usize>,
    /// Dilation of each layer within a stack.
    pub dilations: Vec<usize>,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    /// Mel channels plus one log-F0 channel.
    pub condition_channels: usize,
    pub noise_channels: usize,
    /// Width of both upsampling networks.
    pub upsample_channels: usize,
    pub upsample_factors: Vec<usize>,
    /// Feed the excitation pulse as an extra conditioning channel.
    pub use_pulse: bool,
}

impl GeneratorConfig {
    pub fn hop_length(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    /// `(kernel, dilation)` of every residual layer in order.
    pub fn layer_specs(&self) -> Vec<(usize, usize)> {
        (0..self.stacks)
            .flat_map(|_| self.kernel_sizes.iter().copied().zip(self.dilations.iter().copied()))
            .collect()
    }

    /// Channels of the per-layer local conditioning input.
    pub fn local_channels(&self) -> usize {
        self.upsample_channels + usize::from(self.use_pulse)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stacks == 0 || self.kernel_sizes.is_empty() {
            return bad("generator needs at least one layer".into());
        }
        if self.kernel_sizes.len() != self.dilations.len() {
            return bad(format!(
                "{} kernel sizes but {} dilations per stack",
                self.kernel_sizes.len(),
                self.dilations.len()
            ));
        }
        if self.kernel_sizes.len() * self.stacks != self.layers {
            return bad(format!(
                "{} kernel sizes x {} stacks != {} layers",
                self.kernel_sizes.len(),
                self.stacks,
                self.layers
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} is even; symmetric padding needs odd kernels"));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if self.gate_channels == 0 || !self.gate_channels.is_multiple_of(2) {
            return bad(format!("gate_channels {} must be positive and even", self.gate_channels));
        }
        if self.residual_channels == 0 || self.skip_channels == 0 || self.upsample_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.condition_channels == 0 || self.noise_channels == 0 {
            return bad("condition and noise channels must be positive".into());
        }
        if self.upsample_factors.is_empty() || self.upsample_factors.contains(&0) {
            return bad("upsample factors must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpdConfig {
    pub periods: Vec<usize>,
    /// Output channels of the strided convolutions.
    pub channels: Vec<usize>,
    /// Height stride of each strided convolution.
    pub strides: Vec<usize>,
    pub kernel_size: usize,
    pub post_kernel_size: usize,
    pub slope: f64,
}

impl MpdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.iter().any(|&p| p < 2) {
            return Err(Error::Config("MPD periods must all be >= 2".into()));
        }
        for (i, &a) in self.periods.iter().enumerate() {
            for &b in &self.periods[i + 1..] {
                if gcd(a, b) != 1 {
                    return Err(Error::Config(format!("MPD periods {a} and {b} are not coprime")));
                }
            }
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("MPD needs one stride per conv layer".into()));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("MPD channels and strides must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.post_kernel_size.is_multiple_of(2) {
            return Err(Error::Config("MPD kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrsdConfig {
    pub resolutions: Vec<StftConfig>,
    /// Output channels of the hidden 3x3 convolutions; a final conv maps to
    /// one channel.
    pub channels: Vec<usize>,
    /// `(time, frequency)` stride of each hidden convolution.
    pub strides: Vec<(usize, usize)>,
    pub slope: f64,
}

impl MrsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("MRSD needs at least one resolution".into()));
        }
        for r in &self.resolutions {
            r.validate()?;
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("MRSD needs one stride per hidden conv".into()));
        }
        if self.channels.contains(&0) || self.strides.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config("MRSD channels and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn longest_window(&self) -> usize {
        self.resolutions.iter().map(|r| r.fft_size).max().unwrap_or(0)
    }
}

/// Which spectrogram normalizes the spectral convergence term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScDenominator {
    /// `‖x − y‖ / ‖x‖` with `x` the generated spectrogram.
    Fake,
    /// `‖x − y‖ / ‖y‖`, the usual multi-resolution STFT form.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub stft_resolutions: Vec<StftConfig>,
    pub mel_resolutions: Vec<MelResolution>,
    pub phase_weight: f64,
    pub sc_denominator: ScDenominator,
    pub lambda_adv: f64,
    pub lambda_aux: f64,
    pub lambda_fm: f64,
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            adversarial: self.lambda_adv,
            auxiliary: self.lambda_aux,
            feature_match: self.lambda_fm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stft_resolutions.is_empty() && self.mel_resolutions.is_empty() {
            return Err(Error::Config("auxiliary loss needs at least one resolution".into()));
        }
        for r in &self.stft_resolutions {
            r.validate()?;
        }
        for m in &self.mel_resolutions {
            m.stft().validate()?;
            if m.n_mels == 0 {
                return Err(Error::Config("mel resolution needs n_mels > 0".into()));
            }
        }
        let w = [self.phase_weight, self.lambda_adv, self.lambda_aux, self.lambda_fm];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn longest_window(&self) -> usize {
        self.stft_resolutions
            .iter()
            .map(|r| r.fft_size)
            .chain(self.mel_resolutions.iter().map(|m| m.fft_size))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adversarial: f64,
    pub auxiliary: f64,
    pub feature_match: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            auxiliary: 120.0,
            feature_match: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Iterations before the adversarial and feature-matching terms start.
    pub adversarial_start: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Segment length in frames for a given hop.
    pub fn segment_frames(&self, sample_rate: u32, hop: usize) -> Result<usize> {
        let samples = self.segment_seconds * sample_rate as f64;
        let rounded = samples.round();
        if (samples - rounded).abs() > 1e-6 || !(rounded as usize).is_multiple_of(hop) || rounded < hop as f64 {
            return Err(Error::Config(format!(
                "segment of {} s is not a positive whole number of {hop}-sample frames",
                self.segment_seconds
            )));
        }
        Ok(rounded as usize / hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let pos = [self.learning_rate, self.eps, self.lr_decay];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning_rate, eps and lr_decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub features: FeatureConfig,
    pub pulse: PulseConfig,
    pub generator: GeneratorConfig,
    pub mpd: MpdConfig,
    pub mrsd: MrsdConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Tiny model that trains on a laptop CPU in minutes.
    Desk,
    /// Reference-size model and recipe.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }
}

fn reference_features() -> FeatureConfig {
    FeatureConfig {
        sample_rate: 48_000,
        stft: StftConfig::hann(2048, 960, 240),
        n_mels: 120,
        fmin: 0.0,
        fmax: 24_000.0,
        f0_min: 60.0,
        f0_max: 1500.0,
        voicing_threshold: 0.45,
    }
}

fn reference_loss() -> LossConfig {
    LossConfig {
        stft_resolutions: vec![
            StftConfig::hann(512, 240, 50),
            StftConfig::hann(1024, 600, 120),
            StftConfig::hann(2048, 1200, 240),
        ],
        mel_resolutions: vec![
            MelResolution {
                fft_size: 2048,
                window_length: 960,
                hop_length: 240,
                n_mels: 120,
            },
            MelResolution {
                fft_size: 1024,
                window_length: 480,
                hop_length: 120,
                n_mels: 80,
            },
        ],
        phase_weight: 1.0,
        sc_denominator: ScDenominator::Fake,
        lambda_adv: 1.0,
        lambda_aux: 120.0,
        lambda_fm: 10.0,
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let full = preset == Preset::Full;
        let width = |desk: usize, full_size: usize| if full { full_size } else { desk };
        Config {
            features: reference_features(),
            pulse: PulseConfig { noise_std: 0.003 },
            generator: GeneratorConfig {
                layers: 18,
                stacks: 3,
                kernel_sizes: vec![3, 3, 9, 9, 17, 17],
                dilations: vec![1, 2, 4, 8, 16, 32],
                residual_channels: width(16, 96),
                gate_channels: width(32, 192),
                skip_channels: width(16, 96),
                condition_channels: 121,
                noise_channels: 121,
                upsample_channels: width(16, 96),
                upsample_factors: vec![8, 6, 5],
                use_pulse: true,
            },
            mpd: MpdConfig {
                periods: vec![2, 3, 5, 7, 11],
                channels: if full {
                    vec![32, 128, 512, 1024, 1024]
                } else {
                    vec![8, 16, 32, 32, 32]
                },
                strides: vec![3, 3, 3, 3, 3],
                kernel_size: 5,
                post_kernel_size: 3,
                slope: 0.1,
            },
            mrsd: MrsdConfig {
                resolutions: vec![
                    StftConfig::hann(512, 360, 80),
                    StftConfig::hann(1024, 720, 160),
                    StftConfig::hann(2048, 1440, 320),
                    StftConfig::hann(4096, 2880, 640),
                ],
                channels: vec![width(8, 32); 5],
                strides: vec![(1, 1), (1, 2), (1, 2), (1, 2), (1, 1)],
                slope: 0.1,
            },
            loss: reference_loss(),
            train: TrainConfig {
                segment_seconds: if full { 4.0 } else { 0.5 },
                batch_size: if full { 8 } else { 2 },
                max_iterations: if full { 200_000 } else { 500 },
                learning_rate: 2e-4,
                beta1: 0.8,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.01,
                lr_decay: 0.999,
                seed: 1234,
                checkpoint_interval: if full { 10_000 } else { 100 },
                adversarial_start: 0,
                grad_clip: 0.0,
            },
        }
    }

    /// Merges a TOML document over `preset`.
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Config::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        let de = toml::Value::Table(base);
        let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.generator.validate()?;
        self.mpd.validate()?;
        self.mrsd.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.generator.hop_length() != self.features.hop_length() {
            return Err(Error::Config(format!(
                "upsample factors multiply to {} but the feature hop is {}",
                self.generator.hop_length(),
                self.features.hop_length()
            )));
        }
        if self.generator.condition_channels != self.features.n_mels + 1 {
            return Err(Error::Config(format!(
                "condition_channels {} != n_mels {} + 1 (log-F0)",
                self.generator.condition_channels, self.features.n_mels
            )));
        }
        if self.pulse.noise_std.is_nan() || self.pulse.noise_std <= 0.0 {
            return Err(Error::Config("pulse.noise_std must be > 0".into()));
        }
        let seg = self
            .train
            .segment_frames(self.features.sample_rate, self.features.hop_length())?
            * self.features.hop_length();
        let longest = self.mrsd.longest_window().max(self.loss.longest_window());
        if seg <= longest / 2 {
            return Err(Error::Config(format!(
                "training segment of {seg} samples is too short for a {longest}-point STFT"
            )));
        }
        if seg < self.mpd.periods.iter().copied().max().unwrap_or(0) {
            return Err(Error::Config("training segment shorter than the largest MPD period".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(bytes))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::preset(Preset::Desk).validate().unwrap();
        Config::preset(Preset::Full).validate().unwrap();
    }

    #[test]
    fn toml_overrides_merge_over_preset() {
        let c = Config::from_toml_str("[train]\nbatch_size = 3\n[generator]\nuse_pulse = false\n", Preset::Desk).unwrap();
        assert_eq!(c.train.batch_size, 3);
        assert!(!c.generator.use_pulse);
        assert_eq!(c.train.segment_seconds, 0.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml_str("[train]\nbatch_sise = 3\n", Preset::Desk).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch_sise"), "{msg}");
        assert!(msg.contains("train"), "{msg}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::preset(Preset::Full);
        let back = Config::from_toml_str(&c.to_toml_string(), Preset::Desk).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = Config::preset(Preset::Desk);
        let mut b = a.clone();
        b.features.stft.hop_length = 120;
        assert_ne!(a.features.hash(), b.features.hash());
    }

    #[test]
    fn rejects_mismatched_hop() {
        let err = Config::from_toml_str("[generator]\nupsample_factors = [8, 6, 4]\n", Preset::Desk).unwrap_err();
        assert!(err.to_string().contains("multiply"));
    }
}
