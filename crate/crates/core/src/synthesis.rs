//! Inference from a trained checkpoint.

use std::path::Path;
use std::time::Instant;

use hwg_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::AudioClip;
use crate::config::Config;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureBundle, FeatureStats};
use crate::generator::Generator;
use crate::pulse::extract_pulse;
use crate::training::{checkpoint_config, checkpoint_stats, restore_params};

/// Generator, config and normalization statistics from a checkpoint.
pub struct Vocoder {
    config: Config,
    generator: Generator,
    stats: FeatureStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub audio: AudioClip,
    /// Wall time of the generator pass alone.
    pub seconds: f64,
}

impl Synthesis {
    /// Synthesis time per second of audio.
    pub fn real_time_factor(&self) -> f64 {
        self.seconds / self.audio.duration_seconds()
    }
}

impl Vocoder {
    pub fn new(config: Config, generator: Generator, stats: FeatureStats) -> Self {
        Self {
            config,
            generator,
            stats,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = checkpoint_config(c)?;
        let mut generator = Generator::new(&config.generator, 0)?;
        restore_params(c, "generator", generator.params_mut())?;
        let stats = checkpoint_stats(c)?;
        Ok(Self::new(config, generator, stats))
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    /// Waveform of `frames × hop` samples for `bundle`. The seed fixes
    /// both the unvoiced excitation and the generator noise.
    pub fn synthesize(&self, bundle: &FeatureBundle, seed: u64) -> Result<Synthesis> {
        let g = &self.config.generator;
        let f = &self.config.features;
        if bundle.mel.dim(1) != f.n_mels || bundle.hop_length != g.hop_length() || bundle.sample_rate != f.sample_rate {
            return Err(Error::Shape(format!(
                "features have {} mels at hop {} and {} Hz; checkpoint expects {} mels at hop {} and {} Hz",
                bundle.mel.dim(1),
                bundle.hop_length,
                bundle.sample_rate,
                f.n_mels,
                g.hop_length(),
                f.sample_rate
            )));
        }
        let frames = bundle.frames();
        let mel = self.stats.normalize(&bundle.mel)?;
        let pulse = extract_pulse(
            &mel,
            &bundle.pitch(),
            bundle.sample_rate,
            bundle.hop_length,
            self.config.pulse.noise_std,
            seed,
        )?;
        let condition = bundle.condition(&self.stats)?;
        let channels = condition.dim(0);
        let condition = condition.reshape([1, channels, frames]);
        let noise = draw_noise(seed, g.noise_channels, frames);
        let pulse = Tensor::new([1, frames * bundle.hop_length], pulse.values);

        let start = Instant::now();
        let out = self.generator.generate(&noise, &condition, &pulse)?;
        let seconds = start.elapsed().as_secs_f64();
        Ok(Synthesis {
            audio: AudioClip::new(out.into_data(), bundle.sample_rate)?,
            seconds,
        })
    }

    /// Extracts features from `clip` and vocodes them back.
    pub fn copy_synthesize(&self, clip: &AudioClip, seed: u64) -> Result<Synthesis> {
        let bundle = extract_features(clip, &self.config.features)?;
        self.synthesize(&bundle, seed)
    }
}

/// Generator noise `[1, channels, frames]` for a seed. Uses its own stream
/// so it never overlaps the excitation noise drawn from the same seed.
pub fn draw_noise(seed: u64, channels: usize, frames: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Tensor::from_fn([1, channels, frames], |_| rng.sample::<f64, _>(StandardNormal))
}
