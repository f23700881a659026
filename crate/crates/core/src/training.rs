//! Alternating GAN training: segment sampling, the discriminator and
//! generator updates, checkpoints and the `fit` driver.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hwg_autograd::{Bound, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::{read_wav, AudioClip};
use crate::config::{Config, Preset};
use crate::container::Container;
use crate::discriminators::Discriminators;
use crate::error::{Error, Result};
use crate::features::{cache_clip_features, compute_stats, content_key, extract_features, FeatureBundle, FeatureStats};
use crate::generator::Generator;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, feature_match_loss, generator_total_loss, AuxBreakdown, AuxLoss,
};
use crate::optim::{clip_global_norm, AdamW};
use crate::pulse::extract_pulse;

pub const CHECKPOINT_KIND: &str = "hifi-wavegan-checkpoint";

/// One training utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub name: String,
    /// Content hash of the audio.
    pub key: String,
    pub features: FeatureBundle,
    pub audio: AudioClip,
}

/// Utterances plus the corpus normalization statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    stats: FeatureStats,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let mels: Vec<Tensor> = utterances.iter().map(|u| u.features.mel.clone()).collect();
        let stats = compute_stats(&mels)?;
        Ok(Self { utterances, stats })
    }

    /// Extracts features for each named clip.
    pub fn from_clips(clips: Vec<(String, AudioClip)>, cfg: &Config) -> Result<Self> {
        let utterances = clips
            .into_iter()
            .map(|(name, audio)| {
                let features = extract_features(&audio, &cfg.features)?;
                Ok(Utterance {
                    key: content_key(&audio),
                    name,
                    features,
                    audio,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(utterances)
    }

    /// Reads WAVs, taking features from `cache_dir` when given.
    pub fn from_paths(paths: &[PathBuf], cfg: &Config, cache_dir: Option<&Path>) -> Result<Self> {
        let mut utterances = Vec::with_capacity(paths.len());
        for path in paths {
            let audio = read_wav(path, cfg.features.sample_rate)?;
            let features = match cache_dir {
                Some(dir) => cache_clip_features(&audio, dir, &cfg.features)?.0,
                None => extract_features(&audio, &cfg.features)?,
            };
            utterances.push(Utterance {
                name: path.display().to_string(),
                key: content_key(&audio),
                features,
                audio,
            });
        }
        Self::new(utterances)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn keys(&self) -> Vec<String> {
        self.utterances.iter().map(|u| u.key.clone()).collect()
    }
}

/// Frame offset of a random segment. Every offset keeps the wave slice
/// inside the recorded audio; utterances no longer than the segment always
/// start at 0.
pub fn segment_offset(n_samples: usize, hop: usize, seg_frames: usize, rng: &mut impl Rng) -> usize {
    let seg = seg_frames * hop;
    let last = if n_samples > seg { (n_samples - seg) / hop } else { 0 };
    rng.gen_range(0..=last)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub offset: usize,
    pub features: FeatureBundle,
    /// Samples `[offset · hop, (offset + seg_frames) · hop)`, zero past the end.
    pub wave: Vec<f64>,
}

pub fn sample_segment(bundle: &FeatureBundle, clip: &AudioClip, seg_frames: usize, rng: &mut impl Rng) -> Segment {
    let hop = bundle.hop_length;
    let offset = segment_offset(clip.len(), hop, seg_frames, rng);
    Segment {
        offset,
        features: bundle.slice_frames(offset, seg_frames),
        wave: padded_slice(&clip.samples, offset * hop, seg_frames * hop),
    }
}

fn padded_slice(x: &[f64], start: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if start < x.len() {
        let n = len.min(x.len() - start);
        out[..n].copy_from_slice(&x[start..start + n]);
    }
    out
}

/// Per-utterance tensors sliced by the sampler, padded to at least one
/// segment.
struct Prepared {
    /// `[channels, frames]`.
    condition: Tensor,
    pulse: Vec<f64>,
    wave: Vec<f64>,
    n_samples: usize,
}

/// Generator inputs and targets for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, noise_channels, frames]`.
    pub noise: Tensor,
    /// `[batch, condition_channels, frames]`.
    pub condition: Tensor,
    /// `[batch, samples]`.
    pub pulse: Tensor,
    /// `[batch, samples]`.
    pub wave: Tensor,
    pub utterances: Vec<usize>,
    pub offsets: Vec<usize>,
}

/// Everything logged for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Steps completed, this one included.
    pub iteration: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub generator_loss: f64,
    pub aux_loss: f64,
    pub aux_stft: f64,
    pub aux_mel: f64,
    pub stft_sc: Vec<f64>,
    pub stft_log_mag: Vec<f64>,
    pub phase: Vec<f64>,
    pub mel_sc: Vec<f64>,
    pub mel_log_mag: Vec<f64>,
    /// Absent before adversarial training starts.
    pub adversarial_loss: Option<f64>,
    pub feature_match_loss: Option<f64>,
    pub discriminator_loss: Option<f64>,
    pub generator_grad_norm: f64,
    pub discriminator_grad_norm: Option<f64>,
    pub wall_seconds: f64,
}

impl StepMetrics {
    /// Every loss value in the record.
    pub fn losses(&self) -> Vec<f64> {
        let mut v = vec![self.generator_loss, self.aux_loss, self.aux_stft, self.aux_mel];
        for list in [&self.stft_sc, &self.stft_log_mag, &self.phase, &self.mel_sc, &self.mel_log_mag] {
            v.extend(list);
        }
        v.extend([self.adversarial_loss, self.feature_match_loss, self.discriminator_loss].into_iter().flatten());
        v
    }
}

struct GeneratorTerms<'g> {
    total: Var<'g>,
    aux: f64,
    aux_stft: f64,
    aux_mel: f64,
    breakdown: AuxBreakdown,
    adversarial: Option<f64>,
    feature_match: Option<f64>,
}

pub struct Trainer {
    config: Config,
    generator: Generator,
    discriminators: Discriminators,
    aux: AuxLoss,
    opt_g: AdamW,
    opt_d: AdamW,
    iteration: u64,
    epoch: u64,
    /// Utterance order of the current epoch.
    order: Vec<usize>,
    /// Batches already drawn in the current epoch.
    cursor: usize,
    rng: ChaCha8Rng,
    stats: FeatureStats,
    keys: Vec<String>,
    prepared: Vec<Prepared>,
    seg_frames: usize,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: Config, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = Generator::new(&config.generator, seed)?;
        let discriminators = Discriminators::new(&config.mpd, &config.mrsd, seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Self::assemble(config, data, generator, discriminators, None, rng, order)
    }

    #[allow(clippy::type_complexity)]
    fn assemble(
        config: Config,
        data: &Dataset,
        generator: Generator,
        discriminators: Discriminators,
        optimizers: Option<(AdamW, AdamW)>,
        rng: ChaCha8Rng,
        order: Vec<usize>,
    ) -> Result<Self> {
        let f = &config.features;
        let aux = AuxLoss::new(&config.loss, f.sample_rate, f.fmin, f.fmax)?;
        let hop = config.generator.hop_length();
        let seg_frames = config.train.segment_frames(f.sample_rate, hop)?;
        if seg_frames * hop < aux.min_len() {
            return Err(Error::Config(format!(
                "segments of {} samples are shorter than the {}-sample auxiliary loss window",
                seg_frames * hop,
                aux.min_len()
            )));
        }
        for u in data.utterances() {
            if u.features.mel.dim(1) != f.n_mels || u.features.hop_length != hop {
                return Err(Error::Shape(format!(
                    "{}: features have {} mels at hop {}, config expects {} at hop {hop}",
                    u.name,
                    u.features.mel.dim(1),
                    u.features.hop_length,
                    f.n_mels
                )));
            }
        }
        let stats = data.stats().clone();
        let prepared = data
            .utterances()
            .iter()
            .enumerate()
            .map(|(i, u)| prepare(u, &stats, &config, seg_frames, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let (opt_g, opt_d) = optimizers.unwrap_or_else(|| {
            (
                AdamW::new(&config.train, generator.params()),
                AdamW::new(&config.train, discriminators.params()),
            )
        });
        Ok(Self {
            generator,
            discriminators,
            aux,
            opt_g,
            opt_d,
            iteration: 0,
            epoch: 0,
            order,
            cursor: 0,
            rng,
            stats,
            keys: data.keys(),
            prepared,
            seg_frames,
            dump_dir: None,
            config,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminators(&self) -> &Discriminators {
        &self.discriminators
    }

    pub fn discriminators_mut(&mut self) -> &mut Discriminators {
        &mut self.discriminators
    }

    pub fn generator_optimizer(&self) -> &AdamW {
        &self.opt_g
    }

    pub fn discriminator_optimizer(&self) -> &AdamW {
        &self.opt_d
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn segment_frames(&self) -> usize {
        self.seg_frames
    }

    /// Allows the run to extend beyond the configured iteration count.
    pub fn set_max_iterations(&mut self, n: u64) {
        self.config.train.max_iterations = n;
    }

    /// Where a non-finite step writes its batch.
    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.config.train.batch_size).max(1)
    }

    /// Learning rate after `epoch` completed epochs.
    pub fn learning_rate_at(&self, epoch: u64) -> f64 {
        self.config.train.learning_rate * self.config.train.lr_decay.powf(epoch as f64)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate_at(self.epoch)
    }

    /// Draws the next batch: utterances in epoch order, a random segment
    /// of each and fresh Gaussian noise.
    pub fn next_batch(&mut self) -> Batch {
        let b = self.config.train.batch_size;
        let hop = self.config.generator.hop_length();
        let (frames, samples) = (self.seg_frames, self.seg_frames * hop);
        let cn = self.config.generator.noise_channels;
        let cc = self.config.generator.condition_channels;
        let mut noise = Vec::with_capacity(b * cn * frames);
        let mut condition = Vec::with_capacity(b * cc * frames);
        let mut pulse = Vec::with_capacity(b * samples);
        let mut wave = Vec::with_capacity(b * samples);
        let (mut utterances, mut offsets) = (Vec::new(), Vec::new());
        let n = self.order.len();
        for j in 0..b {
            let u = self.order[(self.cursor * b + j) % n];
            let p = &self.prepared[u];
            let f = segment_offset(p.n_samples, hop, frames, &mut self.rng);
            let width = p.condition.dim(1);
            for ch in 0..cc {
                let row = &p.condition.data()[ch * width..(ch + 1) * width];
                condition.extend_from_slice(&row[f..f + frames]);
            }
            pulse.extend_from_slice(&p.pulse[f * hop..(f + frames) * hop]);
            wave.extend_from_slice(&p.wave[f * hop..(f + frames) * hop]);
            for _ in 0..cn * frames {
                noise.push(self.rng.sample::<f64, _>(StandardNormal));
            }
            utterances.push(u);
            offsets.push(f);
        }
        Batch {
            noise: Tensor::new([b, cn, frames], noise),
            condition: Tensor::new([b, cc, frames], condition),
            pulse: Tensor::new([b, samples], pulse),
            wave: Tensor::new([b, samples], wave),
            utterances,
            offsets,
        }
    }

    fn adversarial_active(&self) -> bool {
        self.iteration >= self.config.train.adversarial_start
    }

    /// One discriminator update on `real` and a detached `fake`. Returns
    /// the loss and the gradient norm before clipping.
    pub fn discriminator_update(&mut self, fake: &Tensor, real: &Tensor, lr: f64) -> Result<(f64, f64)> {
        let graph = Graph::new();
        let bound = self.discriminators.params().bind(&graph, true);
        let d_real = self.discriminators.forward(&bound, graph.constant(real.clone()))?;
        let d_fake = self.discriminators.forward(&bound, graph.constant(fake.clone()))?;
        let loss = adversarial_d_loss(&d_real.scores, &d_fake.scores)?;
        let value = loss.item();
        let mut grads = bound.grads(&mut graph.backward(loss));
        let norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        self.check_finite("discriminator loss", value, None)?;
        self.check_finite("discriminator gradient", norm, None)?;
        self.opt_d.step(self.discriminators.params_mut(), &grads, lr);
        Ok((value, norm))
    }

    fn generator_terms<'g>(&self, fake: Var<'g>, batch: &Batch, adversarial: bool) -> Result<GeneratorTerms<'g>> {
        let graph = fake.graph();
        let real = graph.constant(batch.wave.clone());
        let aux = self.aux.compute(fake, real)?;
        let weights = self.config.loss.weights();
        let (total, adv, fm) = if adversarial {
            let bound = self.discriminators.params().bind(graph, false);
            let d_real = self.discriminators.forward(&bound, real)?;
            let d_fake = self.discriminators.forward(&bound, fake)?;
            let adv = adversarial_g_loss(&d_fake.scores)?;
            let fm = feature_match_loss(&d_real, &d_fake)?;
            (generator_total_loss(adv, aux.total, fm, &weights), Some(adv.item()), Some(fm.item()))
        } else {
            (aux.total.scale(weights.auxiliary), None, None)
        };
        Ok(GeneratorTerms {
            total,
            aux: aux.total.item(),
            aux_stft: aux.stft.item(),
            aux_mel: aux.mel.item(),
            breakdown: aux.breakdown,
            adversarial: adv,
            feature_match: fm,
        })
    }

    fn forward<'g>(&self, graph: &'g Graph, bound: &Bound<'g>, batch: &Batch) -> Var<'g> {
        self.generator.forward(
            bound,
            graph.constant(batch.noise.clone()),
            graph.constant(batch.condition.clone()),
            graph.constant(batch.pulse.clone()),
        )
    }

    /// Generator loss and its gradient for `batch` against the current
    /// discriminators, without updating anything.
    pub fn generator_gradients(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let graph = Graph::new();
        let bound = self.generator.params().bind(&graph, true);
        let fake = self.forward(&graph, &bound, batch);
        let terms = self.generator_terms(fake, batch, self.adversarial_active())?;
        let value = terms.total.item();
        Ok((value, bound.grads(&mut graph.backward(terms.total))))
    }

    /// One generator update against the current discriminators.
    pub fn generator_update(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let (value, mut grads) = self.generator_gradients(batch)?;
        let norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        self.check_finite("generator loss", value, Some(batch))?;
        self.check_finite("generator gradient", norm, Some(batch))?;
        self.opt_g.step(self.generator.params_mut(), &grads, lr);
        Ok(value)
    }

    /// Draws a batch and runs one training iteration.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        self.train_step(&batch)
    }

    /// A discriminator update on the detached generator output, then a
    /// generator update scored by the freshly updated discriminators.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let start = Instant::now();
        let lr = self.learning_rate();
        let adversarial = self.adversarial_active();
        let graph = Graph::new();
        let bound = self.generator.params().bind(&graph, true);
        let fake = self.forward(&graph, &bound, batch);
        if !fake.value().is_finite() {
            self.fail("generator output", batch)?;
        }
        let (d_loss, d_norm) = if adversarial {
            match self.discriminator_update(&fake.value(), &batch.wave, lr) {
                Ok((l, n)) => (Some(l), Some(n)),
                Err(e) => {
                    self.dump(batch);
                    return Err(e);
                }
            }
        } else {
            (None, None)
        };
        let terms = self.generator_terms(fake, batch, adversarial)?;
        let total = terms.total.item();
        let mut grads = bound.grads(&mut graph.backward(terms.total));
        let g_norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        self.check_finite("generator loss", total, Some(batch))?;
        self.check_finite("generator gradient", g_norm, Some(batch))?;
        self.opt_g.step(self.generator.params_mut(), &grads, lr);

        let epoch = self.epoch;
        self.iteration += 1;
        self.cursor += 1;
        if self.cursor >= self.iterations_per_epoch() {
            self.cursor = 0;
            self.epoch += 1;
            self.order.shuffle(&mut self.rng);
        }
        Ok(StepMetrics {
            iteration: self.iteration,
            epoch,
            learning_rate: lr,
            generator_loss: total,
            aux_loss: terms.aux,
            aux_stft: terms.aux_stft,
            aux_mel: terms.aux_mel,
            stft_sc: terms.breakdown.stft_sc,
            stft_log_mag: terms.breakdown.stft_log_mag,
            phase: terms.breakdown.phase,
            mel_sc: terms.breakdown.mel_sc,
            mel_log_mag: terms.breakdown.mel_log_mag,
            adversarial_loss: terms.adversarial,
            feature_match_loss: terms.feature_match,
            discriminator_loss: d_loss,
            generator_grad_norm: g_norm,
            discriminator_grad_norm: d_norm,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn check_finite(&self, what: &str, value: f64, batch: Option<&Batch>) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        match batch {
            Some(b) => self.fail(what, b),
            None => Err(self.non_finite(what)),
        }
    }

    fn non_finite(&self, what: &str) -> Error {
        Error::NonFinite {
            what: what.into(),
            iteration: self.iteration,
        }
    }

    fn fail(&self, what: &str, batch: &Batch) -> Result<()> {
        self.dump(batch);
        Err(self.non_finite(what))
    }

    /// Writes the offending batch for post-mortem inspection.
    fn dump(&self, batch: &Batch) {
        let Some(dir) = &self.dump_dir else { return };
        let mut c = Container::new(json!({
            "kind": "hifi-wavegan-batch",
            "iteration": self.iteration,
            "utterances": batch.utterances.iter().map(|&u| &self.keys[u]).collect::<Vec<_>>(),
            "offsets": batch.offsets,
        }));
        c.insert("noise", batch.noise.clone());
        c.insert("condition", batch.condition.clone());
        c.insert("pulse", batch.pulse.clone());
        c.insert("wave", batch.wave.clone());
        let path = dir.join(format!("nonfinite-{:08}.hwgc", self.iteration));
        match c.write(&path) {
            Ok(()) => log::error!("non-finite step; batch written to {}", path.display()),
            Err(e) => log::error!("non-finite step; could not write batch: {e}"),
        }
    }

    /// Serializes the full training state.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_toml_string(),
            "config_hash": self.config.hash(),
            "iteration": self.iteration,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "order": self.order,
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "opt_g_steps": self.opt_g.steps(),
            "opt_d_steps": self.opt_d.steps(),
            "dataset": self.keys,
        }));
        insert_params(&mut c, "generator", self.generator.params());
        insert_params(&mut c, "discriminator", self.discriminators.params());
        insert_moments(&mut c, "opt_g", self.generator.params(), &self.opt_g);
        insert_moments(&mut c, "opt_d", self.discriminators.params(), &self.opt_d);
        let (mean, std) = self.stats.to_tensors();
        c.insert("stats/mean", mean);
        c.insert("stats/std", std);
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Restores a trainer from a checkpoint. `data` must be the dataset the
    /// checkpoint was trained on.
    pub fn resume(path: &Path, data: &Dataset) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c, data).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_container(c: &Container, data: &Dataset) -> Result<Self> {
        let config = checkpoint_config(c)?;
        let meta = &c.meta;
        let keys: Vec<String> = meta_field(meta, "dataset")?;
        if keys != data.keys() {
            return Err(Error::InvalidInput(
                "checkpoint was trained on a different dataset (utterance keys differ)".into(),
            ));
        }
        let mut generator = Generator::new(&config.generator, 0)?;
        restore_params(c, "generator", generator.params_mut())?;
        let mut discriminators = Discriminators::new(&config.mpd, &config.mrsd, 0)?;
        restore_params(c, "discriminator", discriminators.params_mut())?;
        let opt_g = restore_moments(c, "opt_g", &config, generator.params(), meta_field(meta, "opt_g_steps")?)?;
        let opt_d = restore_moments(c, "opt_d", &config, discriminators.params(), meta_field(meta, "opt_d_steps")?)?;

        let rng_meta = meta.get("rng").ok_or_else(|| corrupt("missing rng state"))?;
        let seed_hex: String = meta_field(rng_meta, "seed")?;
        let seed: [u8; 32] = hex::decode(&seed_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("bad rng seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta_field(rng_meta, "stream")?);
        let word_pos: String = meta_field(rng_meta, "word_pos")?;
        rng.set_word_pos(word_pos.parse().map_err(|_| corrupt("bad rng position"))?);

        let order: Vec<usize> = meta_field(meta, "order")?;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..data.len()).collect::<Vec<_>>() {
            return Err(corrupt("epoch order is not a permutation of the dataset"));
        }
        let mut t = Self::assemble(config, data, generator, discriminators, Some((opt_g, opt_d)), rng, order)?;
        t.iteration = meta_field(meta, "iteration")?;
        t.epoch = meta_field(meta, "epoch")?;
        t.cursor = meta_field(meta, "cursor")?;
        t.stats = checkpoint_stats(c)?;
        Ok(t)
    }
}

fn prepare(u: &Utterance, stats: &FeatureStats, cfg: &Config, seg_frames: usize, index: u64) -> Result<Prepared> {
    let frames = u.features.frames().max(seg_frames);
    let bundle = u.features.slice_frames(0, frames);
    let hop = bundle.hop_length;
    let mel = stats.normalize(&bundle.mel)?;
    let pulse = extract_pulse(
        &mel,
        &bundle.pitch(),
        bundle.sample_rate,
        hop,
        cfg.pulse.noise_std,
        cfg.train.seed.wrapping_add(index),
    )?;
    Ok(Prepared {
        condition: bundle.condition(stats)?,
        pulse: pulse.values,
        wave: padded_slice(&u.audio.samples, 0, frames * hop),
        n_samples: u.audio.len(),
    })
}

fn corrupt(reason: &str) -> Error {
    Error::Corrupt {
        path: PathBuf::new(),
        reason: reason.into(),
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| corrupt(&format!("missing field {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| corrupt(&format!("field {key}: {e}")))
}

fn insert_params(c: &mut Container, prefix: &str, params: &ParamSet) {
    for (name, t) in params.iter() {
        c.insert(format!("{prefix}/{name}"), t.clone());
    }
}

fn insert_moments(c: &mut Container, prefix: &str, params: &ParamSet, opt: &AdamW) {
    for ((name, _), (m, v)) in params.iter().zip(opt.first_moments().iter().zip(opt.second_moments())) {
        c.insert(format!("{prefix}/m/{name}"), m.clone());
        c.insert(format!("{prefix}/v/{name}"), v.clone());
    }
}

fn fetch(c: &Container, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = c.get(name).ok_or_else(|| corrupt(&format!("missing array {name}")))?;
    if t.shape() != like.shape() {
        return Err(Error::Shape(format!(
            "checkpoint array {name} has shape {:?}, model expects {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

/// Overwrites every parameter with the checkpoint array of the same name.
pub fn restore_params(c: &Container, prefix: &str, params: &mut ParamSet) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = fetch(c, &format!("{prefix}/{}", params.name(id)), params.get(id))?;
        *params.get_mut(id) = t;
    }
    Ok(())
}

fn restore_moments(c: &Container, prefix: &str, cfg: &Config, params: &ParamSet, steps: u64) -> Result<AdamW> {
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        m.push(fetch(c, &format!("{prefix}/m/{name}"), t)?);
        v.push(fetch(c, &format!("{prefix}/v/{name}"), t)?);
    }
    AdamW::from_state(&cfg.train, params, steps, m, v)
}

/// The configuration embedded in a checkpoint.
pub fn checkpoint_config(c: &Container) -> Result<Config> {
    let kind: String = meta_field(&c.meta, "kind")?;
    if kind != CHECKPOINT_KIND {
        return Err(corrupt(&format!("not a checkpoint (kind {kind:?})")));
    }
    let text: String = meta_field(&c.meta, "config")?;
    let config = Config::from_toml_str(&text, Preset::Desk)?;
    let hash: String = meta_field(&c.meta, "config_hash")?;
    if hash != config.hash() {
        return Err(corrupt("embedded config does not match its hash"));
    }
    Ok(config)
}

pub fn checkpoint_stats(c: &Container) -> Result<FeatureStats> {
    let mean = c.get("stats/mean").ok_or_else(|| corrupt("missing stats/mean"))?;
    let std = c.get("stats/std").ok_or_else(|| corrupt("missing stats/std"))?;
    FeatureStats::from_tensors(mean, std)
}

/// Hash of everything that must match for a run to resume; the iteration
/// budget may change between sessions.
fn resume_hash(cfg: &Config) -> String {
    let mut c = cfg.clone();
    c.train.max_iterations = 0;
    c.hash()
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub iterations: u64,
    pub last: Option<StepMetrics>,
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn latest_checkpoint(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("latest.hwgc")
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}

/// Trains until `cfg.train.max_iterations`, writing numbered checkpoints
/// plus `latest.hwgc` under `run_dir/checkpoints` and one JSON record per
/// step to `run_dir/metrics.jsonl`. With `resume` the run continues from
/// that checkpoint and metrics past it are discarded.
pub fn fit(
    data: &Dataset,
    cfg: &Config,
    run_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<FitOutcome> {
    let ckpt_dir = checkpoint_dir(run_dir);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::resume(path, data)?;
            if resume_hash(t.config()) != resume_hash(cfg) {
                return Err(Error::Config(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            log::info!("resuming from {} at iteration {}", path.display(), t.iteration());
            t
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    trainer.set_max_iterations(cfg.train.max_iterations);
    trainer.set_dump_dir(Some(run_dir.to_path_buf()));
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;

    let metrics = metrics_path(run_dir);
    truncate_metrics(&metrics, trainer.iteration())?;
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;

    let save = |t: &Trainer| -> Result<PathBuf> {
        let path = ckpt_dir.join(format!("ckpt-{:08}.hwgc", t.iteration()));
        let c = t.to_container();
        c.write(&path)?;
        c.write(&latest_checkpoint(run_dir))?;
        Ok(path)
    };

    let max = cfg.train.max_iterations;
    let mut last = None;
    let mut final_checkpoint = None;
    while trainer.iteration() < max {
        let m = trainer.step()?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&metrics, e))?;
        if m.iteration % 50 == 0 || m.iteration == 1 {
            log::info!(
                "iter {} epoch {} aux {:.4} G {:.4} D {} ({:.2}s/it)",
                m.iteration,
                m.epoch,
                m.aux_loss,
                m.generator_loss,
                m.discriminator_loss.map_or("-".into(), |d| format!("{d:.4}")),
                m.wall_seconds
            );
        }
        on_step(&m);
        if trainer.iteration() % cfg.train.checkpoint_interval == 0 || trainer.iteration() == max {
            final_checkpoint = Some(save(&trainer)?);
        }
        last = Some(m);
    }
    log_file.flush().map_err(|e| Error::io(&metrics, e))?;
    let final_checkpoint = match final_checkpoint {
        Some(p) => p,
        None => save(&trainer)?,
    };
    Ok(FitOutcome {
        final_checkpoint,
        iterations: trainer.iteration(),
        last,
    })
}

/// Drops metric records past `iteration` so a resumed run does not log
/// the same step twice.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = serde_json::from_str::<StepMetrics>(&line).is_ok_and(|m| m.iteration <= iteration);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics file written by [`fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
