//! Multi-period (MPD) and multi-resolution spectrogram (MRSD) discriminators.
//!
//! An MPD sub-discriminator folds the waveform into a `[rows, period]` grid
//! and runs height-strided `(k, 1)` convolutions, so each column is a
//! decimated copy of the signal. An MRSD sub-discriminator runs 3x3
//! convolutions over a log-magnitude spectrogram computed inside the graph.
//! Every sub-discriminator returns its final score map plus the activation
//! after each convolution, for the feature-match loss.

use std::sync::Arc;

use hwg_autograd::{Bound, ParamId, ParamSet, StftPlan, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MpdConfig, MrsdConfig};
use crate::error::{Error, Result};
use crate::features::LOG_FLOOR;
use crate::generator::{add_conv, check_same_layout, ConvIds};

/// Score maps and per-layer activations, one entry per sub-discriminator.
pub struct DiscriminatorOutput<'g> {
    pub scores: Vec<Var<'g>>,
    pub features: Vec<Vec<Var<'g>>>,
}

impl<'g> DiscriminatorOutput<'g> {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn append(&mut self, other: DiscriminatorOutput<'g>) {
        self.scores.extend(other.scores);
        self.features.extend(other.features);
    }
}

/// Zero-pads `wave` to a multiple of `period` and folds it row-major into
/// `[ceil(T / period), period]`.
pub fn reshape_period(wave: &[f64], period: usize) -> Tensor {
    assert!(period >= 1, "period must be positive");
    let rows = wave.len().div_ceil(period);
    let mut data = wave.to_vec();
    data.resize(rows * period, 0.0);
    Tensor::new([rows, period], data)
}

struct Conv2dLayer {
    ids: ConvIds,
    stride: (usize, usize),
    padding: (usize, usize),
}

impl Conv2dLayer {
    fn apply<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(self.ids.weight(bound), self.ids.bias(bound), self.stride, self.padding)
    }

    fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        [self.ids.v, self.ids.g].into_iter().chain(self.ids.b)
    }
}

struct SubDiscriminator {
    hidden: Vec<Conv2dLayer>,
    post: Conv2dLayer,
}

impl SubDiscriminator {
    fn run<'g>(&self, bound: &Bound<'g>, mut x: Var<'g>, slope: f64, out: &mut DiscriminatorOutput<'g>) {
        let mut features = Vec::with_capacity(self.hidden.len() + 1);
        for layer in &self.hidden {
            x = layer.apply(bound, x).leaky_relu(slope);
            features.push(x);
        }
        let score = self.post.apply(bound, x);
        features.push(score);
        out.scores.push(score);
        out.features.push(features);
    }
}

pub struct Discriminators {
    mpd_config: MpdConfig,
    mrsd_config: MrsdConfig,
    params: ParamSet,
    mpd: Vec<SubDiscriminator>,
    mrsd: Vec<SubDiscriminator>,
    plans: Vec<Arc<StftPlan>>,
}

impl Discriminators {
    pub fn new(mpd: &MpdConfig, mrsd: &MrsdConfig, seed: u64) -> Result<Self> {
        mpd.validate()?;
        mrsd.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = mpd.kernel_size;
        let mpd_subs = mpd
            .periods
            .iter()
            .map(|p| {
                let mut c_in = 1;
                let hidden = mpd
                    .channels
                    .iter()
                    .zip(&mpd.strides)
                    .enumerate()
                    .map(|(i, (&c, &s))| {
                        let ids = add_conv(&mut params, &mut rng, &format!("mpd.p{p}.conv{i}"), &[c, c_in, k, 1], true);
                        c_in = c;
                        Conv2dLayer {
                            ids,
                            stride: (s, 1),
                            padding: (k / 2, 0),
                        }
                    })
                    .collect();
                let pk = mpd.post_kernel_size;
                let post = Conv2dLayer {
                    ids: add_conv(&mut params, &mut rng, &format!("mpd.p{p}.post"), &[1, c_in, pk, 1], true),
                    stride: (1, 1),
                    padding: (pk / 2, 0),
                };
                SubDiscriminator { hidden, post }
            })
            .collect();
        let mrsd_subs = (0..mrsd.resolutions.len())
            .map(|r| {
                let mut c_in = 1;
                let hidden = mrsd
                    .channels
                    .iter()
                    .zip(&mrsd.strides)
                    .enumerate()
                    .map(|(i, (&c, &s))| {
                        let ids = add_conv(&mut params, &mut rng, &format!("mrsd.r{r}.conv{i}"), &[c, c_in, 3, 3], true);
                        c_in = c;
                        Conv2dLayer {
                            ids,
                            stride: s,
                            padding: (1, 1),
                        }
                    })
                    .collect();
                let post = Conv2dLayer {
                    ids: add_conv(&mut params, &mut rng, &format!("mrsd.r{r}.post"), &[1, c_in, 3, 3], true),
                    stride: (1, 1),
                    padding: (1, 1),
                };
                SubDiscriminator { hidden, post }
            })
            .collect();
        Ok(Self {
            mpd_config: mpd.clone(),
            mrsd_config: mrsd.clone(),
            params,
            mpd: mpd_subs,
            mrsd: mrsd_subs,
            plans: mrsd.resolutions.iter().map(|r| Arc::new(r.plan())).collect(),
        })
    }

    pub fn from_params(mpd: &MpdConfig, mrsd: &MrsdConfig, params: ParamSet) -> Result<Self> {
        let mut d = Self::new(mpd, mrsd, 0)?;
        check_same_layout(&d.params, &params, "discriminators")?;
        d.params = params;
        Ok(d)
    }

    pub fn mpd_config(&self) -> &MpdConfig {
        &self.mpd_config
    }

    pub fn mrsd_config(&self) -> &MrsdConfig {
        &self.mrsd_config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Total number of sub-discriminators, MPD first.
    pub fn len(&self) -> usize {
        self.mpd.len() + self.mrsd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters owned by sub-discriminator `index` in output order.
    pub fn sub_discriminator_params(&self, index: usize) -> Vec<ParamId> {
        let sub = if index < self.mpd.len() {
            &self.mpd[index]
        } else {
            &self.mrsd[index - self.mpd.len()]
        };
        sub.hidden
            .iter()
            .chain(std::iter::once(&sub.post))
            .flat_map(|l| l.param_ids().collect::<Vec<_>>())
            .collect()
    }

    fn check_wave(wave: &Var<'_>) -> Result<(usize, usize)> {
        let shape = wave.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Shape(format!("discriminator input must be [batch, samples], got {shape:?}")));
        }
        if shape[1] == 0 {
            return Err(Error::InvalidInput("discriminator input is empty".into()));
        }
        Ok((shape[0], shape[1]))
    }

    /// Multi-period discriminator on a `[batch, samples]` waveform.
    pub fn mpd_forward<'g>(&self, bound: &Bound<'g>, wave: Var<'g>) -> Result<DiscriminatorOutput<'g>> {
        let (b, t) = Self::check_wave(&wave)?;
        let mut out = DiscriminatorOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        for (sub, &p) in self.mpd.iter().zip(&self.mpd_config.periods) {
            let rows = t.div_ceil(p);
            let x = wave.pad_end(rows * p - t).reshape([b, 1, rows, p]);
            sub.run(bound, x, self.mpd_config.slope, &mut out);
        }
        Ok(out)
    }

    /// Multi-resolution spectrogram discriminator on a `[batch, samples]`
    /// waveform. The log-magnitude spectrograms are part of the graph.
    pub fn mrsd_forward<'g>(&self, bound: &Bound<'g>, wave: Var<'g>) -> Result<DiscriminatorOutput<'g>> {
        let (b, t) = Self::check_wave(&wave)?;
        let needed = self
            .plans
            .iter()
            .zip(&self.mrsd_config.resolutions)
            .map(|(p, r)| p.min_len().max(r.window_length))
            .max()
            .unwrap_or(0);
        if t < needed {
            return Err(Error::InvalidInput(format!(
                "MRSD needs at least {needed} samples, got {t}"
            )));
        }
        let mut out = DiscriminatorOutput {
            scores: Vec::new(),
            features: Vec::new(),
        };
        for (sub, plan) in self.mrsd.iter().zip(&self.plans) {
            let spec = wave.stft(plan.clone()).complex_abs().log_floor(LOG_FLOOR);
            let (frames, bins) = (spec.dim(1), spec.dim(2));
            sub.run(bound, spec.reshape([b, 1, frames, bins]), self.mrsd_config.slope, &mut out);
        }
        Ok(out)
    }

    /// Both discriminators: the MPD entries followed by the MRSD ones.
    pub fn forward<'g>(&self, bound: &Bound<'g>, wave: Var<'g>) -> Result<DiscriminatorOutput<'g>> {
        let mut out = self.mpd_forward(bound, wave)?;
        out.append(self.mrsd_forward(bound, wave)?);
        Ok(out)
    }
}
