//! Extended-WaveNet generator.
//!
//! Frame-rate conditioning and noise are each lifted to the sample rate by
//! their own upsampling network (a 1x1 projection, then per factor: nearest
//! upsampling, a `2f + 1` convolution and leaky ReLU). The upsampled noise
//! drives a non-causal gated WaveNet whose every layer also sees the local
//! conditioning: the upsampled condition, plus the excitation pulse when
//! enabled. Skip outputs are summed and a small post-net maps them to one
//! channel through `tanh`.
//!
//! Every convolution is weight-normalized: its weight is `g · v / ‖v‖` with a
//! norm per output channel, and both `v` and `g` are parameters.

use hwg_autograd::kernels::conv::{conv1d_backward, conv1d_forward_into, Conv1dGeom};
use hwg_autograd::kernels::gemm::{gemm, MatRef};
use hwg_autograd::ops::elementwise::{leaky_relu, sigmoid};
use hwg_autograd::ops::nn::{conv1d, upsample_nearest, weight_norm};
use hwg_autograd::{concat, Bound, Graph, Op, ParamId, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};

const UPSAMPLE_SLOPE: f64 = 0.2;

/// Parameters of one weight-normalized convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIds {
    pub v: ParamId,
    pub g: ParamId,
    pub b: Option<ParamId>,
}

impl ConvIds {
    pub fn weight<'g>(&self, bound: &Bound<'g>) -> Var<'g> {
        bound.get(self.v).weight_norm(bound.get(self.g))
    }

    pub fn bias<'g>(&self, bound: &Bound<'g>) -> Option<Var<'g>> {
        self.b.map(|b| bound.get(b))
    }

    pub fn weight_value(&self, params: &ParamSet) -> Tensor {
        weight_norm(params.get(self.v), params.get(self.g))
    }

    pub fn bias_value<'a>(&self, params: &'a ParamSet) -> Option<&'a Tensor> {
        self.b.map(|b| params.get(b))
    }
}

/// Registers a convolution with uniform `±1/√fan_in` initialization and the
/// gain set so that the initial weight equals `v`.
pub(crate) fn add_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    bias: bool,
) -> ConvIds {
    let c_out = shape[0];
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    let v = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
    let g = Tensor::from_fn([c_out], |o| {
        v.data()[o * fan_in..(o + 1) * fan_in].iter().map(|x| x * x).sum::<f64>().sqrt()
    });
    let b = bias.then(|| Tensor::from_fn([c_out], |_| rng.gen_range(-bound..bound)));
    ConvIds {
        v: params.add(format!("{name}.v"), v),
        g: params.add(format!("{name}.g"), g),
        b: b.map(|b| params.add(format!("{name}.b"), b)),
    }
}

#[derive(Clone, Debug)]
struct Upsampler {
    input: ConvIds,
    stages: Vec<(usize, ConvIds)>,
}

#[derive(Clone, Debug)]
struct Layer {
    kernel: usize,
    dilation: usize,
    dilated: ConvIds,
    local: ConvIds,
    out: ConvIds,
}

#[derive(Clone, Debug)]
struct Layout {
    cond_up: Upsampler,
    noise_up: Upsampler,
    input: ConvIds,
    layers: Vec<Layer>,
    post1: ConvIds,
    post2: ConvIds,
}

fn build(cfg: &GeneratorConfig, seed: u64) -> (ParamSet, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let cu = cfg.upsample_channels;
    let upsampler = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize| Upsampler {
        input: add_conv(p, rng, &format!("{name}.in"), &[cu, c_in, 1], true),
        stages: cfg
            .upsample_factors
            .iter()
            .enumerate()
            .map(|(i, &f)| (f, add_conv(p, rng, &format!("{name}.stage{i}"), &[cu, cu, 2 * f + 1], true)))
            .collect(),
    };
    let cond_up = upsampler(&mut p, &mut rng, "cond_up", cfg.condition_channels);
    let noise_up = upsampler(&mut p, &mut rng, "noise_up", cfg.noise_channels);
    let (r, g, s) = (cfg.residual_channels, cfg.gate_channels, cfg.skip_channels);
    let input = add_conv(&mut p, &mut rng, "body.in", &[r, cu, 1], true);
    let layers = cfg
        .layer_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (kernel, dilation))| Layer {
            kernel,
            dilation,
            dilated: add_conv(&mut p, &mut rng, &format!("body.layer{i}.dilated"), &[g, r, kernel], true),
            local: add_conv(&mut p, &mut rng, &format!("body.layer{i}.local"), &[g, cfg.local_channels(), 1], false),
            out: add_conv(&mut p, &mut rng, &format!("body.layer{i}.out"), &[r + s, g / 2, 1], true),
        })
        .collect();
    let post1 = add_conv(&mut p, &mut rng, "post.0", &[s, s, 1], true);
    let post2 = add_conv(&mut p, &mut rng, "post.1", &[1, s, 1], true);
    (
        p,
        Layout {
            cond_up,
            noise_up,
            input,
            layers,
            post1,
            post2,
        },
    )
}

pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    layout: Layout,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(config, seed);
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Adopts existing parameters, which must match the config's names and
    /// shapes exactly.
    pub fn from_params(config: &GeneratorConfig, params: ParamSet) -> Result<Self> {
        let mut g = Self::new(config, 0)?;
        check_same_layout(&g.params, &params, "generator")?;
        g.params = params;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of learnable scalars, including weight-norm gains.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Differentiable forward pass. `noise` is `[batch, noise_channels,
    /// frames]`, `condition` is `[batch, condition_channels, frames]` and
    /// `pulse` is `[batch, frames · hop]`; returns `[batch, frames · hop]`.
    pub fn forward<'g>(&self, bound: &Bound<'g>, noise: Var<'g>, condition: Var<'g>, pulse: Var<'g>) -> Var<'g> {
        let cfg = &self.config;
        let l = &self.layout;
        let (b, t) = (pulse.dim(0), pulse.dim(1));
        let up = |u: &Upsampler, x: Var<'g>| {
            let mut h = x.conv1d(u.input.weight(bound), u.input.bias(bound), 1, 0);
            for (f, c) in &u.stages {
                h = h
                    .upsample_nearest(*f)
                    .conv1d(c.weight(bound), c.bias(bound), 1, *f)
                    .leaky_relu(UPSAMPLE_SLOPE);
            }
            h
        };
        let cond = up(&l.cond_up, condition);
        let local = if cfg.use_pulse {
            concat(&[cond, pulse.reshape([b, 1, t])], 1)
        } else {
            cond
        };
        self.body_forward(bound, up(&l.noise_up, noise), local)
    }

    /// Differentiable WaveNet body and post-net: `x` is the upsampled noise
    /// `[batch, upsample_channels, T]`, `local` the per-layer conditioning
    /// `[batch, local_channels, T]`. Returns `[batch, T]`.
    pub fn body_forward<'g>(&self, bound: &Bound<'g>, x: Var<'g>, local: Var<'g>) -> Var<'g> {
        let graph = x.graph();
        let cfg = &self.config;
        let l = &self.layout;
        let (b, t) = (x.dim(0), x.dim(2));
        let x = x.conv1d(l.input.weight(bound), l.input.bias(bound), 1, 0);
        let skip0 = graph.constant(Tensor::zeros([b, cfg.skip_channels, t]));
        let mut state = concat(&[x, skip0], 1);
        for layer in &l.layers {
            let op = ResidualLayer {
                residual: cfg.residual_channels,
                kernel: layer.kernel,
                dilation: layer.dilation,
                gates: None,
            };
            let inputs = [
                state,
                local,
                layer.dilated.weight(bound),
                layer.dilated.bias(bound).expect("dilated conv has a bias"),
                layer.local.weight(bound),
                layer.out.weight(bound),
                layer.out.bias(bound).expect("output conv has a bias"),
            ];
            state = graph.apply(op, &inputs);
        }
        let skip = state
            .narrow(1, cfg.residual_channels, cfg.skip_channels)
            .scale((1.0 / l.layers.len() as f64).sqrt());
        skip.relu()
            .conv1d(l.post1.weight(bound), l.post1.bias(bound), 1, 0)
            .relu()
            .conv1d(l.post2.weight(bound), l.post2.bias(bound), 1, 0)
            .tanh()
            .reshape([b, t])
    }

    fn check_inputs(&self, noise: &Tensor, condition: &Tensor, pulse: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let hop = cfg.hop_length();
        let ok = noise.ndim() == 3
            && condition.ndim() == 3
            && pulse.ndim() == 2
            && noise.dim(1) == cfg.noise_channels
            && condition.dim(1) == cfg.condition_channels
            && noise.dim(0) == condition.dim(0)
            && pulse.dim(0) == condition.dim(0)
            && noise.dim(2) == condition.dim(2)
            && pulse.dim(1) == condition.dim(2) * hop
            && condition.dim(2) > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "generator expects noise [B, {}, F], condition [B, {}, F] and pulse [B, F*{hop}]; got {:?}, {:?}, {:?}",
                cfg.noise_channels,
                cfg.condition_channels,
                noise.shape(),
                condition.shape(),
                pulse.shape()
            )))
        }
    }

    /// Graph-free inference with the same arithmetic as [`forward`](Self::forward).
    pub fn generate(&self, noise: &Tensor, condition: &Tensor, pulse: &Tensor) -> Result<Tensor> {
        self.check_inputs(noise, condition, pulse)?;
        let cond = self.upsample_condition(condition)?;
        let x = self.upsample_noise(noise)?;
        let (b, t) = (pulse.dim(0), pulse.dim(1));
        let local = if self.config.use_pulse {
            Tensor::concat(&[&cond, &pulse.clone().reshape([b, 1, t])], 1)
        } else {
            cond
        };
        self.body(&x, &local)
    }

    fn run_upsampler(&self, u: &Upsampler, x: &Tensor, channels: usize, what: &str) -> Result<Tensor> {
        if x.ndim() != 3 || x.dim(1) != channels || x.dim(2) == 0 {
            return Err(Error::Shape(format!(
                "{what} must be [batch, {channels}, frames], got {:?}",
                x.shape()
            )));
        }
        let p = &self.params;
        let mut h = conv1d(x, &u.input.weight_value(p), u.input.bias_value(p), 1, 0);
        for (f, c) in &u.stages {
            h = conv1d(&upsample_nearest(&h, *f), &c.weight_value(p), c.bias_value(p), 1, *f)
                .map(|v| leaky_relu(v, UPSAMPLE_SLOPE));
        }
        Ok(h)
    }

    /// `[batch, condition_channels, frames]` → `[batch, upsample_channels, frames · hop]`.
    pub fn upsample_condition(&self, condition: &Tensor) -> Result<Tensor> {
        self.run_upsampler(&self.layout.cond_up, condition, self.config.condition_channels, "condition")
    }

    /// `[batch, noise_channels, frames]` → `[batch, upsample_channels, frames · hop]`.
    pub fn upsample_noise(&self, noise: &Tensor) -> Result<Tensor> {
        self.run_upsampler(&self.layout.noise_up, noise, self.config.noise_channels, "noise")
    }

    /// The WaveNet body and post-net on sample-rate inputs: `x` is the
    /// upsampled noise and `local` the per-layer conditioning.
    pub fn body(&self, x: &Tensor, local: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if x.ndim() != 3
            || local.ndim() != 3
            || x.dim(1) != cfg.upsample_channels
            || local.dim(1) != cfg.local_channels()
            || x.dim(0) != local.dim(0)
            || x.dim(2) != local.dim(2)
        {
            return Err(Error::Shape(format!(
                "body expects x [B, {}, T] and local [B, {}, T]; got {:?}, {:?}",
                cfg.upsample_channels,
                cfg.local_channels(),
                x.shape(),
                local.shape()
            )));
        }
        let p = &self.params;
        let l = &self.layout;
        let (b, t) = (x.dim(0), x.dim(2));
        let h = conv1d(x, &l.input.weight_value(p), l.input.bias_value(p), 1, 0);
        let mut state = Tensor::concat(&[&h, &Tensor::zeros([b, cfg.skip_channels, t])], 1);
        for layer in &l.layers {
            let mut op = ResidualLayer {
                residual: cfg.residual_channels,
                kernel: layer.kernel,
                dilation: layer.dilation,
                gates: None,
            };
            let w_dil = layer.dilated.weight_value(p);
            let w_local = layer.local.weight_value(p);
            let w_out = layer.out.weight_value(p);
            state = op.forward(&[
                &state,
                local,
                &w_dil,
                layer.dilated.bias_value(p).unwrap(),
                &w_local,
                &w_out,
                layer.out.bias_value(p).unwrap(),
            ]);
        }
        let scale = (1.0 / l.layers.len() as f64).sqrt();
        let skip = state
            .narrow(1, cfg.residual_channels, cfg.skip_channels)
            .map(|v| (v * scale).max(0.0));
        let h = conv1d(&skip, &l.post1.weight_value(p), l.post1.bias_value(p), 1, 0).map(|v| v.max(0.0));
        let out = conv1d(&h, &l.post2.weight_value(p), l.post2.bias_value(p), 1, 0).map(f64::tanh);
        Ok(out.reshape([b, t]))
    }
}

pub(crate) fn check_same_layout(expected: &ParamSet, got: &ParamSet, what: &str) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Shape(format!(
            "{what}: expected {} parameter arrays, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((n1, t1), (n2, t2)) in expected.iter().zip(got.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(Error::Shape(format!(
                "{what}: expected parameter {n1} {:?}, found {n2} {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
    }
    Ok(())
}

/// Span of body-input samples that influence one output sample.
pub fn body_receptive_field(cfg: &GeneratorConfig) -> usize {
    1 + cfg.layer_specs().iter().map(|&(k, d)| (k - 1) * d).sum::<usize>()
}

/// Receptive field in output samples including the upsampling networks:
/// each stage's `2f + 1` kernel spans `2f` elements at its own rate, i.e.
/// `2f · hop / (f_1 ⋯ f_i)` samples.
pub fn receptive_field(cfg: &GeneratorConfig) -> usize {
    let hop = cfg.hop_length();
    let mut rate = 1;
    let mut up = 0;
    for &f in &cfg.upsample_factors {
        rate *= f;
        up += 2 * f * hop / rate;
    }
    body_receptive_field(cfg) + up
}

/// One gated residual layer, fused:
///
/// ```text
/// pre   = dilated_conv(x) + b + W_local · local
/// z     = tanh(pre[..G/2]) ⊙ σ(pre[G/2..])
/// o     = W_out · z + b_out
/// x'    = (o[..R] + x) · √½
/// skip' = skip + o[R..]
/// ```
///
/// The state tensor carries `[x; skip]` along the channel axis.
/// Inputs: state, local, dilated weight, dilated bias, local weight, output
/// weight, output bias.
struct ResidualLayer {
    residual: usize,
    kernel: usize,
    dilation: usize,
    /// `[tanh(pre[..G/2]); σ(pre[G/2..])]` from the last forward pass.
    gates: Option<Tensor>,
}

impl ResidualLayer {
    fn geom(&self, gate: usize, len: usize) -> Conv1dGeom {
        Conv1dGeom {
            batch: 1,
            c_in: self.residual,
            c_out: gate,
            len_in: len,
            kernel: self.kernel,
            dilation: self.dilation,
            padding: self.dilation * (self.kernel - 1) / 2,
        }
    }
}

impl Op for ResidualLayer {
    fn name(&self) -> &'static str {
        "residual_layer"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let [state, local, w_dil, b_dil, w_local, w_out, b_out] = inputs else {
            panic!("residual_layer takes 7 inputs");
        };
        let (b, width, t) = (state.dim(0), state.dim(1), state.dim(2));
        let r = self.residual;
        let gate = w_dil.dim(0);
        let half = gate / 2;
        let cl = local.dim(1);
        assert_eq!(w_dil.shape(), &[gate, r, self.kernel]);
        assert_eq!(w_local.shape(), &[gate, cl, 1]);
        assert_eq!(w_out.shape(), &[width, half, 1]);
        assert_eq!((local.dim(0), local.dim(2)), (b, t));
        let geom = self.geom(gate, t);
        let mut pre = vec![0.0; b * gate * t];
        let mut out = vec![0.0; b * width * t];
        let mut z = vec![0.0; half * t];
        let rt2 = std::f64::consts::FRAC_1_SQRT_2;
        for bi in 0..b {
            let sb = &state.data()[bi * width * t..(bi + 1) * width * t];
            let lb = &local.data()[bi * cl * t..(bi + 1) * cl * t];
            let pb = &mut pre[bi * gate * t..(bi + 1) * gate * t];
            conv1d_forward_into(&sb[..r * t], w_dil.data(), &geom, pb, 0.0);
            gemm(
                1.0,
                MatRef::row_major(w_local.data(), gate, cl, cl),
                MatRef::row_major(lb, cl, t, t),
                1.0,
                pb,
                t,
            );
            for (c, &bias) in b_dil.data().iter().enumerate() {
                pb[c * t..(c + 1) * t].iter_mut().for_each(|v| *v += bias);
            }
            let (th, sg) = pb.split_at_mut(half * t);
            for ((zv, tv), sv) in z.iter_mut().zip(th).zip(sg) {
                *tv = tv.tanh();
                *sv = sigmoid(*sv);
                *zv = *tv * *sv;
            }
            let ob = &mut out[bi * width * t..(bi + 1) * width * t];
            gemm(
                1.0,
                MatRef::row_major(w_out.data(), width, half, half),
                MatRef::row_major(&z, half, t, t),
                0.0,
                ob,
                t,
            );
            for (c, &bias) in b_out.data().iter().enumerate() {
                let row = &mut ob[c * t..(c + 1) * t];
                let prev = &sb[c * t..(c + 1) * t];
                if c < r {
                    for (o, &x) in row.iter_mut().zip(prev) {
                        *o = (*o + bias + x) * rt2;
                    }
                } else {
                    for (o, &s) in row.iter_mut().zip(prev) {
                        *o += bias + s;
                    }
                }
            }
        }
        self.gates = Some(Tensor::new([b, gate, t], pre));
        Tensor::new(state.shape(), out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let [state, local, w_dil, _, w_local, w_out, _] = inputs else {
            unreachable!()
        };
        let gates = self.gates.as_ref().expect("forward not run");
        let (b, width, t) = (state.dim(0), state.dim(1), state.dim(2));
        let r = self.residual;
        let gate = w_dil.dim(0);
        let half = gate / 2;
        let cl = local.dim(1);
        let geom = self.geom(gate, t);
        let rt2 = std::f64::consts::FRAC_1_SQRT_2;

        let mut d_state = vec![0.0; state.numel()];
        let mut d_local = needs[1].then(|| vec![0.0; local.numel()]);
        let mut d_wdil = vec![0.0; w_dil.numel()];
        let mut d_bdil = vec![0.0; gate];
        let mut d_wlocal = vec![0.0; w_local.numel()];
        let mut d_wout = vec![0.0; w_out.numel()];
        let mut d_bout = vec![0.0; width];

        let mut d_o = vec![0.0; width * t];
        let mut z = vec![0.0; half * t];
        let mut d_z = vec![0.0; half * t];
        let mut d_pre = vec![0.0; gate * t];
        for bi in 0..b {
            let gb = &grad.data()[bi * width * t..(bi + 1) * width * t];
            let sb = &state.data()[bi * width * t..(bi + 1) * width * t];
            let lb = &local.data()[bi * cl * t..(bi + 1) * cl * t];
            let (th, sg) = gates.data()[bi * gate * t..(bi + 1) * gate * t].split_at(half * t);
            let dsb = &mut d_state[bi * width * t..(bi + 1) * width * t];
            for i in 0..width * t {
                let g = if i < r * t { gb[i] * rt2 } else { gb[i] };
                d_o[i] = g;
                dsb[i] = g;
            }
            for (c, acc) in d_bout.iter_mut().enumerate() {
                *acc += d_o[c * t..(c + 1) * t].iter().sum::<f64>();
            }
            for ((zv, tv), sv) in z.iter_mut().zip(th).zip(sg) {
                *zv = tv * sv;
            }
            // dW_out += dO · zᵀ
            gemm(
                1.0,
                MatRef::row_major(&d_o, width, t, t),
                MatRef::transposed(&z, t, half, t),
                1.0,
                &mut d_wout,
                half,
            );
            // dz = W_outᵀ · dO
            gemm(
                1.0,
                MatRef::transposed(w_out.data(), half, width, half),
                MatRef::row_major(&d_o, width, t, t),
                0.0,
                &mut d_z,
                t,
            );
            for i in 0..half * t {
                let (tv, sv) = (th[i], sg[i]);
                d_pre[i] = d_z[i] * sv * (1.0 - tv * tv);
                d_pre[half * t + i] = d_z[i] * tv * sv * (1.0 - sv);
            }
            for (c, acc) in d_bdil.iter_mut().enumerate() {
                *acc += d_pre[c * t..(c + 1) * t].iter().sum::<f64>();
            }
            // dW_local += dPre · localᵀ
            gemm(
                1.0,
                MatRef::row_major(&d_pre, gate, t, t),
                MatRef::transposed(lb, t, cl, t),
                1.0,
                &mut d_wlocal,
                cl,
            );
            if let Some(dl) = d_local.as_mut() {
                gemm(
                    1.0,
                    MatRef::transposed(w_local.data(), cl, gate, cl),
                    MatRef::row_major(&d_pre, gate, t, t),
                    0.0,
                    &mut dl[bi * cl * t..(bi + 1) * cl * t],
                    t,
                );
            }
            conv1d_backward(
                &sb[..r * t],
                w_dil.data(),
                &d_pre,
                &geom,
                Some(&mut d_wdil),
                Some(&mut dsb[..r * t]),
            );
        }
        vec![
            needs[0].then(|| Tensor::new(state.shape(), d_state)),
            d_local.map(|d| Tensor::new(local.shape(), d)),
            needs[2].then(|| Tensor::new(w_dil.shape(), d_wdil)),
            needs[3].then(|| Tensor::new([gate], d_bdil)),
            needs[4].then(|| Tensor::new(w_local.shape(), d_wlocal)),
            needs[5].then(|| Tensor::new(w_out.shape(), d_wout)),
            needs[6].then(|| Tensor::new([width], d_bout)),
        ]
    }
}

/// The same layer built from primitive graph ops, for checking the fused op.
#[doc(hidden)]
pub fn residual_layer_reference<'g>(
    state: Var<'g>,
    local: Var<'g>,
    params: [Var<'g>; 5],
    residual: usize,
    dilation: usize,
) -> Var<'g> {
    let [w_dil, b_dil, w_local, w_out, b_out] = params;
    let width = state.dim(1);
    let kernel = w_dil.dim(2);
    let x = state.narrow(1, 0, residual);
    let skip = state.narrow(1, residual, width - residual);
    let pre = x
        .conv1d(w_dil, Some(b_dil), dilation, dilation * (kernel - 1) / 2)
        .add(local.conv1d(w_local, None, 1, 0));
    let o = pre.gated_tanh().conv1d(w_out, Some(b_out), 1, 0);
    let x_next = o.narrow(1, 0, residual).add(x).scale(std::f64::consts::FRAC_1_SQRT_2);
    let skip_next = skip.add(o.narrow(1, residual, width - residual));
    concat(&[x_next, skip_next], 1)
}

/// Runs the fused layer inside `graph`, for tests.
#[doc(hidden)]
pub fn residual_layer<'g>(
    graph: &'g Graph,
    state: Var<'g>,
    local: Var<'g>,
    params: [Var<'g>; 5],
    residual: usize,
    dilation: usize,
) -> Var<'g> {
    let [w_dil, b_dil, w_local, w_out, b_out] = params;
    let op = ResidualLayer {
        residual,
        kernel: w_dil.dim(2),
        dilation,
        gates: None,
    };
    graph.apply(op, &[state, local, w_dil, b_dil, w_local, w_out, b_out])
}
