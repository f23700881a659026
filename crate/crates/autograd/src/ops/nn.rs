//! Neural-network layers: convolutions, nearest upsampling, gated
//! activations, weight normalization and matrix products.

use crate::kernels::conv::{
    channel_sums, conv1d_backward, conv1d_forward, conv2d_backward, conv2d_forward, Conv1dGeom,
    Conv2dGeom,
};
use crate::kernels::gemm::{gemm, MatRef};
use crate::{Op, Tensor, Var};

struct Conv1d {
    dilation: usize,
    padding: usize,
    geom: Option<Conv1dGeom>,
}

fn conv1d_geom(x: &Tensor, w: &Tensor, dilation: usize, padding: usize) -> Conv1dGeom {
    assert_eq!(x.ndim(), 3, "conv1d input must be [batch, channels, length]");
    assert_eq!(w.ndim(), 3, "conv1d weight must be [out, in, kernel]");
    assert_eq!(x.dim(1), w.dim(1), "conv1d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape());
    Conv1dGeom {
        batch: x.dim(0),
        c_in: x.dim(1),
        c_out: w.dim(0),
        len_in: x.dim(2),
        kernel: w.dim(2),
        dilation,
        padding,
    }
}

impl Op for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (x, w) = (inputs[0], inputs[1]);
        let g = conv1d_geom(x, w, self.dilation, self.padding);
        let bias = inputs.get(2).map(|b| b.data());
        let out = conv1d_forward(x.data(), w.data(), bias, &g);
        self.geom = Some(g);
        Tensor::new([g.batch, g.c_out, g.len_out()], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = self.geom.expect("forward not run");
        let (x, w) = (inputs[0], inputs[1]);
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        conv1d_backward(
            x.data(),
            w.data(),
            grad.data(),
            &g,
            dw.as_mut().map(|t| t.data_mut()),
            dx.as_mut().map(|t| t.data_mut()),
        );
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                Tensor::new([g.c_out], channel_sums(grad.data(), g.batch, g.c_out, g.len_out()))
            }));
        }
        out
    }
}

struct Conv2d {
    stride: (usize, usize),
    padding: (usize, usize),
    geom: Option<Conv2dGeom>,
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (x, w) = (inputs[0], inputs[1]);
        assert_eq!(x.ndim(), 4, "conv2d input must be [batch, channels, height, width]");
        assert_eq!(w.ndim(), 4, "conv2d weight must be [out, in, kh, kw]");
        assert_eq!(x.dim(1), w.dim(1), "conv2d channel mismatch");
        let g = Conv2dGeom {
            batch: x.dim(0),
            c_in: x.dim(1),
            c_out: w.dim(0),
            h_in: x.dim(2),
            w_in: x.dim(3),
            kernel: (w.dim(2), w.dim(3)),
            stride: self.stride,
            padding: self.padding,
        };
        let (ho, wo) = g.out_dims();
        let bias = inputs.get(2).map(|b| b.data());
        let out = conv2d_forward(x.data(), w.data(), bias, &g);
        self.geom = Some(g);
        Tensor::new([g.batch, g.c_out, ho, wo], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = self.geom.expect("forward not run");
        let (x, w) = (inputs[0], inputs[1]);
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        conv2d_backward(
            x.data(),
            w.data(),
            grad.data(),
            &g,
            dw.as_mut().map(|t| t.data_mut()),
            dx.as_mut().map(|t| t.data_mut()),
        );
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            let (ho, wo) = g.out_dims();
            out.push(needs[2].then(|| Tensor::new([g.c_out], channel_sums(grad.data(), g.batch, g.c_out, ho * wo))));
        }
        out
    }
}

/// Nearest-neighbour upsampling of the last axis: every sample repeated `factor` times.
struct UpsampleNearest(usize);

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let last = *x.shape().last().expect("upsample of a scalar");
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = last * factor;
    let mut data = Vec::with_capacity(x.numel() * factor);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, factor));
    }
    Tensor::new(shape, data)
}

impl Op for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        upsample_nearest(inputs[0], self.0)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = grad.data().chunks(self.0).map(|c| c.iter().sum()).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data))]
    }
}

/// `tanh(first half of axis 1) ⊙ σ(second half of axis 1)`.
struct GatedTanh;

fn gate_dims(x: &Tensor) -> (usize, usize, usize) {
    assert!(x.ndim() >= 2 && x.dim(1).is_multiple_of(2), "gated activation needs an even channel axis");
    let inner: usize = x.shape()[2..].iter().product();
    (x.dim(0), x.dim(1) / 2, inner)
}

impl Op for GatedTanh {
    fn name(&self) -> &'static str {
        "gated_tanh"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let (b, half, inner) = gate_dims(x);
        let mut shape = x.shape().to_vec();
        shape[1] = half;
        let mut out = Vec::with_capacity(b * half * inner);
        let d = x.data();
        for bi in 0..b {
            let base = bi * 2 * half * inner;
            let (a, s) = d[base..base + 2 * half * inner].split_at(half * inner);
            out.extend(a.iter().zip(s).map(|(&a, &s)| a.tanh() / (1.0 + (-s).exp())));
        }
        Tensor::new(shape, out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (b, half, inner) = gate_dims(x);
        let mut dx = vec![0.0; x.numel()];
        let d = x.data();
        let g = grad.data();
        for bi in 0..b {
            let base = bi * 2 * half * inner;
            let gb = &g[bi * half * inner..(bi + 1) * half * inner];
            for i in 0..half * inner {
                let t = d[base + i].tanh();
                let s = 1.0 / (1.0 + (-d[base + half * inner + i]).exp());
                dx[base + i] = gb[i] * s * (1.0 - t * t);
                dx[base + half * inner + i] = gb[i] * t * s * (1.0 - s);
            }
        }
        vec![Some(Tensor::new(x.shape(), dx))]
    }
}

/// `w[o] = g[o] · v[o] / ‖v[o]‖` with one norm per leading-axis slice.
struct WeightNorm;

fn slice_norms(v: &Tensor) -> Vec<f64> {
    let per = v.numel() / v.dim(0);
    v.data().chunks(per).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

impl Op for WeightNorm {
    fn name(&self) -> &'static str {
        "weight_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (v, g) = (inputs[0], inputs[1]);
        assert_eq!(g.numel(), v.dim(0), "weight norm gain must have one entry per output slice");
        let per = v.numel() / v.dim(0);
        let norms = slice_norms(v);
        let mut out = Vec::with_capacity(v.numel());
        for (o, chunk) in v.data().chunks(per).enumerate() {
            let s = if norms[o] > 0.0 { g.data()[o] / norms[o] } else { 0.0 };
            out.extend(chunk.iter().map(|x| x * s));
        }
        Tensor::new(v.shape(), out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (v, g) = (inputs[0], inputs[1]);
        let per = v.numel() / v.dim(0);
        let norms = slice_norms(v);
        let mut dv = vec![0.0; v.numel()];
        let mut dg = vec![0.0; g.numel()];
        for o in 0..v.dim(0) {
            let n = norms[o];
            if n == 0.0 {
                continue;
            }
            let vs = &v.data()[o * per..(o + 1) * per];
            let gs = &grad.data()[o * per..(o + 1) * per];
            let proj: f64 = vs.iter().zip(gs).map(|(a, b)| a * b).sum();
            dg[o] = proj / n;
            let s = g.data()[o] / n;
            for i in 0..per {
                dv[o * per + i] = s * (gs[i] - proj * vs[i] / (n * n));
            }
        }
        vec![
            needs[0].then(|| Tensor::new(v.shape(), dv)),
            needs[1].then(|| Tensor::new(g.shape(), dg)),
        ]
    }
}

struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (a, b) = (inputs[0], inputs[1]);
        assert!(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul shape mismatch");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        gemm(1.0, MatRef::row_major(a.data(), m, k, k), MatRef::row_major(b.data(), k, n, n), 0.0, &mut out, n);
        Tensor::new([m, n], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let gm = MatRef::row_major(grad.data(), m, n, n);
        let da = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm(1.0, gm, MatRef::transposed(b.data(), n, k, n), 0.0, &mut out, k);
            Tensor::new([m, k], out)
        });
        let db = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm(1.0, MatRef::transposed(a.data(), k, m, k), gm, 0.0, &mut out, n);
            Tensor::new([k, n], out)
        });
        vec![da, db]
    }
}

impl<'g> Var<'g> {
    /// Stride-1 dilated 1-D convolution with symmetric zero padding.
    pub fn conv1d(self, weight: Var<'g>, bias: Option<Var<'g>>, dilation: usize, padding: usize) -> Var<'g> {
        let op = Conv1d { dilation, padding, geom: None };
        match bias {
            Some(b) => self.graph().apply(op, &[self, weight, b]),
            None => self.graph().apply(op, &[self, weight]),
        }
    }

    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Var<'g> {
        let op = Conv2d { stride, padding, geom: None };
        match bias {
            Some(b) => self.graph().apply(op, &[self, weight, b]),
            None => self.graph().apply(op, &[self, weight]),
        }
    }

    pub fn upsample_nearest(self, factor: usize) -> Var<'g> {
        self.graph().apply(UpsampleNearest(factor), &[self])
    }

    pub fn gated_tanh(self) -> Var<'g> {
        self.graph().apply(GatedTanh, &[self])
    }

    /// Weight-normalised weight from direction `self` and per-slice gain `gain`.
    pub fn weight_norm(self, gain: Var<'g>) -> Var<'g> {
        self.graph().apply(WeightNorm, &[self, gain])
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.graph().apply(MatMul, &[self, other])
    }
}

/// Plain (graph-free) weight normalisation, used by inference paths.
pub fn weight_norm(v: &Tensor, g: &Tensor) -> Tensor {
    WeightNorm.forward(&[v, g])
}

/// Plain (graph-free) gated activation.
pub fn gated_tanh(x: &Tensor) -> Tensor {
    GatedTanh.forward(&[x])
}

/// Plain (graph-free) 1-D convolution, identical to [`Var::conv1d`].
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, dilation: usize, padding: usize) -> Tensor {
    let mut op = Conv1d { dilation, padding, geom: None };
    match bias {
        Some(b) => op.forward(&[x, w, b]),
        None => op.forward(&[x, w]),
    }
}
