use std::sync::Arc;

use crate::kernels::stft::StftPlan;
use crate::{Op, Tensor, Var};

/// `[batch, samples]` → `[batch, frames, bins, 2]` (real, imaginary).
struct Stft(Arc<StftPlan>);

impl Op for Stft {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        assert_eq!(x.ndim(), 2, "stft input must be [batch, samples]");
        let (b, len) = (x.dim(0), x.dim(1));
        let frames = self
            .0
            .n_frames(len)
            .unwrap_or_else(|| panic!("signal of {len} samples too short for n_fft {}", self.0.n_fft()));
        let bins = self.0.n_bins();
        let mut out = Vec::with_capacity(b * frames * bins * 2);
        for row in x.data().chunks(len) {
            out.extend(self.0.forward(row));
        }
        Tensor::new([b, frames, bins, 2], out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (b, len) = (x.dim(0), x.dim(1));
        let per = output.numel() / b;
        let mut dx = Vec::with_capacity(x.numel());
        for bi in 0..b {
            dx.extend(self.0.backward(len, &grad.data()[bi * per..(bi + 1) * per]));
        }
        vec![Some(Tensor::new(x.shape(), dx))]
    }
}

/// Magnitude of an interleaved complex tensor `[..., 2]` → `[...]`.
struct ComplexAbs;

/// Phase (`atan2(im, re)`) of an interleaved complex tensor.
struct ComplexAngle;

fn complex_out_shape(z: &Tensor) -> Vec<usize> {
    assert_eq!(z.shape().last(), Some(&2), "complex tensors end in an axis of size 2");
    z.shape()[..z.ndim() - 1].to_vec()
}

impl Op for ComplexAbs {
    fn name(&self) -> &'static str {
        "complex_abs"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let z = inputs[0];
        let data = z.data().chunks(2).map(|c| c[0].hypot(c[1])).collect();
        Tensor::new(complex_out_shape(z), data)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let mut dz = vec![0.0; z.numel()];
        for (i, c) in z.data().chunks(2).enumerate() {
            let m = output.data()[i];
            if m > 0.0 {
                let s = grad.data()[i] / m;
                dz[2 * i] = s * c[0];
                dz[2 * i + 1] = s * c[1];
            }
        }
        vec![Some(Tensor::new(z.shape(), dz))]
    }
}

impl Op for ComplexAngle {
    fn name(&self) -> &'static str {
        "complex_angle"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let z = inputs[0];
        let data = z.data().chunks(2).map(|c| c[1].atan2(c[0])).collect();
        Tensor::new(complex_out_shape(z), data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let mut dz = vec![0.0; z.numel()];
        for (i, c) in z.data().chunks(2).enumerate() {
            let r2 = c[0] * c[0] + c[1] * c[1];
            if r2 > 0.0 {
                let g = grad.data()[i];
                dz[2 * i] = -g * c[1] / r2;
                dz[2 * i + 1] = g * c[0] / r2;
            }
        }
        vec![Some(Tensor::new(z.shape(), dz))]
    }
}

impl<'g> Var<'g> {
    pub fn stft(self, plan: Arc<StftPlan>) -> Var<'g> {
        self.graph().apply(Stft(plan), &[self])
    }

    pub fn complex_abs(self) -> Var<'g> {
        self.graph().apply(ComplexAbs, &[self])
    }

    pub fn complex_angle(self) -> Var<'g> {
        self.graph().apply(ComplexAngle, &[self])
    }
}
