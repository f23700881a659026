use crate::{Op, Tensor, Var};

struct Reshape(Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].clone().reshape(self.0.clone())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshape(inputs[0].shape()))]
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    len: usize,
}

impl Op for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].narrow(self.axis, self.start, self.len)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let outer: usize = x.shape()[..self.axis].iter().product();
        let inner: usize = x.shape()[self.axis + 1..].iter().product();
        let dim = x.dim(self.axis);
        let mut out = Tensor::zeros(x.shape());
        let od = out.data_mut();
        let gd = grad.data();
        for o in 0..outer {
            let dst = (o * dim + self.start) * inner;
            let src = o * self.len * inner;
            od[dst..dst + self.len * inner].copy_from_slice(&gd[src..src + self.len * inner]);
        }
        vec![Some(out)]
    }
}

struct Concat {
    axis: usize,
}

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        Tensor::concat(inputs, self.axis)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut start = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &need)| {
                let len = x.dim(self.axis);
                let g = need.then(|| grad.narrow(self.axis, start, len));
                start += len;
                g
            })
            .collect()
    }
}

/// Zero-pads the last axis at the end.
struct PadEnd(usize);

impl Op for PadEnd {
    fn name(&self) -> &'static str {
        "pad_end"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let last = *x.shape().last().expect("pad_end on a scalar");
        let rows = x.numel() / last.max(1);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = last + self.0;
        let mut data = Vec::with_capacity(rows * (last + self.0));
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * last..(r + 1) * last]);
            data.extend(std::iter::repeat_n(0.0, self.0));
        }
        Tensor::new(shape, data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let last = *x.shape().last().unwrap();
        let rows = x.numel() / last.max(1);
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let base = r * (last + self.0);
            data.extend_from_slice(&grad.data()[base..base + last]);
        }
        vec![Some(Tensor::new(x.shape(), data))]
    }
}

impl<'g> Var<'g> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        self.graph().apply(Reshape(shape.into()), &[self])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        self.graph().apply(Narrow { axis, start, len }, &[self])
    }

    pub fn pad_end(self, n: usize) -> Var<'g> {
        if n == 0 {
            return self;
        }
        self.graph().apply(PadEnd(n), &[self])
    }
}

/// Concatenates variables along `axis`.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    parts[0].graph().apply(Concat { axis }, parts)
}
