use crate::{Op, Tensor, Var};

enum Reduce {
    Sum,
    Mean,
    /// Frobenius norm; gradient zero at the origin.
    Norm,
}

impl Op for Reduce {
    fn name(&self) -> &'static str {
        match self {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Norm => "norm",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        Tensor::scalar(match self {
            Reduce::Sum => x.sum(),
            Reduce::Mean => x.sum() / x.numel() as f64,
            Reduce::Norm => x.norm(),
        })
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = grad.item();
        let out = match self {
            Reduce::Sum => Tensor::full(x.shape(), g),
            Reduce::Mean => Tensor::full(x.shape(), g / x.numel() as f64),
            Reduce::Norm => {
                let n = output.item();
                if n > 0.0 {
                    x.scale(g / n)
                } else {
                    Tensor::zeros(x.shape())
                }
            }
        };
        vec![Some(out)]
    }
}

impl<'g> Var<'g> {
    pub fn sum(self) -> Var<'g> {
        self.graph().apply(Reduce::Sum, &[self])
    }

    pub fn mean(self) -> Var<'g> {
        self.graph().apply(Reduce::Mean, &[self])
    }

    /// Frobenius (Euclidean) norm over all elements.
    pub fn norm(self) -> Var<'g> {
        self.graph().apply(Reduce::Norm, &[self])
    }
}
