use std::f64::consts::PI;

use crate::{Graph, Op, Tensor, Var};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Scale(f64),
    AddScalar(f64),
    Square,
    Sqrt,
    Abs,
    LogFloor(f64),
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    WrapAngle,
}

/// Maps an angle difference into (−π, π].
#[inline]
pub fn wrap_angle(d: f64) -> f64 {
    d - 2.0 * PI * ((d - PI) / (2.0 * PI)).ceil()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    Unary::LeakyRelu(slope).eval(x)
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::LogFloor(f) => x.max(f).ln(),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::WrapAngle => wrap_angle(x),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(c) => c,
            Unary::AddScalar(_) | Unary::WrapAngle => 1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::LogFloor(f) => {
                if x > f {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

impl Op for Unary {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let k = *self;
        inputs[0].map(|v| k.eval(v))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(inputs[0].shape(), data))]
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise binary op. Shapes must match, or one side must hold a single
/// value which is broadcast.
struct BinaryOp(Binary);

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.shape() == b.shape() || b.numel() == 1 {
        a.shape().to_vec()
    } else if a.numel() == 1 {
        b.shape().to_vec()
    } else {
        panic!("binary op shape mismatch: {:?} vs {:?}", a.shape(), b.shape())
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn reduce_to(t: Vec<f64>, like: &Tensor) -> Tensor {
    if like.numel() == 1 && t.len() != 1 {
        Tensor::new(like.shape(), vec![t.iter().sum()])
    } else {
        Tensor::new(like.shape(), t)
    }
}

impl Op for BinaryOp {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (a, b) = (inputs[0], inputs[1]);
        let shape = broadcast_shape(a, b);
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match self.0 {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(at(a, i), at(b, i))).collect()
        };
        Tensor::new(shape, data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let n = grad.numel();
        let g = grad.data();
        let da = needs[0].then(|| {
            let v: Vec<f64> = match self.0 {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => (0..n).map(|i| g[i] * at(b, i)).collect(),
                Binary::Div => (0..n).map(|i| g[i] / at(b, i)).collect(),
            };
            reduce_to(v, a)
        });
        let db = needs[1].then(|| {
            let v: Vec<f64> = match self.0 {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|v| -v).collect(),
                Binary::Mul => (0..n).map(|i| g[i] * at(a, i)).collect(),
                Binary::Div => (0..n)
                    .map(|i| {
                        let bv = at(b, i);
                        -g[i] * at(a, i) / (bv * bv)
                    })
                    .collect(),
            };
            reduce_to(v, b)
        });
        vec![da, db]
    }
}

// Named methods rather than operator traits: every op records onto the graph.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    fn unary(self, k: Unary) -> Var<'g> {
        self.graph().apply(k, &[self])
    }

    fn binary(self, k: Binary, other: Var<'g>) -> Var<'g> {
        self.graph().apply(BinaryOp(k), &[self, other])
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(Binary::Div, other)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Unary::Scale(c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Unary::AddScalar(c))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(self) -> Var<'g> {
        self.unary(Unary::Sqrt)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Unary::Abs)
    }

    /// `ln(max(x, floor))`; no gradient flows where `x ≤ floor`.
    pub fn log_floor(self, floor: f64) -> Var<'g> {
        self.unary(Unary::LogFloor(floor))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(Unary::LeakyRelu(slope))
    }

    /// Wraps angles into (−π, π]; the gradient is the identity.
    pub fn wrap_angle(self) -> Var<'g> {
        self.unary(Unary::WrapAngle)
    }
}

/// Convenience for building scalar constants in the same graph.
pub fn scalar<'g>(graph: &'g Graph, v: f64) -> Var<'g> {
    graph.constant(Tensor::scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI - 0.2) + 0.2).abs() < 1e-12);
        assert!((wrap_angle(7.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let g = Graph::new();
        let x = g.variable(Tensor::new([3], vec![1.0, 2.0, 4.0]));
        let s = g.variable(Tensor::scalar(2.0));
        let y = x.div(s).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5]);
        assert!((grads.get(s).unwrap().item() + 7.0 / 4.0).abs() < 1e-15);
    }
}
