//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with the layers a convolutional waveform GAN needs: dilated 1-D
//! and strided 2-D convolutions, weight normalization, gated activations,
//! nearest upsampling and a differentiable STFT.
//!
//! ```
//! use hwg_autograd::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.variable(Tensor::new([2], vec![3.0, 4.0]));
//! let n = x.norm();
//! let grads = g.backward(n);
//! assert_eq!(n.item(), 5.0);
//! let dx = grads.get(x).unwrap();
//! assert!((dx.data()[0] - 0.6).abs() < 1e-15 && (dx.data()[1] - 0.8).abs() < 1e-15);
//! ```

mod graph;
mod params;
mod tensor;

pub mod gradcheck;
pub mod kernels {
    pub mod conv;
    pub mod gemm;
    pub mod stft;
}
pub mod ops {
    pub mod elementwise;
    pub mod nn;
    pub mod reduce;
    pub mod shape;
    pub mod spectral;
}

pub use graph::{Gradients, Graph, Op, Var};
pub use kernels::stft::{StftPlan, Window};
pub use ops::elementwise::{scalar, wrap_angle};
pub use ops::shape::concat;
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
