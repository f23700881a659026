//! Every differentiable op against central finite differences.

use std::sync::Arc;

use hwg_autograd::gradcheck::{check, spread_indices};
use hwg_autograd::{concat, Graph, StftPlan, Tensor, Var, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(loss)/d(input) where `build` maps the input variable to a
/// tensor and the loss is a fixed random projection of it.
fn check_op(name: &str, x: Tensor, build: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
    let proj_seed = 99;
    let loss_of = |g: &Graph, xv: Var<'_>| -> f64 {
        let y = build(xv);
        let p = g.constant(random(&y.shape(), proj_seed));
        y.mul(p).sum().item()
    };
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let y = build(xv);
    let p = g.constant(random(&y.shape(), proj_seed));
    let loss = y.mul(p).sum();
    let grads = g.backward(loss);
    let analytic = grads.get_or_zeros(xv);
    let mut f = |t: &Tensor| {
        let g = Graph::new();
        let v = g.constant(t.clone());
        loss_of(&g, v)
    };
    let idx = spread_indices(x.numel(), 60);
    let r = check(&mut f, &x, &analytic, &idx, 1e-6, 1e-6);
    assert!(r.passes(1e-6), "{name}: {r:?}");
}

#[test]
fn elementwise_ops() {
    let x = random(&[3, 7], 1);
    check_op("tanh", x.clone(), |v| v.tanh());
    check_op("sigmoid", x.clone(), |v| v.sigmoid());
    check_op("square", x.clone(), |v| v.square());
    check_op("exp", x.clone(), |v| v.exp());
    check_op("leaky_relu", x.clone(), |v| v.leaky_relu(0.2));
    check_op("abs", x.clone(), |v| v.abs());
    check_op("log_floor", x.map(|v| v.abs() + 0.1), |v| v.log_floor(1e-5));
    check_op("sqrt", x.map(|v| v.abs() + 0.1), |v| v.sqrt());
    check_op("wrap", x.scale(5.0), |v| v.wrap_angle());
    check_op("mul_self", x.clone(), |v| v.mul(v.add_scalar(0.5)));
    check_op("div", x.map(|v| v + 3.0), |v| v.scale(2.0).div(v.mul(v)));
    check_op("norm_div", x.clone(), |v| v.div(v.norm()));
    check_op("mean", x.clone(), |v| v.square().mean().reshape([1]));
}

#[test]
fn shape_ops() {
    let x = random(&[2, 6, 5], 2);
    check_op("narrow", x.clone(), |v| v.narrow(1, 2, 3));
    check_op("concat", x.clone(), |v| concat(&[v.narrow(1, 4, 2), v, v.narrow(2, 0, 5)], 1));
    check_op("pad_end", x.clone(), |v| v.pad_end(4));
    check_op("reshape", x.clone(), |v| v.reshape([12, 5]).narrow(0, 3, 4));
    check_op("upsample", x.clone(), |v| v.upsample_nearest(3));
    check_op("gated", x.clone(), |v| v.gated_tanh());
}

#[test]
fn convolutions_and_weight_norm() {
    let x = random(&[2, 3, 40], 3);
    let w = random(&[4, 3, 5], 4);
    let b = random(&[4], 5);
    {
        let w = w.clone();
        let b = b.clone();
        check_op("conv1d_x", x.clone(), move |v| {
            let g = v.graph();
            v.conv1d(g.constant(w.clone()), Some(g.constant(b.clone())), 3, 6)
        });
    }
    {
        let x = x.clone();
        check_op("conv1d_w", w.clone(), move |wv| {
            let g = wv.graph();
            g.constant(x.clone()).conv1d(wv, None, 2, 4)
        });
    }
    {
        let x = x.clone();
        let w = w.clone();
        check_op("conv1d_b", b.clone(), move |bv| {
            let g = bv.graph();
            g.constant(x.clone()).conv1d(g.constant(w.clone()), Some(bv), 1, 2)
        });
    }
    let x2 = random(&[2, 2, 17, 6], 6);
    let w2 = random(&[3, 2, 3, 3], 7);
    {
        let w2 = w2.clone();
        check_op("conv2d_x", x2.clone(), move |v| {
            let g = v.graph();
            v.conv2d(g.constant(w2.clone()), None, (3, 2), (1, 1))
        });
    }
    {
        let x2 = x2.clone();
        check_op("conv2d_w", w2, move |wv| {
            let g = wv.graph();
            g.constant(x2.clone()).conv2d(wv, None, (1, 2), (1, 1))
        });
    }
    let gain = random(&[4], 8).map(|v| v + 2.0);
    {
        let gain = gain.clone();
        check_op("weight_norm_v", w.clone(), move |v| v.weight_norm(v.graph().constant(gain.clone())));
    }
    check_op("weight_norm_g", gain, move |gv| gv.graph().constant(w.clone()).weight_norm(gv));
}

#[test]
fn matmul_and_spectral_ops() {
    let a = random(&[4, 6], 9);
    let b = random(&[6, 3], 10);
    {
        let b = b.clone();
        check_op("matmul_a", a.clone(), move |v| v.matmul(v.graph().constant(b.clone())));
    }
    check_op("matmul_b", b, move |v| v.graph().constant(a.clone()).matmul(v));

    let x = random(&[2, 200], 11);
    let plan = Arc::new(StftPlan::new(64, 40, 16, Window::Hann, true));
    {
        let plan = plan.clone();
        check_op("stft", x.clone(), move |v| v.stft(plan.clone()));
    }
    {
        let plan = plan.clone();
        check_op("stft_abs", x.clone(), move |v| v.stft(plan.clone()).complex_abs());
    }
    // DC and Nyquist bins are real, and so is every bin of the first frame
    // (reflect padding makes it symmetric), which puts their phase on the
    // atan2 branch cut.
    let bins = plan.n_bins();
    let frames = plan.n_frames(200).unwrap();
    check_op("stft_angle", x, move |v| {
        v.stft(plan.clone()).complex_angle().narrow(1, 1, frames - 1).narrow(2, 1, bins - 2)
    });
}
