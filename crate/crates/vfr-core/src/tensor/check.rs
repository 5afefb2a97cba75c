//! Numerical gradient checking: central finite differences computed from
//! the pure forward ops, for comparison against the tape's reverse pass.
//!
//! The differencing never touches the tape; it re-runs the forward closure
//! on perturbed copies of the input, so it stays an independent oracle for
//! the backward implementations.

use super::Tensor;

/// Central-difference step used across the gradient suite.
pub const FD_STEP: f32 = 1e-3;
/// Relative-error bound for autodiff vs. finite differences in 32-bit.
pub const FD_TOL: f32 = 1e-2;

/// Gradient of `f` at `x` by central differences with step `h`. The loss
/// closure returns f64 so test harness reductions don't add f32
/// accumulation noise on top of the op under test.
pub fn numerical_grad(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64, h: f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = ((up - down) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// Elementwise relative error |a - f| / max(|f|, 1e-6), maximized.
///
/// Elements whose absolute difference is below 1e-3 of the gradient
/// vector's max magnitude are treated as agreeing: where contributions
/// cancel to near zero, the relative quotient amplifies plain f32
/// rounding noise and stops measuring the backward implementation.
pub fn max_relative_error(autodiff: &[f32], finite_diff: &[f32]) -> f32 {
    assert_eq!(autodiff.len(), finite_diff.len());
    let scale = finite_diff.iter().fold(1.0f32, |m, &v| m.max(v.abs()));
    let atol = 1e-3 * scale;
    autodiff
        .iter()
        .zip(finite_diff)
        .map(|(&a, &f)| {
            let diff = (a - f).abs();
            if diff < atol {
                0.0
            } else {
                diff / f.abs().max(1e-6)
            }
        })
        .fold(0.0, f32::max)
}

/// Weighted sum of a tensor's elements in f64; the standard probe loss for
/// op-level checks (a plain sum has degenerate gradients for ops like
/// batchnorm, whose output sum is constant).
pub fn weighted_sum(t: &Tensor, weights: &[f32]) -> f64 {
    assert_eq!(t.numel(), weights.len());
    t.data()
        .iter()
        .zip(weights)
        .map(|(&v, &w)| v as f64 * w as f64)
        .sum()
}

use rand::prelude::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::optim::ParamStore;
use super::tape::{NodeId, Tape};

/// Worst relative error observed for one op across random cases.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f32,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ReLU's nondifferentiable point.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.1f32..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values separated by more than 2*FD_STEP, so max-pool argmaxes
/// cannot flip under perturbation (ties are excluded by construction).
fn rand_tensor_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut values: Vec<f32> = (0..numel).map(|i| (i as f32) * 0.01 - (numel as f32) * 0.005).collect();
    for i in (1..values.len()).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// One autodiff-vs-finite-difference comparison. Every tensor in `inputs`
/// is registered as a parameter and probed; the upstream seed is a random
/// weighting so no gradient is structurally zero.
fn check_case(
    inputs: &[Tensor],
    forward: &dyn Fn(&[Tensor]) -> Tensor,
    record: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    rng: &mut ChaCha8Rng,
) -> f32 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t.clone()))
        .collect();

    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let out = record(&mut tape, &nodes);
    let weights: Vec<f32> = (0..tape.value(out).numel())
        .map(|_| {
            let mag = rng.random_range(0.5f32..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    tape.backward_seeded(out, &weights, &mut store).unwrap();

    let mut worst = 0.0f32;
    for (i, id) in ids.iter().enumerate() {
        let autodiff = store.get(*id).value.grad().unwrap().to_vec();
        let mut f = |probe: &Tensor| {
            let mut ins = inputs.to_vec();
            ins[i] = probe.clone();
            weighted_sum(&forward(&ins), &weights)
        };
        let fd = numerical_grad(&inputs[i], &mut f, FD_STEP);
        worst = worst.max(max_relative_error(&autodiff, &fd));
    }
    worst
}

/// Run the full per-op gradient suite: `cases_per_op` random cases for
/// every differentiable op, extents <= 6, f32 arithmetic, central
/// differences with step [`FD_STEP`]. Returns one report per op.
pub fn run_gradient_suite(cases_per_op: usize, seed: u64) -> Vec<OpGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |op: &'static str, worst: f32| {
        reports.push(OpGradReport { op, cases: cases_per_op, max_rel_err: worst });
    };

    // conv2d
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = *[1usize, 3].choose(&mut rng).unwrap();
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let h = rng.random_range(k.max(2)..=6);
        let w = rng.random_range(k.max(2)..=6);
        let x = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        worst = worst.max(check_case(
            &[x, wt, b],
            &move |ins| ops::conv2d(&ins[0], &ins[1], &ins[2], stride, pad).unwrap(),
            &move |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap(),
            &mut rng,
        ));
    }
    push("conv2d", worst);

    // conv2d_transpose
    let mut worst = 0.0f32;
    for case in 0..cases_per_op {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (k, stride) = if case % 2 == 0 { (2, 2) } else { (3, 1) };
        let h = rng.random_range(1..=4);
        let w = rng.random_range(1..=4);
        let x = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[cin, cout, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        worst = worst.max(check_case(
            &[x, wt, b],
            &move |ins| ops::conv2d_transpose(&ins[0], &ins[1], &ins[2], stride).unwrap(),
            &move |tape, ids| tape.conv2d_transpose(ids[0], ids[1], ids[2], stride).unwrap(),
            &mut rng,
        ));
    }
    push("conv2d_transpose", worst);

    // maxpool2x2
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let h = 2 * rng.random_range(1..=3);
        let w = 2 * rng.random_range(1..=3);
        let x = rand_tensor_distinct(&mut rng, &[n, c, h, w]);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::maxpool2x2(&ins[0]).unwrap().0,
            &|tape, ids| tape.maxpool2x2(ids[0]).unwrap(),
            &mut rng,
        ));
    }
    push("maxpool2x2", worst);

    // batchnorm, train mode. Statistics over at least 8 elements per
    // channel: with 2-3 elements the output saturates near +/-gamma and
    // the true input gradient collapses toward eps scale, where finite
    // differences stop resolving anything.
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(2..=3), rng.random_range(1..=3));
        let h = rng.random_range(2..=4);
        let w = rng.random_range(2..=4);
        let x = rand_tensor(&mut rng, &[n, c, h, w], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        worst = worst.max(check_case(
            &[x, gamma, beta],
            &|ins| ops::batchnorm_train(&ins[0], &ins[1], &ins[2], ops::BN_EPS).unwrap().0,
            &|tape, ids| tape.batchnorm_train(ids[0], ids[1], ids[2], ops::BN_EPS).unwrap().0,
            &mut rng,
        ));
    }
    push("batchnorm_train", worst);

    // batchnorm, infer mode
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let h = rng.random_range(1..=4);
        let w = rng.random_range(1..=4);
        let x = rand_tensor(&mut rng, &[n, c, h, w], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[c], -0.5, 0.5);
        let mean: Vec<f32> = (0..c).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let var: Vec<f32> = (0..c).map(|_| rng.random_range(0.5f32..1.5)).collect();
        let (m, v) = (mean.clone(), var.clone());
        worst = worst.max(check_case(
            &[x, gamma, beta],
            &move |ins| ops::batchnorm_infer(&ins[0], &ins[1], &ins[2], &m, &v, ops::BN_EPS).unwrap(),
            &move |tape, ids| {
                tape.batchnorm_infer(ids[0], ids[1], ids[2], &mean, &var, ops::BN_EPS).unwrap()
            },
            &mut rng,
        ));
    }
    push("batchnorm_infer", worst);

    // relu (inputs bounded away from the kink at 0)
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=4));
        let x = rand_tensor_off_zero(&mut rng, &[n, c, 3, 3]);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::relu(&ins[0]),
            &|tape, ids| tape.relu(ids[0]),
            &mut rng,
        ));
    }
    push("relu", worst);

    // sigmoid
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=4));
        let x = rand_tensor(&mut rng, &[n, c, 3, 3], -3.0, 3.0);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::sigmoid(&ins[0]),
            &|tape, ids| tape.sigmoid(ids[0]),
            &mut rng,
        ));
    }
    push("sigmoid", worst);

    // global_avg_pool
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        ];
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::global_avg_pool(&ins[0]).unwrap(),
            &|tape, ids| tape.global_avg_pool(ids[0]).unwrap(),
            &mut rng,
        ));
    }
    push("global_avg_pool", worst);

    // concat_channels
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = rand_tensor(&mut rng, &[n, ca, h, w], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[n, cb, h, w], -1.0, 1.0);
        worst = worst.max(check_case(
            &[a, b],
            &|ins| ops::concat_channels(&ins[0], &ins[1]).unwrap(),
            &|tape, ids| tape.concat_channels(ids[0], ids[1]).unwrap(),
            &mut rng,
        ));
    }
    push("concat_channels", worst);

    // dense
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = rand_tensor(&mut rng, &[n, cin], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[cout, cin], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        worst = worst.max(check_case(
            &[x, w, b],
            &|ins| ops::dense(&ins[0], &ins[1], &ins[2]).unwrap(),
            &|tape, ids| tape.dense(ids[0], ids[1], ids[2]).unwrap(),
            &mut rng,
        ));
    }
    push("dense", worst);

    // softmax
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let x = rand_tensor(&mut rng, &[n, c], -2.0, 2.0);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::softmax(&ins[0]).unwrap(),
            &|tape, ids| tape.softmax(ids[0]).unwrap(),
            &mut rng,
        ));
    }
    push("softmax", worst);

    // elementwise mul
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=5)];
        let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        worst = worst.max(check_case(
            &[a, b],
            &|ins| ops::mul(&ins[0], &ins[1]).unwrap(),
            &|tape, ids| tape.mul(ids[0], ids[1]).unwrap(),
            &mut rng,
        ));
    }
    push("mul", worst);

    // sum
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let x = rand_tensor(&mut rng, &[n, c], -1.0, 1.0);
        worst = worst.max(check_case(
            &[x],
            &|ins| ops::sum(&ins[0]),
            &|tape, ids| tape.sum(ids[0]),
            &mut rng,
        ));
    }
    push("sum", worst);

    // bce_loss (predictions bounded away from the clamp region)
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let shape = [rng.random_range(1..=2), 1, rng.random_range(2..=5), rng.random_range(2..=5)];
        let pred = rand_tensor(&mut rng, &shape, 0.05, 0.95);
        let target = Tensor::from_fn(&shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let t2 = target.clone();
        worst = worst.max(check_case(
            &[pred],
            &move |ins| ops::bce_loss(&ins[0], &t2).unwrap(),
            &move |tape, ids| tape.bce_loss(ids[0], target.clone()).unwrap(),
            &mut rng,
        ));
    }
    push("bce_loss", worst);

    // cross_entropy_loss
    let mut worst = 0.0f32;
    for _ in 0..cases_per_op {
        let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let probs = rand_tensor(&mut rng, &[n, c], 0.05, 0.95);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let l2 = labels.clone();
        worst = worst.max(check_case(
            &[probs],
            &move |ins| ops::cross_entropy_loss(&ins[0], &l2).unwrap(),
            &move |tape, ids| tape.cross_entropy_loss(ids[0], labels.clone()).unwrap(),
            &mut rng,
        ));
    }
    push("cross_entropy_loss", worst);

    reports
}
