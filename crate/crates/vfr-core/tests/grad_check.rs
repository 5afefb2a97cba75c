//! Autodiff vs. central finite differences for every layer op.

use vfr_core::check::{self, FD_STEP, FD_TOL};
use vfr_core::{ops, ParamStore, Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let reports = check::run_gradient_suite(20, 0x5eed);
    let expected_ops = [
        "conv2d",
        "conv2d_transpose",
        "maxpool2x2",
        "batchnorm_train",
        "batchnorm_infer",
        "relu",
        "sigmoid",
        "global_avg_pool",
        "concat_channels",
        "dense",
        "softmax",
        "mul",
        "sum",
        "bce_loss",
        "cross_entropy_loss",
    ];
    assert_eq!(reports.len(), expected_ops.len());
    for (report, expected) in reports.iter().zip(expected_ops) {
        assert_eq!(report.op, expected);
        assert!(
            report.max_rel_err < FD_TOL,
            "{}: max relative error {} >= {}",
            report.op,
            report.max_rel_err,
            FD_TOL
        );
    }
}

#[test]
fn dense_gradient_matches_finite_differences_on_4x8_to_3() {
    let input = Tensor::from_fn(&[4, 8], |i| ((i as f32) * 0.37).sin());
    let weight = Tensor::from_fn(&[3, 8], |i| ((i as f32) * 0.53).cos() * 0.5);
    let bias = Tensor::from_fn(&[3], |i| i as f32 * 0.1);

    let mut store = ParamStore::new();
    let wid = store.add("w", weight.clone());
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.param(&store, wid);
    let b = tape.leaf(bias.clone());
    let out = tape.dense(x, w, b).unwrap();
    let weights: Vec<f32> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    tape.backward_seeded(out, &weights, &mut store).unwrap();

    let mut f = |probe: &Tensor| {
        check::weighted_sum(&ops::dense(&input, probe, &bias).unwrap(), &weights)
    };
    let fd = check::numerical_grad(&weight, &mut f, FD_STEP);
    let err = check::max_relative_error(store.get(wid).value.grad().unwrap(), &fd);
    assert!(err < FD_TOL, "relative error {err}");
}

#[test]
fn maxpool_gradient_routes_entirely_to_argmax() {
    // Finite differences confirm the backward routing: non-argmax positions
    // get exactly zero, the argmax position gets the upstream gradient.
    let input = Tensor::new(
        vec![1, 1, 4, 4],
        vec![
            0.9, 0.1, 0.5, 0.3, //
            0.2, 0.4, 0.7, 0.6, //
            0.15, 0.35, 0.55, 0.75, //
            0.25, 0.45, 0.65, 0.05,
        ],
    )
    .unwrap();

    let mut store = ParamStore::new();
    let xid = store.add("x", input.clone());
    let mut tape = Tape::new();
    let x = tape.param(&store, xid);
    let out = tape.maxpool2x2(x).unwrap();
    let weights = vec![1.0, 2.0, 3.0, 4.0];
    tape.backward_seeded(out, &weights, &mut store).unwrap();

    let mut f = |probe: &Tensor| check::weighted_sum(&ops::maxpool2x2(probe).unwrap().0, &weights);
    let fd = check::numerical_grad(&input, &mut f, FD_STEP);
    let ad = store.get(xid).value.grad().unwrap();
    let err = check::max_relative_error(ad, &fd);
    assert!(err < FD_TOL, "relative error {err}");
    let nonzero = ad.iter().filter(|&&g| g != 0.0).count();
    assert_eq!(nonzero, 4, "one routed gradient per window");
}

#[test]
fn gradient_suite_is_deterministic() {
    let a = check::run_gradient_suite(5, 42);
    let b = check::run_gradient_suite(5, 42);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
    }
}
