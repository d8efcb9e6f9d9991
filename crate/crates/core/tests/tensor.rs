//! Hand-computable oracles for the tape: first derivatives, nested
//! (create_graph) derivatives, and the loss composites.

use metafault::tensor::{grad_of_grad_check, Tape, TensorError};

fn values(tape: &Tape<f64>, t: metafault::tensor::Tensor) -> Vec<f64> {
    tape.values(t).to_vec()
}

#[test]
fn sum_of_leaf_has_unit_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.leaf(vec![2.0, -1.0, 0.5], vec![3], true);
    let loss = tape.sum_all(w);
    let g = tape.backward(loss, &[w], false, false).unwrap()[0];
    assert_eq!(values(&tape, g), vec![1.0, 1.0, 1.0]);
}

#[test]
fn squared_residual_gradient() {
    // loss = (w*x - y)^2 with w=1, x=1, y=0 -> dL/dw = 2
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.leaf(vec![1.0], vec![], true);
    let x = tape.leaf(vec![1.0], vec![], false);
    let y = tape.leaf(vec![0.0], vec![], false);
    let pred = tape.mul(w, x).unwrap();
    let resid = tape.sub(pred, y).unwrap();
    let loss = tape.mul(resid, resid).unwrap();
    let g = tape.backward(loss, &[w], false, false).unwrap()[0];
    assert_eq!(values(&tape, g), vec![2.0]);
}

#[test]
fn grad_of_grad_examples() {
    // f = x^3 at 2 -> (12, 12)
    let (g, gg) = grad_of_grad_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.mul(sq, x)
        },
        2.0f64,
    )
    .unwrap();
    assert!((g - 12.0).abs() < 1e-12 && (gg - 12.0).abs() < 1e-12, "got ({g}, {gg})");

    // f = x^2 at 0 -> (0, 2)
    let (g, gg) = grad_of_grad_check(|tape, x| tape.mul(x, x), 0.0f64).unwrap();
    assert!((g - 0.0).abs() < 1e-12 && (gg - 2.0).abs() < 1e-12, "got ({g}, {gg})");

    // f = relu(x)^2 at -1 -> (0, 0): inactive region
    let (g, gg) = grad_of_grad_check(
        |tape, x| {
            let r = tape.relu(x);
            tape.mul(r, r)
        },
        -1.0f64,
    )
    .unwrap();
    assert_eq!((g, gg), (0.0, 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.leaf(vec![1.0, 2.0], vec![2], true);
    let y = tape.scalar_mul(2.0, w);
    let err = tape.backward(y, &[w], false, false).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss(ref s) if s == &[2]));
}

#[test]
fn backward_reports_unused_parameter_unless_allowed() {
    let mut tape: Tape<f64> = Tape::new();
    let used = tape.leaf(vec![1.0], vec![], true);
    let unused = tape.leaf(vec![5.0], vec![], true);
    let loss = tape.mul(used, used).unwrap();

    let err = tape.backward(loss, &[used, unused], false, false).unwrap_err();
    assert!(matches!(err, TensorError::UnusedParameter { index: 1 }));

    let grads = tape.backward(loss, &[used, unused], false, true).unwrap();
    assert_eq!(values(&tape, grads[0]), vec![2.0]);
    assert_eq!(values(&tape, grads[1]), vec![0.0]);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(vec![0.0], vec![], true);
    let r = tape.relu(x);
    let g = tape.backward(r, &[x], false, false).unwrap()[0];
    assert_eq!(values(&tape, g), vec![0.0]);
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut tape: Tape<f64> = Tape::new();
    // one 2x2 plane of equal values: gradient goes to scan-order-first cell
    let x = tape.leaf(vec![3.0; 4], vec![1, 1, 2, 2], true);
    let p = tape.max_pool2d(x).unwrap();
    let loss = tape.sum_all(p);
    let g = tape.backward(loss, &[x], false, false).unwrap()[0];
    assert_eq!(values(&tape, g), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn log_softmax_rows_are_normalized() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(vec![0.3, -1.2, 2.0, 4.0, 4.0, 4.0], vec![2, 3], true);
    let ls = tape.log_softmax(x).unwrap();
    for row in values(&tape, ls).chunks(3) {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6, "row sums to {total}");
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln_n() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.leaf(vec![0.0; 6], vec![2, 3], true);
    let loss = tape.cross_entropy(logits, &[0, 2]).unwrap();
    assert!((values(&tape, loss)[0] - 3.0f64.ln()).abs() < 1e-12);

    // N=2, logits [0,0]: both label choices give ln 2
    for label in 0..2usize {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(vec![0.0; 4], vec![2, 2], true);
        let loss = tape.cross_entropy(logits, &[label, label]).unwrap();
        assert!((values(&tape, loss)[0] - 2.0f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_point_mass_is_tiny() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.leaf(vec![20.0, 0.0, 0.0, 0.0, 20.0, 0.0], vec![2, 3], true);
    let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
    assert!(values(&tape, loss)[0] < 1e-6);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.leaf(vec![0.0; 6], vec![2, 3], true);
    let err = tape.cross_entropy(logits, &[0, 3]).unwrap_err();
    assert!(matches!(err, TensorError::LabelOutOfRange { label: 3, classes: 3 }));
}

#[test]
fn single_thread_rebuild_is_bit_identical() {
    let run = || {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![0.1, -0.4, 0.9, 1.3], vec![2, 2], true);
        let w = tape.leaf(vec![0.5, -0.2, 0.3, 0.8], vec![2, 2], true);
        let y = tape.matmul(x, w).unwrap();
        let e = tape.exp(y);
        let loss = tape.mean_all(e);
        let grads = tape.backward(loss, &[x, w], false, false).unwrap();
        (values(&tape, loss), values(&tape, grads[0]), values(&tape, grads[1]))
    };
    assert_eq!(run(), run());
}

#[test]
fn second_backward_through_created_graph_matches_hand_value() {
    // f(x) = x^4: f' = 4x^3, f'' = 12x^2. At x = 1.5: (13.5, 27).
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(vec![1.5], vec![], true);
    let x2 = tape.mul(x, x).unwrap();
    let f = tape.mul(x2, x2).unwrap();
    let g = tape.backward(f, &[x], true, false).unwrap()[0];
    assert!((values(&tape, g)[0] - 13.5).abs() < 1e-12);
    let gg = tape.backward(g, &[x], false, false).unwrap()[0];
    assert!((values(&tape, gg)[0] - 27.0).abs() < 1e-12);
}
