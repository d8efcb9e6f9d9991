//! Shape, initialization, loss, and checkpoint behavior of the 4-block model.

use metafault::model::{
    accuracy, checkpoint, forward, init_params, param_layout, validate_params, ModelError,
    ModelSpec, FEATURE_DIM,
};
use metafault::tensor::{ParamSet, Tape};

fn spec(n: usize) -> ModelSpec {
    ModelSpec { num_ways: n }
}

#[test]
fn layout_shapes_match_the_architecture() {
    let layout = param_layout(3);
    assert_eq!(layout[0], ("block1.conv.w".to_string(), vec![64, 1, 3, 3]));
    assert_eq!(layout[3].1, vec![64, 64, 3, 3]); // block2 takes 64 channels
    assert_eq!(layout[layout.len() - 2], ("head.w".to_string(), vec![FEATURE_DIM, 3]));
    assert_eq!(layout[layout.len() - 1], ("head.b".to_string(), vec![1, 3]));
    assert_eq!(FEATURE_DIM, 1024);
}

#[test]
fn init_is_deterministic_and_validates() {
    let a: ParamSet<f32> = init_params(&spec(5), 42);
    let b: ParamSet<f32> = init_params(&spec(5), 42);
    assert_eq!(a, b);
    validate_params(&spec(5), &a).unwrap();

    let c: ParamSet<f32> = init_params(&spec(5), 43);
    assert_ne!(a, c);

    // bn starts at identity, bias at zero
    assert!(a.get("block1.bn.gamma").unwrap().values.iter().all(|&v| v == 1.0));
    assert!(a.get("block1.bn.beta").unwrap().values.iter().all(|&v| v == 0.0));
    assert!(a.get("head.b").unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_shape_and_batch_guards() {
    let theta: ParamSet<f32> = init_params(&spec(5), 0);
    let mut tape: Tape<f32> = Tape::new();
    let params = theta.leaves(&mut tape, true);

    let batch = tape.zeros(vec![3, 1, 64, 64]);
    let logits = forward(&mut tape, &params, batch).unwrap();
    assert_eq!(tape.shape(logits), &[3, 5]);

    let single = tape.zeros(vec![1, 1, 64, 64]);
    assert!(matches!(
        forward(&mut tape, &params, single),
        Err(ModelError::BatchTooSmall(1))
    ));

    let wrong = tape.zeros(vec![2, 1, 32, 32]);
    assert!(matches!(forward(&mut tape, &params, wrong), Err(ModelError::BadInputShape { .. })));
}

#[test]
fn zero_conv_weights_pass_the_bias_through() {
    // All-zero input and zero conv weights leave only the classifier bias.
    let mut theta: ParamSet<f32> = init_params(&spec(3), 0);
    for entry in theta.entries_mut() {
        if entry.name.ends_with(".conv.w") {
            entry.values.iter_mut().for_each(|v| *v = 0.0);
        } else if entry.name == "head.b" {
            entry.values.copy_from_slice(&[0.5, -0.25, 1.0]);
        }
    }
    let mut tape: Tape<f32> = Tape::new();
    let params = theta.leaves(&mut tape, true);
    let batch = tape.zeros(vec![4, 1, 64, 64]);
    let logits = forward(&mut tape, &params, batch).unwrap();
    for row in tape.values(logits).chunks(3) {
        assert_eq!(row, &[0.5, -0.25, 1.0]);
    }
}

#[test]
fn batch_permutation_permutes_logits_rows() {
    let theta: ParamSet<f32> = init_params(&spec(3), 7);
    let pixels: Vec<f32> = (0..2 * 64 * 64).map(|i| ((i * 37 % 101) as f32 - 50.0) / 50.0).collect();
    let run = |order: [usize; 2]| {
        let mut tape: Tape<f32> = Tape::new();
        let params = theta.leaves(&mut tape, true);
        let mut values = Vec::new();
        for &img in &order {
            values.extend_from_slice(&pixels[img * 4096..(img + 1) * 4096]);
        }
        let batch = tape.leaf(values, vec![2, 1, 64, 64], false);
        let logits = forward(&mut tape, &params, batch).unwrap();
        tape.values(logits).to_vec()
    };
    let fwd = run([0, 1]);
    let rev = run([1, 0]);
    // batch-norm reductions sum in batch order, so agreement is up to
    // floating-point associativity, not bitwise
    let close = |a: &[f32], b: &[f32]| {
        a.iter().zip(b).all(|(&x, &y)| (x - y).abs() <= 1e-4 * x.abs().max(1.0))
    };
    assert!(close(&fwd[0..3], &rev[3..6]), "{fwd:?} vs {rev:?}");
    assert!(close(&fwd[3..6], &rev[0..3]), "{fwd:?} vs {rev:?}");
}

#[test]
fn accuracy_counts_argmax_hits_first_tie_wins() {
    let logits = [0.1f32, 0.9, 0.0, 0.5, 0.5, 0.5];
    assert_eq!(accuracy(&logits, 3, &[1, 0]), 1.0);
    assert_eq!(accuracy(&logits, 3, &[1, 1]), 0.5);
}

#[test]
fn checkpoint_roundtrip_is_byte_exact() {
    let theta: ParamSet<f32> = init_params(&spec(4), 99);
    let bytes = checkpoint::to_bytes(&theta);
    let back: ParamSet<f32> = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(theta, back);
    assert_eq!(bytes, checkpoint::to_bytes(&back));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mflt");
    checkpoint::save(&theta, &path).unwrap();
    let loaded: ParamSet<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(theta, loaded);
}

#[test]
fn checkpoint_width_mismatch_is_detected() {
    let theta: ParamSet<f64> = init_params(&spec(2), 1);
    let bytes = checkpoint::to_bytes(&theta);
    assert!(checkpoint::from_bytes::<f32>(&bytes).is_err());
}

#[test]
fn validate_rejects_wrong_head_shape() {
    let theta: ParamSet<f32> = init_params(&spec(2), 1);
    let err = validate_params(&spec(3), &theta).unwrap_err();
    assert!(err.to_string().contains("head.w"), "unexpected: {err}");
}
