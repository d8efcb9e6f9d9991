//! One-time separability check for the synthetic generator: a conventionally
//! trained (non-meta) 4-block model must reach >= 95% held-out accuracy on 4
//! synthetic classes within 200 optimizer steps. Run explicitly with
//! `cargo test --test separability -- --ignored` (takes a few CPU-minutes).

use metafault::data::synth::{default_conditions, synth_fault_signal, DamagePattern, FaultKind};
use metafault::data::{segment_record, to_image, Segment};
use metafault::meta::{outer_optimizer_step, OptState, OuterOptimizer};
use metafault::model::{self, ModelSpec};
use metafault::tensor::{ParamSet, Tape};

fn class_segments(kind: FaultKind, label: usize) -> Vec<Segment> {
    let conditions = default_conditions();
    let mut segments = Vec::new();
    for (r, cond) in conditions.iter().enumerate().take(2) {
        let rec = synth_fault_signal(
            kind,
            DamagePattern::Punctual,
            2,
            cond,
            20_480,
            label,
            (label * 10 + r) as u64,
        );
        segments.extend(segment_record(&rec, label * 10 + r, 2048).unwrap());
    }
    segments
}

#[test]
#[ignore = "minutes-long training run; executed once when calibrating the generator"]
fn conventional_training_separates_four_synthetic_classes() {
    let kinds = [FaultKind::Healthy, FaultKind::Ball, FaultKind::Inner, FaultKind::Outer];
    let mut train: Vec<(Vec<f32>, usize)> = Vec::new();
    let mut held_out: Vec<(Vec<f32>, usize)> = Vec::new();
    for (label, &kind) in kinds.iter().enumerate() {
        let segments = class_segments(kind, label);
        for (i, seg) in segments.iter().enumerate() {
            let example = (to_image(&seg.values), label);
            if i % 5 == 4 {
                held_out.push(example);
            } else {
                train.push(example);
            }
        }
    }

    let spec = ModelSpec { num_ways: 4 };
    let mut theta: ParamSet<f32> = model::init_params(&spec, 0);
    let lens: Vec<usize> = theta.entries().iter().map(|e| e.values.len()).collect();
    let mut opt = OptState::new(&lens);

    let batch_size = 8;
    for step in 0..200 {
        let mut values = Vec::with_capacity(batch_size * 4096);
        let mut labels = Vec::with_capacity(batch_size);
        for j in 0..batch_size {
            let (image, label) = &train[(step * batch_size + j * 7) % train.len()];
            values.extend_from_slice(image);
            labels.push(*label);
        }
        let mut tape: Tape<f32> = Tape::new();
        let params = theta.leaves(&mut tape, true);
        let batch = tape.leaf(values, vec![batch_size, 1, 64, 64], false);
        let logits = model::forward(&mut tape, &params, batch).unwrap();
        let loss = model::loss(&mut tape, logits, &labels).unwrap();
        let grads = tape.backward(loss, &params.tensors(), false, false).unwrap();

        let grad_values: Vec<Vec<f32>> = grads.iter().map(|&g| tape.values(g).to_vec()).collect();
        let mut slices: Vec<&mut [f32]> =
            theta.entries_mut().iter_mut().map(|e| e.values.as_mut_slice()).collect();
        let grad_slices: Vec<&[f32]> = grad_values.iter().map(|g| g.as_slice()).collect();
        outer_optimizer_step(OuterOptimizer::Adam, &mut slices, &grad_slices, &mut opt, 0.001)
            .unwrap();
    }

    let mut values = Vec::with_capacity(held_out.len() * 4096);
    let mut labels = Vec::with_capacity(held_out.len());
    for (image, label) in &held_out {
        values.extend_from_slice(image);
        labels.push(*label);
    }
    let mut tape: Tape<f32> = Tape::new();
    let params = theta.leaves(&mut tape, true);
    let batch = tape.leaf(values, vec![labels.len(), 1, 64, 64], false);
    let logits = model::forward(&mut tape, &params, batch).unwrap();
    let acc = model::accuracy(tape.values(logits), 4, &labels);
    assert!(acc >= 0.95, "held-out accuracy {acc:.4} < 0.95");
}
