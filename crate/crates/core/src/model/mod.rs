//! The 4-block convolutional classifier: each block is a 3x3 convolution
//! (64 filters, stride 1, zero same-padding) followed by batch
//! normalization over current-batch statistics, ReLU, and 2x2 max pooling.
//! A 64x64 single-channel input is reduced to a 4x4x64 = 1024 feature
//! vector and mapped to N-way logits by one dense layer.

pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{ParamSet, Scalar, Tape, TapeParams, Tensor, TensorError};

pub const BLOCKS: usize = 4;
pub const FILTERS: usize = 64;
pub const INPUT_SIDE: usize = 64;
/// 64 halved by four poolings leaves 4x4 spatial cells.
pub const FEATURE_DIM: usize = 4 * 4 * FILTERS;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_ways: usize,
}

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("batch size {0} too small: batch statistics need at least 2 samples")]
    BatchTooSmall(usize),
    #[error("expected input shape [B,1,{side},{side}], got {got:?}", side = INPUT_SIDE)]
    BadInputShape { got: Vec<usize> },
    #[error("parameter set does not match the model layout: {0}")]
    BadParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameter names, shapes, and order for an N-way model.
pub fn param_layout(num_ways: usize) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    for b in 0..BLOCKS {
        let cin = if b == 0 { 1 } else { FILTERS };
        layout.push((format!("block{}.conv.w", b + 1), vec![FILTERS, cin, 3, 3]));
        layout.push((format!("block{}.bn.gamma", b + 1), vec![FILTERS]));
        layout.push((format!("block{}.bn.beta", b + 1), vec![FILTERS]));
    }
    layout.push(("head.w".to_string(), vec![FEATURE_DIM, num_ways]));
    layout.push(("head.b".to_string(), vec![1, num_ways]));
    layout
}

/// Fan-in-scaled uniform initialization for conv and dense weights;
/// batch-norm scale 1 and shift 0; zero classifier bias. Bit-deterministic
/// for a given (spec, seed).
pub fn init_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> ParamSet<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(spec.num_ways) {
        let n: usize = shape.iter().product();
        let values: Vec<S> = if name.ends_with(".conv.w") {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            (0..n)
                .map(|_| S::from_f64(rng.random_range(-bound..bound)))
                .collect()
        } else if name.ends_with(".gamma") {
            vec![S::one(); n]
        } else if name == "head.w" {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..n)
                .map(|_| S::from_f64(rng.random_range(-bound..bound)))
                .collect()
        } else {
            // bn beta and head bias start at zero
            vec![S::zero(); n]
        };
        params.push(name, shape, values);
    }
    params
}

/// Runs the 4-block network, recording every intermediate on `tape`.
/// Returns N-way logits of shape [B, N].
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &TapeParams,
    batch: Tensor,
) -> Result<Tensor, ModelError> {
    let shape = tape.shape(batch).to_vec();
    let b = match shape.as_slice() {
        [b, 1, h, w] if *h == INPUT_SIDE && *w == INPUT_SIDE => *b,
        _ => return Err(ModelError::BadInputShape { got: shape }),
    };
    if b < 2 {
        return Err(ModelError::BatchTooSmall(b));
    }

    let lookup = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| ModelError::BadParams(format!("missing {name}")))
    };

    let mut x = batch;
    for blk in 1..=BLOCKS {
        let w = lookup(&format!("block{blk}.conv.w"))?;
        let gamma = lookup(&format!("block{blk}.bn.gamma"))?;
        let beta = lookup(&format!("block{blk}.bn.beta"))?;
        let conv = tape.conv2d(x, w)?;
        let bn = tape.batch_norm(conv, gamma, beta, BN_EPS)?;
        let act = tape.relu(bn);
        x = tape.max_pool2d(act)?;
    }

    let flat = tape.reshape(x, vec![b, FEATURE_DIM])?;
    let w = lookup("head.w")?;
    let bias = lookup("head.b")?;
    let proj = tape.matmul(flat, w)?;
    let ones = tape.ones(vec![b, 1]);
    let bias_rows = tape.matmul(ones, bias)?;
    Ok(tape.add(proj, bias_rows)?)
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Tensor,
    labels: &[usize],
) -> Result<Tensor, ModelError> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Fraction of rows whose argmax matches the label (first index on ties).
pub fn accuracy<S: Scalar>(logits: &[S], num_ways: usize, labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len() * num_ways);
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits[row * num_ways..(row + 1) * num_ways];
        let mut best = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Checks that `params` matches the layout of an N-way model.
pub fn validate_params<S: Scalar>(spec: &ModelSpec, params: &ParamSet<S>) -> Result<(), ModelError> {
    let layout = param_layout(spec.num_ways);
    if params.len() != layout.len() {
        return Err(ModelError::BadParams(format!(
            "expected {} entries, got {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape), entry) in layout.iter().zip(params.entries()) {
        if *name != entry.name || *shape != entry.shape {
            return Err(ModelError::BadParams(format!(
                "expected {name} {shape:?}, got {} {:?}",
                entry.name, entry.shape
            )));
        }
    }
    Ok(())
}
