//! Finite-difference gradient oracle.
//!
//! Central differences over forward evaluations only — no reuse of the
//! reverse-mode machinery being checked. Runs in f64 so the 1e-4 relative
//! tolerance is meaningful.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model;
use crate::tensor::{ParamSet, Result, Tape, Tensor};

pub const FD_STEP: f64 = 1e-4;
/// Smaller step for the full-model probe: the composed network has relu and
/// pooling kinks everywhere, and a tighter step shrinks both the truncation
/// term and the chance of a probe straddling a kink.
pub const MODEL_FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const SECOND_ORDER_TOL: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct CheckReport {
    pub cases: usize,
    pub compared: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl CheckReport {
    fn record(&mut self, context: &str, analytic: f64, numeric: f64, tol: f64) {
        self.compared += 1;
        let err = rel_err(analytic, numeric);
        if err > self.max_rel_err {
            self.max_rel_err = err;
        }
        if err > tol {
            self.failures.push(format!(
                "{context}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel err {err:.3e})"
            ));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.cases += other.cases;
        self.compared += other.compared;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// |a-b| scaled by max(|a|, |b|, 1): relative for large gradients,
/// absolute near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

#[derive(Clone, Copy)]
enum Sample {
    /// U(-1, 1)
    Standard,
    /// U(0.5, 2.0) — for ops defined on positive inputs.
    Positive,
    /// |v| in (0.3, 1.0) — keeps relu/step kinks away from the FD step.
    AwayFromZero,
    /// Distinct values with gaps well above the FD step, so pooling
    /// argmaxes cannot flip under perturbation.
    Gapped,
}

struct PrimitiveCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Sample)>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>>,
}

fn weighted_loss(tape: &mut Tape<f64>, out: Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = tape.shape(out).iter().product();
    let w: Vec<f64> = (0..n.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let wl = tape.leaf(w, shape, false);
    let prod = tape.mul(out, wl)?;
    Ok(tape.sum_all(prod))
}

fn sample_values(rng: &mut ChaCha8Rng, n: usize, how: Sample) -> Vec<f64> {
    match how {
        Sample::Standard => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Sample::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Sample::AwayFromZero => (0..n)
            .map(|_| {
                let m = rng.random_range(0.3..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Sample::Gapped => {
            let mut vals: Vec<f64> = (0..n)
                .map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.001))
                .collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            vals
        }
    }
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    let s = Sample::Standard;
    vec![
        PrimitiveCase {
            name: "add",
            inputs: vec![(vec![3, 4], s), (vec![3, 4], s)],
            build: Box::new(|t, x| t.add(x[0], x[1])),
        },
        PrimitiveCase {
            name: "sub",
            inputs: vec![(vec![3, 4], s), (vec![3, 4], s)],
            build: Box::new(|t, x| t.sub(x[0], x[1])),
        },
        PrimitiveCase {
            name: "mul",
            inputs: vec![(vec![3, 4], s), (vec![3, 4], s)],
            build: Box::new(|t, x| t.mul(x[0], x[1])),
        },
        PrimitiveCase {
            name: "scalar_mul",
            inputs: vec![(vec![5], s)],
            build: Box::new(|t, x| Ok(t.scalar_mul(1.7, x[0]))),
        },
        PrimitiveCase {
            name: "add_scalar",
            inputs: vec![(vec![5], s)],
            build: Box::new(|t, x| Ok(t.add_scalar(0.3, x[0]))),
        },
        PrimitiveCase {
            name: "smul_t",
            inputs: vec![(vec![], s), (vec![3, 3], s)],
            build: Box::new(|t, x| t.smul_t(x[0], x[1])),
        },
        PrimitiveCase {
            name: "matmul",
            inputs: vec![(vec![3, 4], s), (vec![4, 2], s)],
            build: Box::new(|t, x| t.matmul(x[0], x[1])),
        },
        PrimitiveCase {
            name: "matmul_nt",
            inputs: vec![(vec![3, 4], s), (vec![2, 4], s)],
            build: Box::new(|t, x| t.matmul_nt(x[0], x[1])),
        },
        PrimitiveCase {
            name: "matmul_tn",
            inputs: vec![(vec![4, 3], s), (vec![4, 2], s)],
            build: Box::new(|t, x| t.matmul_tn(x[0], x[1])),
        },
        PrimitiveCase {
            name: "conv2d",
            inputs: vec![(vec![2, 2, 4, 4], s), (vec![3, 2, 3, 3], s)],
            build: Box::new(|t, x| t.conv2d(x[0], x[1])),
        },
        PrimitiveCase {
            name: "conv2d_input_grad",
            inputs: vec![(vec![2, 3, 4, 4], s), (vec![3, 2, 3, 3], s)],
            build: Box::new(|t, x| t.conv2d_input_grad(x[0], x[1])),
        },
        PrimitiveCase {
            name: "conv2d_weight_grad",
            inputs: vec![(vec![2, 2, 4, 4], s), (vec![2, 3, 4, 4], s)],
            build: Box::new(|t, x| t.conv2d_weight_grad(x[0], x[1])),
        },
        PrimitiveCase {
            name: "relu",
            inputs: vec![(vec![3, 4], Sample::AwayFromZero)],
            build: Box::new(|t, x| Ok(t.relu(x[0]))),
        },
        PrimitiveCase {
            name: "max_pool2d",
            inputs: vec![(vec![2, 2, 4, 4], Sample::Gapped)],
            build: Box::new(|t, x| t.max_pool2d(x[0])),
        },
        PrimitiveCase {
            name: "reshape",
            inputs: vec![(vec![2, 6], s)],
            build: Box::new(|t, x| t.reshape(x[0], vec![3, 4])),
        },
        PrimitiveCase {
            name: "exp",
            inputs: vec![(vec![3, 3], s)],
            build: Box::new(|t, x| Ok(t.exp(x[0]))),
        },
        PrimitiveCase {
            name: "powf",
            inputs: vec![(vec![4], Sample::Positive)],
            build: Box::new(|t, x| Ok(t.powf(x[0], 2.5))),
        },
        PrimitiveCase {
            name: "row_sum",
            inputs: vec![(vec![3, 4], s)],
            build: Box::new(|t, x| t.row_sum(x[0])),
        },
        PrimitiveCase {
            name: "broadcast_row",
            inputs: vec![(vec![3], s)],
            build: Box::new(|t, x| t.broadcast_row(x[0], 4)),
        },
        PrimitiveCase {
            name: "channel_sum",
            inputs: vec![(vec![2, 3, 2, 2], s)],
            build: Box::new(|t, x| t.channel_sum(x[0])),
        },
        PrimitiveCase {
            name: "broadcast_channel",
            inputs: vec![(vec![3], s)],
            build: Box::new(|t, x| t.broadcast_channel(x[0], &[2, 3, 2, 2])),
        },
        PrimitiveCase {
            name: "sum",
            inputs: vec![(vec![7], s)],
            build: Box::new(|t, x| Ok(t.sum_all(x[0]))),
        },
        PrimitiveCase {
            name: "mean",
            inputs: vec![(vec![6], s)],
            build: Box::new(|t, x| Ok(t.mean_all(x[0]))),
        },
        PrimitiveCase {
            name: "broadcast_scalar",
            inputs: vec![(vec![], s)],
            build: Box::new(|t, x| t.broadcast_scalar(x[0], vec![2, 3])),
        },
        PrimitiveCase {
            name: "log_softmax",
            inputs: vec![(vec![3, 4], s)],
            build: Box::new(|t, x| t.log_softmax(x[0])),
        },
        PrimitiveCase {
            name: "batch_norm",
            inputs: vec![(vec![3, 2, 2, 2], s), (vec![2], Sample::Positive), (vec![2], s)],
            build: Box::new(|t, x| t.batch_norm(x[0], x[1], x[2], 1e-5)),
        },
        PrimitiveCase {
            name: "cross_entropy",
            inputs: vec![(vec![4, 3], s)],
            build: Box::new(|t, x| t.cross_entropy(x[0], &[0, 2, 1, 1])),
        },
    ]
}

/// Checks every primitive's reverse-mode gradient against central finite
/// differences, `seeds` random instances each.
pub fn check_primitives(seeds: u64) -> CheckReport {
    let mut report = CheckReport::default();
    for case in primitive_cases() {
        for seed in 0..seeds {
            report.cases += 1;
            check_one_primitive(&case, seed, &mut report);
        }
    }
    report
}

fn check_one_primitive(case: &PrimitiveCase, seed: u64, report: &mut CheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let flat: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|(shape, how)| sample_values(&mut rng, shape.iter().product(), *how))
        .collect();
    let weight_seed = rng.random::<u64>();

    // Analytic gradients.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = case
        .inputs
        .iter()
        .zip(&flat)
        .map(|((shape, _), vals)| tape.leaf(vals.clone(), shape.clone(), true))
        .collect();
    let out = (case.build)(&mut tape, &leaves).expect("primitive case must build");
    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
    let loss = weighted_loss(&mut tape, out, &mut wrng).expect("loss");
    let grads = tape
        .backward(loss, &leaves, false, false)
        .expect("backward on primitive case");
    let analytic: Vec<Vec<f64>> = grads.iter().map(|g| tape.values(*g).to_vec()).collect();

    // Numeric gradients, one input at a time.
    for (which, (shape, _)) in case.inputs.iter().enumerate() {
        let f = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(i, (sh, _))| {
                    let vals = if i == which { x.to_vec() } else { flat[i].clone() };
                    tape.leaf(vals, sh.clone(), false)
                })
                .collect();
            let out = (case.build)(&mut tape, &leaves).expect("primitive case must build");
            let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
            let loss = weighted_loss(&mut tape, out, &mut wrng).expect("loss");
            tape.values(loss)[0]
        };
        let numeric = finite_diff_grad(f, &flat[which], FD_STEP);
        for (elem, (&a, &n)) in analytic[which].iter().zip(&numeric).enumerate() {
            report.record(
                &format!("{}[input {which}][{elem}] seed {seed} shape {shape:?}", case.name),
                a,
                n,
                FIRST_ORDER_TOL,
            );
        }
    }
}

/// Checks the full 4-block model: loss gradient w.r.t. `samples` randomly
/// chosen parameter components (covering every layer) against central
/// finite differences, on a B=2 batch.
pub fn check_model(samples: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = model::ModelSpec { num_ways: 3 };
    let params: ParamSet<f64> = model::init_params(&spec, seed ^ 0xABCD);
    let batch: Vec<f64> = (0..2 * model::INPUT_SIDE * model::INPUT_SIDE)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = [0usize, 2];

    let loss_at = |params: &ParamSet<f64>| -> f64 {
        let mut tape = Tape::new();
        let tp = params.leaves(&mut tape, false);
        let x = tape.leaf(
            batch.clone(),
            vec![2, 1, model::INPUT_SIDE, model::INPUT_SIDE],
            false,
        );
        let logits = model::forward(&mut tape, &tp, x).expect("forward");
        let loss = tape.cross_entropy(logits, &labels).expect("loss");
        tape.values(loss)[0]
    };

    // Analytic gradient of every parameter.
    let mut tape = Tape::new();
    let tp = params.leaves(&mut tape, true);
    let x = tape.leaf(
        batch.clone(),
        vec![2, 1, model::INPUT_SIDE, model::INPUT_SIDE],
        false,
    );
    let logits = model::forward(&mut tape, &tp, x).expect("forward");
    let loss = tape.cross_entropy(logits, &labels).expect("loss");
    let grads = tape
        .backward(loss, &tp.tensors(), false, false)
        .expect("model backward");

    // Central difference at a probe, at two step sizes. A probe whose two
    // estimates disagree straddles a relu/pooling kink (the network has
    // half a million piecewise boundaries, so some probes always will);
    // such probes say nothing about the reverse pass and are resampled. A
    // genuinely wrong gradient still fails: its FD estimates agree with
    // each other while disagreeing with the analytic value.
    let fd_at = |entry: usize, elem: usize, h: f64| -> f64 {
        let mut shifted = params.clone();
        let orig = shifted.entries()[entry].values[elem];
        shifted.entries_mut()[entry].values[elem] = orig + h;
        let fp = loss_at(&shifted);
        shifted.entries_mut()[entry].values[elem] = orig - h;
        let fm = loss_at(&shifted);
        (fp - fm) / (2.0 * h)
    };
    const KINK_TOL: f64 = 2e-5;

    // One probe per layer first, then uniform random probes.
    let mut pending: std::collections::VecDeque<(usize, usize)> = (0..params.len())
        .map(|e| (e, rng.random_range(0..params.entries()[e].values.len())))
        .collect();
    let mut attempts = 0;
    while report.cases < samples && attempts < 4 * samples {
        attempts += 1;
        let (entry, elem) = pending.pop_front().unwrap_or_else(|| {
            let e = rng.random_range(0..params.len());
            (e, rng.random_range(0..params.entries()[e].values.len()))
        });
        let n1 = fd_at(entry, elem, MODEL_FD_STEP);
        let n2 = fd_at(entry, elem, MODEL_FD_STEP / 2.0);
        if rel_err(n1, n2) > KINK_TOL {
            // kink-contaminated; redraw from the same layer to keep coverage
            pending.push_back((entry, rng.random_range(0..params.entries()[entry].values.len())));
            continue;
        }
        report.cases += 1;
        let analytic = tape.values(grads[entry])[elem];
        let name = &params.entries()[entry].name;
        report.record(&format!("model {name}[{elem}]"), analytic, n1, FIRST_ORDER_TOL);
    }
    report
}

/// Verifies nested backward (gradient-of-gradient) against central finite
/// differences of the analytic first gradient, on a small dense network.
pub fn check_second_order(seeds: u64) -> CheckReport {
    let mut report = CheckReport::default();
    for seed in 0..seeds {
        report.cases += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed);
        let w1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Directional derivative of the gradient: d/dw <c, g(w)>.
        let grad_fn = |wflat: &[f64], create: bool| -> (Vec<f64>, Option<Vec<f64>>) {
            let mut tape: Tape<f64> = Tape::new();
            let w1t = tape.leaf(wflat[..6].to_vec(), vec![2, 3], true);
            let w2t = tape.leaf(wflat[6..].to_vec(), vec![3, 1], true);
            let xt = tape.leaf(x.clone(), vec![1, 2], false);
            let h = tape.matmul(xt, w1t).unwrap();
            let e = tape.exp(h);
            let a = tape.mul(h, e).unwrap();
            let o = tape.matmul(a, w2t).unwrap();
            let loss0 = tape.sum_all(o);
            let sq = tape.mul(loss0, loss0).unwrap();
            let grads = tape.backward(sq, &[w1t, w2t], create, false).unwrap();
            let gflat: Vec<f64> = grads
                .iter()
                .flat_map(|g| tape.values(*g).to_vec())
                .collect();
            if !create {
                return (gflat, None);
            }
            // <c, g> then a second backward pass through the first.
            let mut dot = tape.scalar(0.0);
            let mut off = 0;
            for g in &grads {
                let n = tape.values(*g).len();
                let shape = tape.shape(*g).to_vec();
                let cl = tape.leaf(c[off..off + n].to_vec(), shape, false);
                let p = tape.mul(*g, cl).unwrap();
                let ps = tape.sum_all(p);
                dot = tape.add(dot, ps).unwrap();
                off += n;
            }
            let hess = tape.backward(dot, &[w1t, w2t], false, false).unwrap();
            let hflat = hess.iter().flat_map(|g| tape.values(*g).to_vec()).collect();
            (gflat, Some(hflat))
        };

        let wflat: Vec<f64> = w1.iter().chain(&w2).copied().collect();
        let (_, hess) = grad_fn(&wflat, true);
        let hess = hess.unwrap();
        let numeric = finite_diff_grad(
            |w| {
                let (g, _) = grad_fn(w, false);
                g.iter().zip(&c).map(|(gi, ci)| gi * ci).sum()
            },
            &wflat,
            FD_STEP,
        );
        for (i, (&a, &n)) in hess.iter().zip(&numeric).enumerate() {
            report.record(&format!("second_order[{i}] seed {seed}"), a, n, SECOND_ORDER_TOL);
        }
    }
    report
}
