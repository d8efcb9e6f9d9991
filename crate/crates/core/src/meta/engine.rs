//! The adaptation and meta-gradient core: inner-loop updates recorded on the
//! tape (so the outer loss can differentiate through them), per-task
//! meta-gradients, the outer step over a task batch, meta-training, and
//! meta-testing.

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, EpisodeBatch, EpisodeSpec, Example, SegmentPools};
use crate::model::{self, ModelSpec};
use crate::seeds::mix_seed;
use crate::tensor::{ParamSet, Scalar, Tape, TapeParams, Tensor};

use super::optimizer::{outer_optimizer_step, OptState};
use super::{InnerLrTable, MetaConfig, MetaError, MetaOrder, RATE_CLAMP_MIN};

/// Adaptation outcome for one task, evaluated on its query half.
#[derive(Clone, Debug)]
pub struct AdaptResult<S> {
    pub phi: ParamSet<S>,
    pub support_loss_trace: Vec<f64>,
    pub query_loss: f64,
    pub query_accuracy: f64,
}

/// Per-task meta-gradients: one flat gradient per parameter entry (model
/// order), plus rate gradients `[layer][step]` when rates are learnable.
#[derive(Clone, Debug)]
pub struct TaskGradients<S> {
    pub theta: Vec<Vec<S>>,
    pub lr: Option<Vec<Vec<f64>>>,
    pub query_loss: f64,
    pub query_acc: f64,
    pub support_losses: Vec<f64>,
}

/// Loads a batch of examples as a constant [B,1,64,64] tensor plus labels.
fn batch_tensor<S: Scalar>(tape: &mut Tape<S>, examples: &[Example]) -> (Tensor, Vec<usize>) {
    let side = crate::data::IMAGE_SIDE;
    let mut values = Vec::with_capacity(examples.len() * side * side);
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        values.extend(ex.image.iter().map(|&v| S::from_f64(v as f64)));
        labels.push(ex.label);
    }
    let t = tape.leaf(values, vec![examples.len(), 1, side, side], false);
    (t, labels)
}

/// Puts the rate table on the tape as scalar leaves, `[layer][step]`.
fn rate_leaves<S: Scalar>(
    tape: &mut Tape<S>,
    table: &InnerLrTable,
    steps: usize,
    requires_grad: bool,
) -> Vec<Vec<Tensor>> {
    table
        .rates
        .iter()
        .map(|row| {
            (0..steps)
                .map(|s| tape.leaf(vec![S::from_f64(row[s])], vec![], requires_grad))
                .collect()
        })
        .collect()
}

/// `steps` gradient-descent updates on the inner loss (Eq. 3 / Eq. 5):
/// step s maps layer l through `phi_l <- phi_l - lr[l][s] * g_l`. With
/// `second_order` the update is recorded differentiably, so the caller's
/// outer loss sees d(phi)/d(theta); otherwise each inner gradient is
/// detached and theta only reaches the outer loss through the identity part
/// of the update (the first-order approximation).
fn adapt_on_tape<S, F>(
    tape: &mut Tape<S>,
    start: &TapeParams,
    rates: &[Vec<Tensor>],
    steps: usize,
    second_order: bool,
    mut inner_loss: F,
) -> Result<(TapeParams, Vec<f64>), MetaError>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &TapeParams) -> Result<Tensor, MetaError>,
{
    let mut current = start.clone();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = inner_loss(tape, &current)?;
        let loss_value = tape.values(loss)[0].to_f64();
        if !loss_value.is_finite() {
            return Err(MetaError::NonFiniteLoss { step });
        }
        trace.push(loss_value);

        let wrt = current.tensors();
        let grads = tape.backward(loss, &wrt, second_order, false)?;
        let mut next = Vec::with_capacity(current.len());
        for (l, ((name, param), g)) in current.entries.iter().zip(grads).enumerate() {
            let g = if second_order { g } else { tape.detach(g, false) };
            let delta = tape.smul_t(rates[l][step], g)?;
            next.push((name.clone(), tape.sub(*param, delta)?));
        }
        current = TapeParams { entries: next };
    }
    Ok((current, trace))
}

/// Meta-gradient of one task, generic over the inner and outer losses so
/// closed-form oracles can drive the exact code path the model uses.
///
/// The outer closure returns the scalar query loss plus a ready-computed
/// accuracy. Gradients flow to every parameter entry and, when
/// `learn_rates`, to each rate `lr[layer][step]`.
pub fn task_meta_gradient<S, FI, FO>(
    theta: &ParamSet<S>,
    table: &InnerLrTable,
    steps: usize,
    order: MetaOrder,
    learn_rates: bool,
    inner_loss: FI,
    outer_loss: FO,
) -> Result<TaskGradients<S>, MetaError>
where
    S: Scalar,
    FI: FnMut(&mut Tape<S>, &TapeParams) -> Result<Tensor, MetaError>,
    FO: FnOnce(&mut Tape<S>, &TapeParams) -> Result<(Tensor, f64), MetaError>,
{
    assert_eq!(table.num_layers(), theta.len(), "rate table rows must match layers");
    assert!(table.steps() >= steps, "rate table must cover every inner step");

    let mut tape: Tape<S> = Tape::new();
    let theta_leaves = theta.leaves(&mut tape, true);
    let rates = rate_leaves(&mut tape, table, steps, learn_rates);

    let second_order = order == MetaOrder::FullSecondOrder;
    let (phi, support_losses) =
        adapt_on_tape(&mut tape, &theta_leaves, &rates, steps, second_order, inner_loss)?;

    let (qloss, query_acc) = outer_loss(&mut tape, &phi)?;
    let query_loss = tape.values(qloss)[0].to_f64();
    if !query_loss.is_finite() {
        return Err(MetaError::NonFiniteLoss { step: steps });
    }

    let mut wrt = theta_leaves.tensors();
    if learn_rates {
        wrt.extend(rates.iter().flatten().copied());
    }
    // allow_unused: with zero inner steps the rate leaves never enter the graph
    let grads = tape.backward(qloss, &wrt, false, true)?;

    let theta_grads = grads[..theta.len()]
        .iter()
        .map(|&g| tape.values(g).to_vec())
        .collect();
    let lr_grads = learn_rates.then(|| {
        grads[theta.len()..]
            .chunks(steps)
            .map(|row| row.iter().map(|&g| tape.values(g)[0].to_f64()).collect())
            .collect()
    });

    Ok(TaskGradients {
        theta: theta_grads,
        lr: lr_grads,
        query_loss,
        query_acc,
        support_losses,
    })
}

fn forward_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &TapeParams,
    batch: Tensor,
    labels: &[usize],
) -> Result<Tensor, MetaError> {
    let logits = model::forward(tape, params, batch)?;
    Ok(model::loss(tape, logits, labels)?)
}

fn forward_eval<S: Scalar>(
    tape: &mut Tape<S>,
    params: &TapeParams,
    batch: Tensor,
    labels: &[usize],
    num_ways: usize,
) -> Result<(Tensor, f64), MetaError> {
    let logits = model::forward(tape, params, batch)?;
    let acc = model::accuracy(tape.values(logits), num_ways, labels);
    let loss = model::loss(tape, logits, labels)?;
    Ok((loss, acc))
}

/// One task's meta-gradient with the convolutional model on an episode.
fn run_task<S: Scalar>(
    theta: &ParamSet<S>,
    table: &InnerLrTable,
    task: &EpisodeBatch,
    cfg: &MetaConfig,
) -> Result<TaskGradients<S>, MetaError> {
    let num_ways = task.class_map.len();
    let mut support_t = None;
    let mut query_t = None;
    task_meta_gradient(
        theta,
        table,
        cfg.inner_steps,
        cfg.order,
        cfg.rates_learn(),
        |tape, params| {
            let (batch, labels) =
                support_t.get_or_insert_with(|| batch_tensor(tape, &task.support));
            forward_loss(tape, params, *batch, &labels.clone())
        },
        |tape, params| {
            let (batch, labels) = query_t.get_or_insert_with(|| batch_tensor(tape, &task.query));
            forward_eval(tape, params, *batch, &labels.clone(), num_ways)
        },
    )
}

/// Adapts `theta` on a task's support half without meta-tracking and scores
/// the query half. `theta` and `table` are read-only; adaptation happens on
/// copies.
pub fn inner_adapt<S: Scalar>(
    theta: &ParamSet<S>,
    table: &InnerLrTable,
    task: &EpisodeBatch,
    steps: usize,
) -> Result<AdaptResult<S>, MetaError> {
    let num_ways = task.class_map.len();
    let mut tape: Tape<S> = Tape::new();
    let theta_leaves = theta.leaves(&mut tape, true);
    let rates = rate_leaves(&mut tape, table, steps, false);
    let (support, support_labels) = batch_tensor(&mut tape, &task.support);

    let (phi, support_loss_trace) =
        adapt_on_tape(&mut tape, &theta_leaves, &rates, steps, false, |tape, params| {
            forward_loss(tape, params, support, &support_labels)
        })?;

    let (query, query_labels) = batch_tensor(&mut tape, &task.query);
    let (qloss, query_accuracy) = forward_eval(&mut tape, &phi, query, &query_labels, num_ways)?;
    let query_loss = tape.values(qloss)[0].to_f64();
    Ok(AdaptResult {
        phi: ParamSet::from_tape(&tape, &phi),
        support_loss_trace,
        query_loss,
        query_accuracy,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepDiagnostics {
    pub mean_query_loss: f64,
    pub mean_query_acc: f64,
}

/// One outer update (Eq. 4): per-task meta-gradients are summed in task
/// order and fed to the outer optimizer, for the parameters and — in
/// Learnable mode — the rate table. Tasks may run on `threads` worker
/// threads; the fixed-order reduction keeps results schedule-independent.
pub fn meta_step<S: Scalar>(
    theta: &mut ParamSet<S>,
    table: &mut InnerLrTable,
    tasks: &[EpisodeBatch],
    cfg: &MetaConfig,
    opt_theta: &mut OptState<S>,
    opt_rates: &mut OptState<f64>,
    threads: usize,
) -> Result<StepDiagnostics, MetaError> {
    let results = run_tasks(theta, table, tasks, cfg, threads)?;

    let mut theta_sum: Vec<Vec<S>> = theta
        .entries()
        .iter()
        .map(|e| vec![S::zero(); e.values.len()])
        .collect();
    let mut rate_sum = vec![vec![0.0f64; cfg.inner_steps]; table.num_layers()];
    let mut diag = StepDiagnostics::default();
    for task in &results {
        for (acc, g) in theta_sum.iter_mut().zip(&task.theta) {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(lr) = &task.lr {
            for (acc, g) in rate_sum.iter_mut().zip(lr) {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        diag.mean_query_loss += task.query_loss;
        diag.mean_query_acc += task.query_acc;
    }
    let n = tasks.len().max(1) as f64;
    diag.mean_query_loss /= n;
    diag.mean_query_acc /= n;

    let mut params: Vec<&mut [S]> = theta
        .entries_mut()
        .iter_mut()
        .map(|e| e.values.as_mut_slice())
        .collect();
    let grads: Vec<&[S]> = theta_sum.iter().map(|g| g.as_slice()).collect();
    outer_optimizer_step(cfg.outer_optimizer, &mut params, &grads, opt_theta, cfg.outer_lr)?;

    if cfg.rates_learn() {
        let mut rows: Vec<&mut [f64]> = table
            .rates
            .iter_mut()
            .map(|r| &mut r[..cfg.inner_steps])
            .collect();
        let grads: Vec<&[f64]> = rate_sum.iter().map(|g| g.as_slice()).collect();
        outer_optimizer_step(cfg.outer_optimizer, &mut rows, &grads, opt_rates, cfg.outer_lr)?;
        if cfg.clamp_rates {
            table.clamp_min(RATE_CLAMP_MIN);
        }
    }

    Ok(diag)
}

fn run_tasks<S: Scalar>(
    theta: &ParamSet<S>,
    table: &InnerLrTable,
    tasks: &[EpisodeBatch],
    cfg: &MetaConfig,
    threads: usize,
) -> Result<Vec<TaskGradients<S>>, MetaError> {
    if threads <= 1 || tasks.len() <= 1 {
        return tasks.iter().map(|t| run_task(theta, table, t, cfg)).collect();
    }
    let chunk = tasks.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|chunk| scope.spawn(move || -> Result<Vec<_>, MetaError> {
                chunk.iter().map(|t| run_task(theta, table, t, cfg)).collect()
            }))
            .collect();
        let mut out = Vec::with_capacity(tasks.len());
        for h in handles {
            out.extend(h.join().expect("task worker panicked")?);
        }
        Ok(out)
    })
}

/// Per-iteration training-curve record (newline-delimited JSON downstream).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub query_loss: f64,
    pub query_acc: f64,
    pub lr_table: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub theta: ParamSet<S>,
    pub lr_table: InnerLrTable,
    pub curve: Vec<TrainRecord>,
}

/// Runs `cfg.iterations` outer steps over freshly sampled episode batches.
/// Fully deterministic given `cfg.seed` (single-threaded, or any thread
/// count thanks to the fixed-order reduction). The callback sees every
/// curve record and may abort the run by returning an error.
pub fn meta_train<S: Scalar>(
    cfg: &MetaConfig,
    train_pools: &SegmentPools,
    spec: &EpisodeSpec,
    threads: usize,
    mut on_iter: impl FnMut(&TrainRecord) -> Result<(), MetaError>,
) -> Result<TrainOutcome<S>, MetaError> {
    let model_spec = ModelSpec { num_ways: spec.n_way };
    let mut theta: ParamSet<S> = model::init_params(&model_spec, mix_seed(cfg.seed, 0, 0));
    let mut table = InnerLrTable::new(theta.len(), cfg.inner_steps, cfg.alpha);

    let lens: Vec<usize> = theta.entries().iter().map(|e| e.values.len()).collect();
    let mut opt_theta = OptState::new(&lens);
    let mut opt_rates = OptState::new(&vec![cfg.inner_steps; table.num_layers()]);

    let mut curve = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let tasks = (0..cfg.meta_batch)
            .map(|t| sample_episode(train_pools, spec, mix_seed(cfg.seed, 1 + iter as u64, t as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let diag = meta_step(&mut theta, &mut table, &tasks, cfg, &mut opt_theta, &mut opt_rates, threads)?;
        let record = TrainRecord {
            iter,
            query_loss: diag.mean_query_loss,
            query_acc: diag.mean_query_acc,
            lr_table: table.rates.clone(),
        };
        on_iter(&record)?;
        curve.push(record);
    }
    Ok(TrainOutcome { theta, lr_table: table, curve })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestResult {
    pub mean_acc: f64,
    pub std: f64,
    pub per_episode: Vec<f64>,
}

/// Meta-testing: `episodes` independent tasks from the held-out pools, each
/// adapted on K support shots and scored on all remaining segments of its
/// drawn classes. Labels shared with `train_labels` are a hard error; theta
/// and the table are never mutated.
pub fn meta_test<S: Scalar>(
    theta: &ParamSet<S>,
    table: &InnerLrTable,
    test_pools: &SegmentPools,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    inner_steps: usize,
    train_labels: &[usize],
    seed: u64,
) -> Result<TestResult, MetaError> {
    let labels = test_pools.labels();
    let shared: Vec<usize> = labels.iter().copied().filter(|l| train_labels.contains(l)).collect();
    if !shared.is_empty() {
        return Err(MetaError::ClassLeakage { shared });
    }

    let min_pool = test_pools.min_pool_len(&labels)?;
    if min_pool <= k_shot {
        let label = *labels
            .iter()
            .min_by_key(|&&l| test_pools.pool(l).map_or(0, |p| p.len()))
            .expect("audited pools are nonempty");
        return Err(crate::data::DataError::PoolTooSmall {
            label,
            need: k_shot + 1,
            have: min_pool,
        }
        .into());
    }
    let spec = EpisodeSpec {
        n_way,
        k_shot,
        query_per_class: min_pool - k_shot,
        class_pool: labels,
    };

    let mut per_episode = Vec::with_capacity(episodes);
    for e in 0..episodes {
        if n_way == 1 {
            // Degenerate protocol: one candidate label makes every
            // prediction correct, with or without adaptation.
            per_episode.push(1.0);
            continue;
        }
        let task = sample_episode(test_pools, &spec, mix_seed(seed, 3, e as u64))?;
        per_episode.push(inner_adapt(theta, table, &task, inner_steps)?.query_accuracy);
    }

    let n = per_episode.len().max(1) as f64;
    let mean_acc = per_episode.iter().sum::<f64>() / n;
    let std = if per_episode.len() > 1 {
        (per_episode.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(TestResult { mean_acc, std, per_episode })
}
