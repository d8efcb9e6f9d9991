//! Acceptance criteria A1-A8, exercised end to end and reported one line per
//! criterion (run with `--nocapture` to see the lines on success).
//!
//! A single #[test] keeps the criteria sequential so the timing budgets are
//! measured on an uncontended core.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use metafault::data::corpus::{write_synth_corpus, SynthCorpusOptions};
use metafault::data::synth::{distributed_taxonomy, punctual_taxonomy};
use metafault::data::{fft_magnitude_values, SegmentPools};
use metafault::gradcheck;
use metafault::harness::{run_plan, ExperimentPlan, SCHEMA_VERSION};
use metafault::meta::{
    meta_test, meta_train, task_meta_gradient, InnerLrMode, InnerLrTable, MetaConfig, MetaError,
    MetaOrder, TaskGradients,
};
use metafault::model::{self, ModelSpec};
use metafault::tensor::ParamSet;

struct Scorecard {
    lines: Vec<String>,
    failed: usize,
}

impl Scorecard {
    fn record(&mut self, id: &str, name: &str, result: Result<String, String>) {
        let line = match result {
            Ok(detail) => format!("{id} {name}: PASS ({detail})"),
            Err(detail) => {
                self.failed += 1;
                format!("{id} {name}: FAIL ({detail})")
            }
        };
        println!("{line}");
        self.lines.push(line);
    }

    fn skip(&mut self, id: &str, name: &str, reason: &str) {
        let line = format!("{id} {name}: SKIP ({reason})");
        println!("{line}");
        self.lines.push(line);
    }
}

fn a1_gradient_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut report = gradcheck::check_primitives(4);
    report.merge(gradcheck::check_model(40, 7));
    report.merge(gradcheck::check_second_order(4));
    let secs = start.elapsed().as_secs_f64();
    let mut detail = String::new();
    write!(
        detail,
        "{} cases, {} comparisons, max rel err {:.2e}, {:.0}s",
        report.cases, report.compared, report.max_rel_err, secs
    )
    .unwrap();
    if report.cases < 100 {
        return Err(format!("only {} cases (need >= 100)", report.cases));
    }
    if !report.passed() {
        return Err(format!("{} comparisons out of tolerance; first: {}", report.failures.len(), report.failures[0]));
    }
    if secs > 120.0 {
        return Err(format!("took {secs:.0}s (budget 120s)"));
    }
    Ok(detail)
}

fn quad_oracle(order: MetaOrder, steps: usize) -> TaskGradients<f64> {
    let mut theta: ParamSet<f64> = ParamSet::new();
    theta.push("theta", vec![], vec![0.0]);
    let table = InnerLrTable::new(1, steps, 0.25);
    task_meta_gradient(
        &theta,
        &table,
        steps,
        order,
        false,
        |tape, params| {
            let th = params.entries[0].1;
            let a = tape.leaf(vec![1.0], vec![], false);
            let d = tape.sub(th, a)?;
            Ok(tape.mul(d, d)?)
        },
        |tape, params| {
            let ph = params.entries[0].1;
            Ok((tape.mul(ph, ph)?, 0.0))
        },
    )
    .expect("oracle task runs")
}

fn a2_meta_gradient_oracle() -> Result<String, String> {
    let start = Instant::now();
    // 1 step: phi = 0.5; second-order 2*phi*(1-2a) = 0.5, first-order 2*phi = 1
    let checks = [
        (quad_oracle(MetaOrder::FullSecondOrder, 1).theta[0][0], 0.5, "1-step second-order"),
        (quad_oracle(MetaOrder::FirstOrder, 1).theta[0][0], 1.0, "1-step first-order"),
        // 2 steps: phi2 = 0.75, d phi2/d theta = 0.25 -> 0.375; first-order 1.5
        (quad_oracle(MetaOrder::FullSecondOrder, 2).theta[0][0], 0.375, "2-step second-order"),
        (quad_oracle(MetaOrder::FirstOrder, 2).theta[0][0], 1.5, "2-step first-order"),
    ];
    for (got, want, what) in checks {
        if (got - want).abs() >= 1e-10 {
            return Err(format!("{what}: {got} vs {want}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 1.0 {
        return Err(format!("took {secs:.2}s (budget 1s)"));
    }
    Ok(format!("all four closed forms within 1e-10, {secs:.3}s"))
}

fn synth_corpus(dir: &Path) -> std::path::PathBuf {
    let mut classes = punctual_taxonomy(10);
    classes.extend(distributed_taxonomy(3));
    write_synth_corpus(dir, &classes, &SynthCorpusOptions::default(), 0)
        .expect("corpus generation")
}

/// The A3 protocol: 7 meta-train classes (healthy + ball + inner race), the
/// 3 outer-race severities held out, 3-way 5-shot, 9 samples per class.
fn a3_plan(manifest: &Path) -> ExperimentPlan {
    ExperimentPlan {
        schema_version: SCHEMA_VERSION,
        manifest: manifest.to_path_buf(),
        meta_train_classes: (1..=7).collect(),
        meta_test_classes: vec![8, 9, 10],
        train_samples_per_class: 9,
        n_way: 3,
        k_shot: 5,
        query_per_class: 4,
        cfg: MetaConfig {
            inner_lr_mode: InnerLrMode::Learnable,
            iterations: 300,
            meta_batch: 1,
            order: MetaOrder::FirstOrder,
            seed: 42,
            ..MetaConfig::default()
        },
        trials: 1,
        test_episodes: 10,
        max_runtime_secs: 900,
    }
}

fn a3_end_to_end(manifest: &Path, out: &Path) -> Result<String, String> {
    let start = Instant::now();
    let plan = a3_plan(manifest);
    let outcome = run_plan(&plan, "a3", Some(out), 1).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let trained = outcome.row.mean_acc;

    // Chance reference: untrained theta with zero inner rates, so adaptation
    // is the identity and predictions are independent of each episode's
    // random class-to-slot permutation — per-query accuracy is then exactly
    // Bernoulli(1/3). 100 episodes x 12 queries puts the 0.05 band at ~3.7
    // sigma. (At a nonzero rate even a random init learns from the 15
    // support samples and sits above chance, which is not what the chance
    // oracle measures.)
    let (pools, _) =
        metafault::data::corpus::load_corpus(manifest).map_err(|e| e.to_string())?;
    let test_pools = pools.restrict_classes(&plan.meta_test_classes).map_err(|e| e.to_string())?;
    let theta: ParamSet<f32> = model::init_params(&ModelSpec { num_ways: 3 }, 1);
    let table = InnerLrTable::new(theta.len(), 1, 0.0);
    let chance = meta_test(&theta, &table, &test_pools, 3, 5, 100, 1, &plan.meta_train_classes, 1)
        .map_err(|e| e.to_string())?
        .mean_acc;

    if trained < 0.90 {
        return Err(format!("trained accuracy {trained:.4} < 0.90"));
    }
    if (chance - 1.0 / 3.0).abs() > 0.05 {
        return Err(format!("untrained accuracy {chance:.4} outside 0.33 +/- 0.05"));
    }
    if secs > 900.0 {
        return Err(format!("took {secs:.0}s (budget 900s)"));
    }
    Ok(format!("trained {trained:.4} vs untrained {chance:.4}, {secs:.0}s"))
}

fn a4_learnable_benefit(manifest: &Path) -> Result<String, String> {
    // Budget note: 40 outer iterations instead of A3's 300 so ten training
    // runs (5 seeds x 2 modes) fit a desk-scale CPU budget; the criterion is
    // directional and does not depend on full convergence.
    let mut accs = [Vec::new(), Vec::new()];
    let mut max_delta = 0.0f64;
    for seed in 0..5u64 {
        for (i, mode) in [InnerLrMode::Learnable, InnerLrMode::Fixed].into_iter().enumerate() {
            let mut plan = a3_plan(manifest);
            plan.cfg.inner_lr_mode = mode;
            plan.cfg.iterations = 40;
            plan.cfg.seed = 1000 + seed;
            let outcome = run_plan(&plan, "a4", None, 1).map_err(|e| e.to_string())?;
            accs[i].push(outcome.row.mean_acc);
        }
        // table movement: a short learnable training pass per seed
        let mut cfg = a3_plan(manifest).cfg;
        cfg.iterations = 5;
        cfg.seed = 2000 + seed;
        let (pools, _) =
            metafault::data::corpus::load_corpus(manifest).map_err(|e| e.to_string())?;
        let train_pools = pools
            .restrict_classes(&(1..=7).collect::<Vec<_>>())
            .and_then(|p| p.subsample(9, cfg.seed))
            .map_err(|e| e.to_string())?;
        let spec = metafault::data::EpisodeSpec {
            n_way: 3,
            k_shot: 5,
            query_per_class: 4,
            class_pool: (1..=7).collect(),
        };
        let out = meta_train::<f32>(&cfg, &train_pools, &spec, 1, |_| Ok(()))
            .map_err(|e: MetaError| e.to_string())?;
        let init = InnerLrTable::new(out.lr_table.num_layers(), cfg.inner_steps, cfg.alpha);
        max_delta = max_delta.max(out.lr_table.max_abs_delta(&init));
    }
    let learnable = accs[0].iter().sum::<f64>() / 5.0;
    let fixed = accs[1].iter().sum::<f64>() / 5.0;
    if learnable < fixed - 0.01 {
        return Err(format!("learnable {learnable:.4} < fixed {fixed:.4} - 1pt"));
    }
    if max_delta <= 1e-4 {
        return Err(format!("lr table barely moved (max |delta| = {max_delta:.2e})"));
    }
    Ok(format!(
        "learnable {learnable:.4} vs fixed {fixed:.4} over 5 seeds, table moved {max_delta:.2e}"
    ))
}

fn a5_determinism(manifest: &Path, scratch: &Path) -> Result<String, String> {
    // Budget note: the A3 pipeline with 8 outer iterations — byte-identity
    // does not depend on how long the run is, only on the code path.
    let run = |out: &Path| -> Result<(), String> {
        let mut plan = a3_plan(manifest);
        plan.cfg.iterations = 8;
        plan.test_episodes = 4;
        run_plan(&plan, "a5", Some(out), 1).map_err(|e| e.to_string())?;
        Ok(())
    };
    let (dir_a, dir_b) = (scratch.join("run_a"), scratch.join("run_b"));
    run(&dir_a)?;
    run(&dir_b)?;
    let artifacts = [
        "trial0.mflt",
        "trial0.lrtable.json",
        "curve_trial0.ndjson",
        "raw.ndjson",
        "result.csv",
    ];
    // The trailing `seconds` column of the result table records measured
    // wall-clock time and is the one output field that cannot be identical
    // across runs; it is blanked before comparison. Everything numeric —
    // checkpoint, rate table, curve, per-episode records, accuracy columns —
    // must match byte for byte.
    let normalize = |name: &str, bytes: Vec<u8>| -> Vec<u8> {
        if name != "result.csv" {
            return bytes;
        }
        let text = String::from_utf8(bytes).expect("result.csv is UTF-8");
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                out.push_str(line);
            } else {
                let cut = line.rfind(',').expect("data row has a seconds column");
                out.push_str(&line[..cut]);
                out.push_str(",-");
            }
            out.push('\n');
        }
        out.into_bytes()
    };
    for name in artifacts {
        let a = std::fs::read(dir_a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(dir_b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if normalize(name, a) != normalize(name, b) {
            return Err(format!("{name} differs between identical runs"));
        }
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs (wall-time column excluded)",
        artifacts.len()
    ))
}

fn a6_protocol_fidelity(manifest: &Path) -> Result<String, String> {
    let (pools, _) = metafault::data::corpus::load_corpus(manifest).map_err(|e| e.to_string())?;

    // 1-way meta-test is exactly 1.0
    let theta: ParamSet<f32> = model::init_params(&ModelSpec { num_ways: 1 }, 0);
    let table = InnerLrTable::new(theta.len(), 1, 0.01);
    let one_way_pools = pools.restrict_classes(&[8]).map_err(|e| e.to_string())?;
    let r = meta_test(&theta, &table, &one_way_pools, 1, 5, 10, 1, &[1, 2], 0)
        .map_err(|e| e.to_string())?;
    if r.mean_acc != 1.0 || r.std != 0.0 {
        return Err(format!("1-way returned {} +/- {}", r.mean_acc, r.std));
    }

    // leakage audit rejects overlapping plans at both layers
    let mut plan = a3_plan(manifest);
    plan.meta_test_classes = vec![7, 8];
    if plan.validate().is_ok() {
        return Err("plan validation accepted overlapping class lists".into());
    }
    let leaky = pools.restrict_classes(&[7, 8]).map_err(|e| e.to_string())?;
    let theta2: ParamSet<f32> = model::init_params(&ModelSpec { num_ways: 2 }, 0);
    let table2 = InnerLrTable::new(theta2.len(), 1, 0.01);
    match meta_test(&theta2, &table2, &leaky, 2, 5, 2, 1, &(1..=7).collect::<Vec<_>>(), 0) {
        Err(MetaError::ClassLeakage { shared }) if shared == vec![7] => {}
        other => return Err(format!("leakage audit returned {other:?}")),
    }

    // Fixed alpha is bit-identical to a frozen Learnable table
    let train_pools = pools
        .restrict_classes(&(1..=7).collect::<Vec<_>>())
        .and_then(|p| p.subsample(9, 3))
        .map_err(|e| e.to_string())?;
    let spec = metafault::data::EpisodeSpec {
        n_way: 3,
        k_shot: 5,
        query_per_class: 2,
        class_pool: (1..=7).collect(),
    };
    let base = MetaConfig {
        iterations: 3,
        meta_batch: 1,
        order: MetaOrder::FirstOrder,
        seed: 11,
        ..MetaConfig::default()
    };
    let fixed = MetaConfig { inner_lr_mode: InnerLrMode::Fixed, ..base.clone() };
    let frozen =
        MetaConfig { inner_lr_mode: InnerLrMode::Learnable, freeze_lr_table: true, ..base };
    let a = meta_train::<f32>(&fixed, &train_pools, &spec, 1, |_| Ok(())).map_err(|e| e.to_string())?;
    let b = meta_train::<f32>(&frozen, &train_pools, &spec, 1, |_| Ok(())).map_err(|e| e.to_string())?;
    if a.theta != b.theta {
        return Err("fixed-alpha and frozen-learnable trajectories diverged".into());
    }
    Ok("1-way exact, leakage rejected, fixed == frozen-learnable".into())
}

fn a7_paper_scale(scorecard: &mut Scorecard) {
    // Paper-scale bands need the real CWRU / Paderborn corpora. Point
    // METAFAULT_A7_PLAN at a plan file over such a corpus to activate.
    match std::env::var("METAFAULT_A7_PLAN") {
        Ok(path) => {
            let result = (|| -> Result<String, String> {
                let plan = ExperimentPlan::load(Path::new(&path)).map_err(|e| e.to_string())?;
                let outcome = run_plan(&plan, "a7", None, 1).map_err(|e| e.to_string())?;
                let acc = outcome.row.mean_acc;
                if (acc - 0.9036).abs() > 0.05 {
                    return Err(format!("accuracy {acc:.4} outside 90.36% +/- 5pt"));
                }
                Ok(format!("accuracy {acc:.4} within the Table-IV band"))
            })();
            scorecard.record("A7", "paper-scale band", result);
        }
        Err(_) => scorecard.skip(
            "A7",
            "paper-scale band",
            "data-dependent; set METAFAULT_A7_PLAN to a CWRU-scale plan to activate",
        ),
    }
}

fn a8_fft_against_brute_force() -> Result<String, String> {
    let mut worst = 0.0f64;
    for n in 1..=64usize {
        let values: Vec<f64> =
            (0..n).map(|i| (((i * 31 + n * 7) % 17) as f64 - 8.0) / 3.0).collect();
        let fast = fft_magnitude_values(&values);
        for k in 0..n {
            let (mut re, mut im) = (0.0f64, 0.0);
            for (j, &v) in values.iter().enumerate() {
                let ang = -std::f64::consts::TAU * (k * j) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let brute = re.hypot(im);
            let rel = (fast[k] - brute).abs() / brute.abs().max(1.0);
            worst = worst.max(rel);
            if rel >= 1e-9 {
                return Err(format!("length {n} bin {k}: rel err {rel:.2e}"));
            }
        }
    }
    Ok(format!("lengths 1..=64, worst rel err {worst:.2e}"))
}

// Sanity guard used by the synthetic-data criteria: the pools the corpus
// yields must support the A3 protocol at all.
fn corpus_sanity(pools: &SegmentPools) -> Result<(), String> {
    let labels = pools.labels();
    if !(1..=10).all(|l| labels.contains(&l)) {
        return Err(format!("corpus labels {labels:?} missing 1..=10"));
    }
    Ok(())
}

#[test]
fn acceptance_criteria() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let manifest = synth_corpus(&scratch.path().join("corpus"));
    let (pools, _) = metafault::data::corpus::load_corpus(&manifest).expect("corpus loads");
    corpus_sanity(&pools).expect("corpus supports the protocol");

    let mut card = Scorecard { lines: Vec::new(), failed: 0 };
    card.record("A1", "gradient oracle", a1_gradient_oracle());
    card.record("A2", "meta-gradient oracle", a2_meta_gradient_oracle());
    card.record("A3", "end-to-end synthetic few-shot", a3_end_to_end(&manifest, &scratch.path().join("a3")));
    card.record("A4", "learnable-lr benefit", a4_learnable_benefit(&manifest));
    card.record("A5", "determinism", a5_determinism(&manifest, scratch.path()));
    card.record("A6", "protocol fidelity", a6_protocol_fidelity(&manifest));
    a7_paper_scale(&mut card);
    card.record("A8", "FFT vs brute-force DFT", a8_fft_against_brute_force());

    assert_eq!(card.failed, 0, "failed criteria:\n{}", card.lines.join("\n"));
}
