//! Experiment plans and protocol runners: single plans, optimizer/rate and
//! training-size ablation grids, and artificial-to-real transfer, each
//! emitting a [`ResultTable`] plus raw per-episode records.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::corpus::load_corpus;
use crate::data::{DataError, EpisodeSpec};
use crate::meta::{
    meta_test, meta_train, InnerLrTable, MetaConfig, MetaError, OuterOptimizer, TestResult,
    TrainOutcome,
};
use crate::model::checkpoint::{self, CheckpointError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("runtime budget of {limit_secs}s exceeded")]
    RuntimeExceeded { limit_secs: u64 },
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

fn default_query() -> usize {
    5
}
fn default_trials() -> usize {
    5
}
fn default_test_episodes() -> usize {
    10
}
fn default_max_runtime() -> u64 {
    3600
}

/// A complete, versioned description of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    /// Corpus manifest path; relative paths resolve against the plan file.
    pub manifest: PathBuf,
    pub meta_train_classes: Vec<usize>,
    pub meta_test_classes: Vec<usize>,
    /// Training-set size per class (the paper sweeps 4/6/9/12).
    pub train_samples_per_class: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query samples per class during meta-training; meta-testing always
    /// uses every remaining segment of the drawn classes.
    #[serde(default = "default_query")]
    pub query_per_class: usize,
    #[serde(default)]
    pub cfg: MetaConfig,
    /// Independent train+test repetitions with distinct seeds.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Meta-test episodes per trial.
    #[serde(default = "default_test_episodes")]
    pub test_episodes: usize,
    /// Wall-clock budget; exceeding it fails the run explicitly.
    #[serde(default = "default_max_runtime")]
    pub max_runtime_secs: u64,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<ExperimentPlan, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Plan(format!("{}: {e}", path.display())))?;
        if plan.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                plan.manifest = dir.join(&plan.manifest);
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Plan(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let shared: Vec<usize> = self
            .meta_train_classes
            .iter()
            .copied()
            .filter(|l| self.meta_test_classes.contains(l))
            .collect();
        if !shared.is_empty() {
            return Err(HarnessError::Plan(format!(
                "train and test classes must be disjoint; both contain {shared:?}"
            )));
        }
        if self.trials == 0 {
            return Err(HarnessError::Plan("trials must be >= 1".into()));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.query_per_class == 0 {
            return Err(HarnessError::Plan(
                "n_way, k_shot and query_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One row of a results table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub mean_acc: f64,
    pub std: f64,
    pub trials: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and (n-1)-denominator standard deviation.
pub fn stats(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,mean_acc,std,trials,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{:.3}\n",
                r.setting, r.mean_acc, r.std, r.trials, r.seconds
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.setting.len())
            .chain(std::iter::once("setting".len()))
            .max()
            .unwrap_or(7);
        let mut out = format!(
            "{:width$}  {:>9}  {:>9}  {:>6}  {:>9}\n",
            "setting", "mean_acc", "std", "trials", "seconds"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:width$}  {:>9.4}  {:>9.4}  {:>6}  {:>9.1}\n",
                r.setting, r.mean_acc, r.std, r.trials, r.seconds
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let csv = dir.join("result.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| io_err(&csv, e))?;
        let txt = dir.join("result.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| io_err(&txt, e))?;
        Ok(())
    }
}

/// One meta-test episode's accuracy, as written to raw.ndjson.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub setting: String,
    pub trial: usize,
    pub episode: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub row: ResultRow,
    pub raw: Vec<EpisodeRecord>,
    pub tests: Vec<TestResult>,
}

/// Runs one plan: per trial, meta-train on the restricted training pools and
/// meta-test on the held-out classes. Artifacts land in `out_dir` when
/// given: per-trial checkpoint + rate table + curve, pooled raw episode
/// records, and the result table.
pub fn run_plan(
    plan: &ExperimentPlan,
    setting: &str,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<PlanOutcome, HarnessError> {
    plan.validate()?;
    let start = Instant::now();
    let budget = Duration::from_secs(plan.max_runtime_secs);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let (pools, _manifest) = load_corpus(&plan.manifest)?;
    let train_pools = pools
        .restrict_classes(&plan.meta_train_classes)?
        .subsample(
            plan.train_samples_per_class,
            crate::seeds::mix_seed(plan.cfg.seed, 100, 0),
        )?;
    let test_pools = pools.restrict_classes(&plan.meta_test_classes)?;
    let spec = EpisodeSpec {
        n_way: plan.n_way,
        k_shot: plan.k_shot,
        query_per_class: plan.query_per_class,
        class_pool: plan.meta_train_classes.clone(),
    };

    let mut raw = Vec::new();
    let mut tests = Vec::new();
    let mut all_accs = Vec::new();
    for trial in 0..plan.trials {
        let mut cfg = plan.cfg.clone();
        cfg.seed = crate::seeds::mix_seed(plan.cfg.seed, 200, trial as u64);

        let mut curve_file = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("curve_trial{trial}.ndjson"));
                Some(std::io::BufWriter::new(
                    std::fs::File::create(&path).map_err(|e| io_err(&path, e))?,
                ))
            }
            None => None,
        };
        let outcome: TrainOutcome<f32> =
            meta_train(&cfg, &train_pools, &spec, threads, |record| {
                if start.elapsed() > budget {
                    return Err(MetaError::Aborted("runtime budget exceeded".into()));
                }
                if let Some(f) = &mut curve_file {
                    let line = serde_json::to_string(record).expect("curve record serializes");
                    writeln!(f, "{line}").map_err(|e| MetaError::Aborted(e.to_string()))?;
                }
                Ok(())
            })
            .map_err(|e| match e {
                MetaError::Aborted(msg) if msg.contains("runtime budget") => {
                    HarnessError::RuntimeExceeded { limit_secs: plan.max_runtime_secs }
                }
                other => other.into(),
            })?;
        drop(curve_file);

        if let Some(dir) = out_dir {
            checkpoint::save(&outcome.theta, &dir.join(format!("trial{trial}.mflt")))?;
            let path = dir.join(format!("trial{trial}.lrtable.json"));
            let text = serde_json::to_string_pretty(&outcome.lr_table)
                .expect("rate table serializes");
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }

        let test = run_meta_test(plan, &outcome.theta, &outcome.lr_table, &test_pools, trial)?;
        for (episode, &accuracy) in test.per_episode.iter().enumerate() {
            raw.push(EpisodeRecord { setting: setting.to_string(), trial, episode, accuracy });
            all_accs.push(accuracy);
        }
        tests.push(test);

        if start.elapsed() > budget {
            return Err(HarnessError::RuntimeExceeded { limit_secs: plan.max_runtime_secs });
        }
    }

    let (mean_acc, std) = stats(&all_accs);
    let row = ResultRow {
        setting: setting.to_string(),
        mean_acc,
        std,
        trials: plan.trials,
        seconds: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_raw(&raw, &dir.join("raw.ndjson"))?;
        ResultTable { rows: vec![row.clone()] }.write(dir)?;
    }
    Ok(PlanOutcome { row, raw, tests })
}

/// Meta-tests an already-trained model under a plan's protocol.
pub fn run_meta_test(
    plan: &ExperimentPlan,
    theta: &crate::tensor::ParamSet<f32>,
    table: &InnerLrTable,
    test_pools: &crate::data::SegmentPools,
    trial: usize,
) -> Result<TestResult, HarnessError> {
    Ok(meta_test(
        theta,
        table,
        test_pools,
        plan.n_way,
        plan.k_shot,
        plan.test_episodes,
        plan.cfg.inner_steps,
        &plan.meta_train_classes,
        crate::seeds::mix_seed(plan.cfg.seed, 300, trial as u64),
    )?)
}

pub fn write_raw(records: &[EpisodeRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("episode record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Which axis an ablation sweeps.
#[derive(Clone, Debug)]
pub enum AblationGrid {
    /// Optimizer x inner rate, as in the paper's 3x3 study.
    OptimizerLr {
        optimizers: Vec<OuterOptimizer>,
        rates: Vec<f64>,
    },
    /// Training-set size sweep.
    TrainSize { sizes: Vec<usize> },
}

fn optimizer_name(opt: OuterOptimizer) -> &'static str {
    match opt {
        OuterOptimizer::Adam => "adam",
        OuterOptimizer::RmsProp => "rmsprop",
        OuterOptimizer::Sgd => "sgd",
    }
}

/// One `run_plan` per grid cell on a shared corpus, each cell with its own
/// seed stream. Returns a matrix-shaped table, one row per cell.
pub fn run_ablation(
    base: &ExperimentPlan,
    grid: &AblationGrid,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<ResultTable, HarnessError> {
    let mut cells: Vec<(String, ExperimentPlan)> = Vec::new();
    match grid {
        AblationGrid::OptimizerLr { optimizers, rates } => {
            for &opt in optimizers {
                for &rate in rates {
                    let mut plan = base.clone();
                    plan.cfg.outer_optimizer = opt;
                    plan.cfg.alpha = rate;
                    cells.push((format!("{} lr={rate}", optimizer_name(opt)), plan));
                }
            }
        }
        AblationGrid::TrainSize { sizes } => {
            for &size in sizes {
                let mut plan = base.clone();
                plan.train_samples_per_class = size;
                cells.push((format!("train_size={size}"), plan));
            }
        }
    }
    if cells.is_empty() {
        return Err(HarnessError::Plan("ablation grid is empty".into()));
    }

    let mut table = ResultTable::default();
    let mut raw = Vec::new();
    for (i, (setting, mut plan)) in cells.into_iter().enumerate() {
        plan.cfg.seed = crate::seeds::mix_seed(base.cfg.seed, 400, i as u64);
        let cell_dir = out_dir.map(|d| d.join(format!("cell{i:02}")));
        let outcome = run_plan(&plan, &setting, cell_dir.as_deref(), threads)?;
        table.rows.push(outcome.row);
        raw.extend(outcome.raw);
    }
    if let Some(dir) = out_dir {
        write_raw(&raw, &dir.join("raw.ndjson"))?;
        table.write(dir)?;
    }
    Ok(table)
}

/// Meta-trains on `source_classes` only and meta-tests on `target_classes`
/// only, for each K in `shots`; appends an overall-mean row. Overlapping
/// source/target lists are a hard error.
pub fn run_artificial_to_real(
    base: &ExperimentPlan,
    source_classes: &[usize],
    target_classes: &[usize],
    shots: &[usize],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<ResultTable, HarnessError> {
    let shared: Vec<usize> = source_classes
        .iter()
        .copied()
        .filter(|l| target_classes.contains(l))
        .collect();
    if !shared.is_empty() {
        return Err(HarnessError::Plan(format!(
            "source and target classes must be disjoint; both contain {shared:?}"
        )));
    }
    if shots.is_empty() {
        return Err(HarnessError::Plan("no shot counts given".into()));
    }

    let mut table = ResultTable::default();
    let mut raw = Vec::new();
    for (i, &k) in shots.iter().enumerate() {
        let mut plan = base.clone();
        plan.meta_train_classes = source_classes.to_vec();
        plan.meta_test_classes = target_classes.to_vec();
        plan.k_shot = k;
        plan.cfg.seed = crate::seeds::mix_seed(base.cfg.seed, 500, i as u64);
        let setting = format!("{k}-shot");
        let cell_dir = out_dir.map(|d| d.join(format!("shot{k:02}")));
        let outcome = run_plan(&plan, &setting, cell_dir.as_deref(), threads)?;
        table.rows.push(outcome.row);
        raw.extend(outcome.raw);
    }

    let means: Vec<f64> = table.rows.iter().map(|r| r.mean_acc).collect();
    let (mean, std) = stats(&means);
    table.rows.push(ResultRow {
        setting: "overall".to_string(),
        mean_acc: mean,
        std,
        trials: table.rows.iter().map(|r| r.trials).sum(),
        seconds: table.rows.iter().map(|r| r.seconds).sum(),
    });

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_raw(&raw, &dir.join("raw.ndjson"))?;
        table.write(dir)?;
    }
    Ok(table)
}
