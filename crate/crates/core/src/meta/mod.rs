//! MAML training and adaptation: inner-loop gradient adaptation with fixed
//! or learnable per-layer/per-step rates, the meta-gradient outer loop over
//! task batches, outer optimizer variants, and meta-testing.

mod engine;
mod optimizer;

pub use engine::{
    inner_adapt, meta_step, meta_test, meta_train, task_meta_gradient, AdaptResult,
    StepDiagnostics, TaskGradients, TestResult, TrainOutcome, TrainRecord,
};
pub use optimizer::{outer_optimizer_step, OptState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Error, Debug)]
pub enum MetaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at inner step {step}")]
    NonFiniteLoss { step: usize },
    #[error("train/test class leakage: labels {shared:?} appear on both sides")]
    ClassLeakage { shared: Vec<usize> },
    #[error("optimizer state does not align with parameters: {0}")]
    OptimizerShapeMismatch(String),
    #[error("run aborted: {0}")]
    Aborted(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLrMode {
    Fixed,
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam,
    RmsProp,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOrder {
    FullSecondOrder,
    FirstOrder,
}

/// Everything a meta-training run depends on. Fully serializable so plans
/// can pin it; unknown fields are rejected to prevent silent config drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr_mode: InnerLrMode,
    /// Fixed inner rate, or the learnable table's initial value.
    pub alpha: f64,
    pub outer_optimizer: OuterOptimizer,
    /// Outer step size beta.
    pub outer_lr: f64,
    /// Tasks per outer step.
    pub meta_batch: usize,
    /// Total outer steps.
    pub iterations: usize,
    pub order: MetaOrder,
    pub seed: u64,
    /// Keeps a Learnable table pinned at its current values (no gradient
    /// flow); a frozen Learnable run must match a Fixed run bit for bit.
    pub freeze_lr_table: bool,
    /// Clamps learned rates at 1e-6 for users who want them positive.
    pub clamp_rates: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_steps: 1,
            inner_lr_mode: InnerLrMode::Fixed,
            alpha: 0.01,
            outer_optimizer: OuterOptimizer::Adam,
            outer_lr: 0.001,
            meta_batch: 25,
            iterations: 1500,
            order: MetaOrder::FullSecondOrder,
            seed: 0,
            freeze_lr_table: false,
            clamp_rates: false,
        }
    }
}

impl MetaConfig {
    /// True when the table receives outer-loop gradients.
    pub fn rates_learn(&self) -> bool {
        self.inner_lr_mode == InnerLrMode::Learnable && !self.freeze_lr_table
    }
}

pub const RATE_CLAMP_MIN: f64 = 1e-6;

/// One inner rate per parameter layer per inner step (Eq. 5 coefficients).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerLrTable {
    /// rates[layer][step]
    pub rates: Vec<Vec<f64>>,
}

impl InnerLrTable {
    pub fn new(num_layers: usize, steps: usize, init: f64) -> Self {
        InnerLrTable { rates: vec![vec![init; steps]; num_layers] }
    }

    pub fn num_layers(&self) -> usize {
        self.rates.len()
    }

    pub fn steps(&self) -> usize {
        self.rates.first().map_or(0, |r| r.len())
    }

    pub fn get(&self, layer: usize, step: usize) -> f64 {
        self.rates[layer][step]
    }

    /// Largest elementwise departure from another table.
    pub fn max_abs_delta(&self, other: &InnerLrTable) -> f64 {
        self.rates
            .iter()
            .flatten()
            .zip(other.rates.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp_min(&mut self, min: f64) {
        for row in &mut self.rates {
            for r in row {
                *r = r.max(min);
            }
        }
    }
}
