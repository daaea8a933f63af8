//! Criticality-partitioned optimisation.
//!
//! Each trainable scalar is scored by `|∂L/∂θ · θ|`. Scalars at or above the
//! cutoff take an ordinary gradient step; the rest are shrunk towards zero
//! instead of following the loss. Nothing is pruned: a shrunk scalar can
//! become crucial again at the next repartition.

mod partition;
mod train;
mod update;

pub use partition::{criticality_scores, nearest_rank, partition, CriticalityPartition, ThresholdRule};
pub use train::{
    accuracy, argmax, predict_all, run, train, train_sgd, EpochLog, StepRecord, TrainConfig, TrainingLog, Updater,
};
pub use update::{masked_mean_abs, sgd_step, shrink, step, OptState, Repartition, ShrinkRule};

use crate::error::Result;
use crate::numerics::{cross_entropy_slice, Param, Tensor};

/// A model the training loop can drive.
///
/// Parameters travel as [`Param`] lists in a fixed order; gradients from
/// [`Trainable::batch_gradient`] are aligned with that order.
pub trait Trainable {
    fn export_params(&self) -> Vec<Param>;

    /// Writes parameter values back, applying any model constraints.
    fn import_params(&mut self, params: &[Param]) -> Result<()>;

    /// Mean cross-entropy over the batch and its gradient.
    fn batch_gradient(&self, xs: &[&[f64]], labels: &[usize]) -> Result<(BatchStats, Vec<Tensor>)>;

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Scalars worth logging per epoch.
    fn diagnostics(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    fn trainable_count(&self) -> usize {
        self.export_params().iter().map(Param::len).sum()
    }
}

/// Running loss/accuracy accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    /// Mean loss once [`BatchStats::finish`] has run, a running sum before.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    finished: bool,
}

impl BatchStats {
    pub fn record(&mut self, logits: &[f64], label: usize) -> Result<()> {
        self.loss += cross_entropy_slice(logits, label)?;
        if argmax(logits) == label {
            self.correct += 1;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &BatchStats) {
        let sum = if other.finished {
            other.loss * other.count as f64
        } else {
            other.loss
        };
        self.loss += sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn finish(&mut self) {
        if !self.finished {
            self.loss /= self.count.max(1) as f64;
            self.finished = true;
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}
