use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::partition::{criticality_scores, partition, CriticalityPartition};
use super::update::{masked_mean_abs, sgd_step, step, OptState, Repartition};
use super::{BatchStats, Trainable};
use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            patience: Some(20),
        }
    }
}

/// Which update the loop applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Updater {
    Sgd { eta: f64 },
    Robust(OptState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean crucial fraction over the epoch's steps (1.0 for plain SGD).
    pub crucial_fraction: f64,
    /// Mean `|θ|` over the non-crucial set after the epoch's last step.
    pub noncrucial_mean_abs: Option<f64>,
    pub diagnostics: Vec<(&'static str, f64)>,
}

/// Per-step trace used to check shrinkage between repartitions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Incremented every time the partition is recomputed.
    pub generation: usize,
    pub crucial_fraction: f64,
    pub noncrucial_mean_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Mini-batch training with the criticality-partitioned update.
pub fn train<M: Trainable>(model: &mut M, data: &Dataset, state: &OptState, cfg: &TrainConfig) -> Result<TrainingLog> {
    state.validate()?;
    run(model, data, Updater::Robust(*state), cfg)
}

/// Mini-batch gradient descent on every trainable scalar.
pub fn train_sgd<M: Trainable>(model: &mut M, data: &Dataset, eta: f64, cfg: &TrainConfig) -> Result<TrainingLog> {
    run(model, data, Updater::Sgd { eta }, cfg)
}

pub fn run<M: Trainable>(model: &mut M, data: &Dataset, updater: Updater, cfg: &TrainConfig) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let mut log = TrainingLog::default();
    let mut current: Option<CriticalityPartition> = None;
    let mut generation = 0usize;
    let mut steps_since = 0usize;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, streams::SHUFFLE, epoch as u64));
        let mut epoch_stats = BatchStats::default();
        let mut fractions = Vec::new();
        let mut last_noncrucial = None;
        if let Updater::Robust(OptState {
            repartition: Repartition::EveryEpoch,
            ..
        }) = updater
        {
            current = None;
        }

        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| data.row(i)).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (stats, grads) = model.batch_gradient(&xs, &ys)?;
            if !stats.loss.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite loss at epoch {epoch} (batch of {})",
                    batch.len()
                )));
            }
            epoch_stats.merge(&stats);
            let mut params = model.export_params();
            for (p, g) in params.iter_mut().zip(grads) {
                p.set_grad(g)?;
            }
            match updater {
                Updater::Sgd { eta } => {
                    sgd_step(&mut params, eta)?;
                    model.import_params(&params)?;
                    fractions.push(1.0);
                }
                Updater::Robust(st) => {
                    let due = match st.repartition {
                        Repartition::EverySteps(n) => current.is_none() || steps_since >= n,
                        Repartition::EveryEpoch => current.is_none(),
                    };
                    if due {
                        let scores = criticality_scores(&params)?;
                        current = Some(partition(&scores, st.threshold)?);
                        generation += 1;
                        steps_since = 0;
                    }
                    let part = current.as_ref().expect("partition set above");
                    step(&mut params, part, &st)?;
                    steps_since += 1;
                    model.import_params(&params)?;
                    let after = model.export_params();
                    let nc = masked_mean_abs(&after, &part.noncrucial_mask());
                    fractions.push(part.crucial_fraction());
                    last_noncrucial = nc;
                    log.steps.push(StepRecord {
                        generation,
                        crucial_fraction: part.crucial_fraction(),
                        noncrucial_mean_abs: nc,
                    });
                }
            }
        }
        epoch_stats.finish();
        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_stats.loss,
            accuracy: epoch_stats.accuracy(),
            crucial_fraction: fractions.iter().sum::<f64>() / fractions.len().max(1) as f64,
            noncrucial_mean_abs: last_noncrucial,
            diagnostics: model.diagnostics(),
        });

        if let Some(patience) = cfg.patience {
            if epoch_stats.loss < best * (1.0 - 1e-4) {
                best = epoch_stats.loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Predicted class per row, evaluated in parallel on read-only model state.
pub fn predict_all<M: Trainable + Sync>(model: &M, data: &Dataset) -> Result<Vec<usize>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| model.predict(data.row(i)).map(|l| argmax(&l)))
        .collect()
}

pub fn accuracy<M: Trainable + Sync>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("cannot score an empty dataset".into()));
    }
    let preds = predict_all(model, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
