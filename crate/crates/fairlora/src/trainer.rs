//! Deterministic optimization loop: AdamW with decoupled weight decay,
//! linear learning-rate warmup, and gradient accumulation over micro-batches.
//!
//! Batches are plain seeded shuffles (no group stratification), so
//! minority-only micro-batches occur naturally at realistic imbalance; the
//! clipped group weights bound the loss spike such a batch can produce.
//! Group weights for the reweighted objectives are frozen from the full
//! training-set counts before the first epoch.

use crate::autodiff::{DenseMatrix, Tape};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, sample_term, GroupWeights, LossConfig, SampleTerm};
use crate::metrics::{evaluate_with_groups, FairnessReport};
use crate::model::{ForwardMode, ToyModel};
use crate::seeds;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            micro_batch: 2,
            accumulation_steps: 4,
            epochs: 3,
            warmup_steps: 100,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning rate must be >= 0"));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(())
    }

    /// Effective batch size of one optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }
}

/// Linear warmup to the configured rate, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// One row per completed optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean loss of the micro-batches folded into this step.
    pub loss: f64,
    pub lr: f64,
    /// Mean soft accuracy gap over the step's micro-batches, for objectives
    /// that include the penalty.
    pub soft_gap: Option<f64>,
    /// Samples per group inside this step's effective batch, aligned with
    /// the dataset group set.
    pub group_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub group_set: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "step,loss,lr,soft_gap")?;
        for g in &self.group_set {
            write!(out, ",count_{g}")?;
        }
        writeln!(out)?;
        for row in &self.rows {
            write!(out, "{},{},{},", row.step, row.loss, row.lr)?;
            if let Some(gap) = row.soft_gap {
                write!(out, "{gap}")?;
            }
            for c in &row.group_counts {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// AdamW with decoupled weight decay; state per trainable matrix.
struct AdamW {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl AdamW {
    fn new(shapes: &[(usize, usize)]) -> Self {
        AdamW {
            m: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    /// Apply one update; `t` is the 1-based step for bias correction.
    fn update(
        &mut self,
        index: usize,
        theta: &mut DenseMatrix,
        grad: &DenseMatrix,
        lr: f64,
        t: usize,
        cfg: &TrainConfig,
    ) {
        let m = &mut self.m[index];
        let v = &mut self.v[index];
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        for ((th, g), (mi, vi)) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *th *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Train in place. Deterministic in (config, data, seed); frozen weights are
/// never touched. Aborts with the step index if the loss goes non-finite.
pub fn train(
    model: &mut ToyModel,
    ds: &GroupedDataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if loss_cfg.group_set != ds.group_set() {
        return Err(Error::contract(
            "loss config group set does not match the dataset group set",
        ));
    }
    let expected = model.config().seq_len * model.config().input_dim;
    if ds.feature_dim() != expected {
        return Err(Error::contract(format!(
            "dataset feature dim {} != model expectation {}",
            ds.feature_dim(),
            expected
        )));
    }

    let weights = if loss_cfg.mode.uses_weights() {
        Some(GroupWeights::for_dataset(ds, loss_cfg.w_max)?)
    } else {
        None
    };

    let names = model.trainable_names();
    let shapes: Vec<(usize, usize)> = {
        let mut m = model.trainable_mut();
        m.iter_mut().map(|(_, w)| (w.rows(), w.cols())).collect()
    };
    let mut optimizer = AdamW::new(&shapes);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "dropout"));

    let mut history = TrainHistory { group_set: ds.group_set().to_vec(), rows: Vec::new() };
    let mut opt_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let micro_batches: Vec<&[usize]> = order.chunks(cfg.micro_batch).collect();
        for window in micro_batches.chunks(cfg.accumulation_steps) {
            let mut acc: Vec<DenseMatrix> =
                shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
            let mut losses = Vec::with_capacity(window.len());
            let mut gaps = Vec::new();
            let mut group_counts = vec![0usize; ds.group_set().len()];

            for micro in window {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let param_nodes = bound.param_nodes();
                debug_assert_eq!(param_nodes.len(), names.len());

                let mut terms: Vec<SampleTerm> = Vec::with_capacity(micro.len());
                for &i in *micro {
                    let sample = ds.sample(i);
                    let seq = model.sequence_from_features(&sample.features)?;
                    let mut mode = ForwardMode::Train { dropout_rng: &mut dropout_rng };
                    let logits = bound.classify(&mut tape, &seq, &mut mode)?;
                    terms.push(sample_term(
                        &mut tape,
                        logits,
                        sample.label,
                        ds.group_index_of(i),
                    )?);
                    group_counts[ds.group_index_of(i)] += 1;
                }

                let built = batch_loss(&mut tape, &terms, loss_cfg, weights.as_ref())?;
                let loss_val = tape.scalar_value(built.loss)?;
                if !loss_val.is_finite() {
                    return Err(Error::Diverged { step: opt_step, loss: loss_val });
                }
                losses.push(loss_val);
                if let Some(gap) = built.soft_gap {
                    gaps.push(tape.scalar_value(gap)?);
                }

                let grads = tape.backward(built.loss)?;
                for (slot, node) in acc.iter_mut().zip(&param_nodes) {
                    slot.add_scaled(grads.get(*node).expect("param gradient"), 1.0);
                }
            }

            // Average the accumulated micro-batch gradients, then step.
            let inv = 1.0 / window.len() as f64;
            let lr = lr_at(opt_step, cfg);
            let t = opt_step + 1;
            let mut params = model.trainable_mut();
            for (i, (_, theta)) in params.iter_mut().enumerate() {
                let mut grad = acc[i].clone();
                for g in grad.data_mut() {
                    *g *= inv;
                }
                optimizer.update(i, theta, &grad, lr, t, cfg);
            }

            history.rows.push(HistoryRow {
                step: opt_step,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                lr,
                soft_gap: if gaps.is_empty() {
                    None
                } else {
                    Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
                },
                group_counts,
            });
            opt_step += 1;
        }
    }
    Ok(history)
}

/// Hard-prediction evaluation (dropout disabled, argmax ties to class 0).
pub fn evaluate_model(model: &ToyModel, ds: &GroupedDataset) -> Result<FairnessReport> {
    let mut predictions = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    let mut groups = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        predictions.push(model.predict(&s.features)?);
        labels.push(s.label);
        groups.push(s.group.clone());
    }
    evaluate_with_groups(&predictions, &labels, &groups, ds.group_set())
}
