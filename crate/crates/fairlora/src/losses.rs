//! Training objectives: plain cross-entropy, accuracy-gap regularization,
//! clipped inverse-frequency group reweighting, and their combination.
//!
//! The accuracy-gap penalty works on *soft* per-group accuracy — the mean
//! predicted probability of the true class — which is differentiable where
//! hard accuracy is not. Its max-minus-min structure routes a +1 coefficient
//! to the best group's accuracy and a -1 to the worst group's, so samples of
//! the worst group get pushed up while the best group is pushed down.
//! Group statistics are always computed over the groups present in the
//! current batch; a single-group batch therefore contributes a zero gap with
//! zero gradient rather than being skipped.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Vanilla,
    Fr,
    Gr,
    Hybrid,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Vanilla, LossMode::Fr, LossMode::Gr, LossMode::Hybrid];

    pub fn label(self) -> &'static str {
        match self {
            LossMode::Vanilla => "vanilla",
            LossMode::Fr => "fr",
            LossMode::Gr => "gr",
            LossMode::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(LossMode::Vanilla),
            "fr" => Ok(LossMode::Fr),
            "gr" => Ok(LossMode::Gr),
            "hybrid" => Ok(LossMode::Hybrid),
            other => Err(Error::config(format!("unknown loss mode {other:?}"))),
        }
    }

    /// Whether the objective includes the gap penalty (lambda applies).
    pub fn uses_lambda(self) -> bool {
        matches!(self, LossMode::Fr | LossMode::Hybrid)
    }

    /// Whether the objective reweights groups (w_max applies).
    pub fn uses_weights(self) -> bool {
        matches!(self, LossMode::Gr | LossMode::Hybrid)
    }
}

/// Objective selector. `lambda` is ignored for Vanilla/GR and `w_max` for
/// Vanilla/FR. `group_set` fixes the group ordering used for tie-breaks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda: f64,
    pub w_max: f64,
    pub group_set: Vec<String>,
}

impl LossConfig {
    pub fn new(mode: LossMode, lambda: f64, w_max: f64, group_set: Vec<String>) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::config(format!("lambda {lambda} must be >= 0")));
        }
        if w_max < 1.0 {
            return Err(Error::config(format!(
                "w_max {w_max} must be >= 1 (weights live in [1, w_max])"
            )));
        }
        Ok(LossConfig { mode, lambda, w_max, group_set })
    }
}

/// Clipped inverse-frequency weights, `w_s = min(N / N_s, w_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    weights: BTreeMap<String, f64>,
}

impl GroupWeights {
    /// Compute from per-group counts. Every count must be positive and sum
    /// to `total`.
    pub fn compute(counts: &BTreeMap<String, usize>, total: usize, w_max: f64) -> Result<Self> {
        if w_max < 1.0 {
            return Err(Error::config(format!("w_max {w_max} must be >= 1")));
        }
        if counts.is_empty() {
            return Err(Error::contract("weights undefined for an empty group map"));
        }
        let sum: usize = counts.values().sum();
        if sum != total {
            return Err(Error::contract(format!(
                "group counts sum to {sum}, expected total {total}"
            )));
        }
        let mut weights = BTreeMap::new();
        for (name, &n) in counts {
            if n == 0 {
                return Err(Error::contract(format!(
                    "group {name:?} has zero samples; weight undefined"
                )));
            }
            let w = (total as f64 / n as f64).min(w_max);
            weights.insert(name.clone(), w);
        }
        Ok(GroupWeights { weights })
    }

    /// Weights from a dataset's non-empty groups.
    pub fn for_dataset(ds: &crate::data::GroupedDataset, w_max: f64) -> Result<Self> {
        Self::compute(&ds.count_map(), ds.len(), w_max)
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.weights.get(group).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Per-sample quantities every objective is built from. `group` indexes the
/// ordered group set of the batch's dataset.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerm {
    /// -log p(true class), a scalar node.
    pub ce: NodeId,
    /// p(true class), a scalar node.
    pub true_prob: NodeId,
    pub group: usize,
}

/// Derive a sample's loss terms from its 1x2 logits node.
pub fn sample_term(tape: &mut Tape, logits: NodeId, label: u8, group: usize) -> Result<SampleTerm> {
    if label > 1 {
        return Err(Error::contract(format!("label {label} is not binary")));
    }
    let log_probs = tape.log_softmax_rows(logits)?;
    let true_log_prob = tape.entry(log_probs, 0, usize::from(label))?;
    let ce = tape.scale(true_log_prob, -1.0);
    let true_prob = tape.exp(true_log_prob);
    Ok(SampleTerm { ce, true_prob, group })
}

/// Mean true-class probability per group present in the batch, ordered by
/// group index.
#[derive(Debug, Clone)]
pub struct SoftGroupAccuracy {
    entries: Vec<SoftAccEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct SoftAccEntry {
    pub group: usize,
    pub acc: NodeId,
    pub count: usize,
}

impl SoftGroupAccuracy {
    /// Assemble from externally built accuracy nodes (adjoint-inspection
    /// tests construct the group means directly).
    pub fn from_entries(entries: Vec<SoftAccEntry>) -> Self {
        SoftGroupAccuracy { entries }
    }

    pub fn entries(&self) -> &[SoftAccEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_map(&self, tape: &Tape) -> Result<BTreeMap<usize, f64>> {
        self.entries
            .iter()
            .map(|e| Ok((e.group, tape.scalar_value(e.acc)?)))
            .collect()
    }
}

/// Group-mean scalar over `pick`-selected term nodes, per present group.
fn group_means(
    tape: &mut Tape,
    terms: &[SampleTerm],
    pick: impl Fn(&SampleTerm) -> NodeId,
) -> Result<Vec<SoftAccEntry>> {
    let mut groups: Vec<usize> = terms.iter().map(|t| t.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let nodes: Vec<NodeId> =
            terms.iter().filter(|t| t.group == g).map(&pick).collect();
        let coeffs = vec![1.0 / nodes.len() as f64; nodes.len()];
        let mean = tape.affine_combination(&nodes, &coeffs, 0.0)?;
        out.push(SoftAccEntry { group: g, acc: mean, count: nodes.len() });
    }
    Ok(out)
}

/// Differentiable per-group accuracy surrogate: the mean predicted
/// probability of the true class. Empty input gives an empty map.
pub fn soft_group_accuracy(tape: &mut Tape, terms: &[SampleTerm]) -> Result<SoftGroupAccuracy> {
    Ok(SoftGroupAccuracy { entries: group_means(tape, terms, |t| t.true_prob)? })
}

/// Soft accuracy gap: max minus min over the groups present.
#[derive(Debug, Clone, Copy)]
pub struct SoftGap {
    pub gap: NodeId,
    pub argmax_group: usize,
    pub argmin_group: usize,
}

/// Gap between the best and worst soft group accuracies. The backward pass
/// puts +1 on the argmax group's accuracy and -1 on the argmin group's (the
/// same node when only one group is present, collapsing the gap to zero).
pub fn soft_max_acc_gap(tape: &mut Tape, acc: &SoftGroupAccuracy) -> Result<SoftGap> {
    if acc.is_empty() {
        return Err(Error::contract("soft accuracy gap of an empty group map"));
    }
    let nodes: Vec<NodeId> = acc.entries.iter().map(|e| e.acc).collect();
    let packed = tape.concat_scalars(&nodes)?;
    let (max, max_idx) = tape.max_element(packed)?;
    let (min, min_idx) = tape.min_element(packed)?;
    let gap = tape.sub(max, min)?;
    Ok(SoftGap {
        gap,
        argmax_group: acc.entries[max_idx].group,
        argmin_group: acc.entries[min_idx].group,
    })
}

/// Mean cross-entropy over the batch.
pub fn loss_vanilla(tape: &mut Tape, terms: &[SampleTerm]) -> Result<NodeId> {
    if terms.is_empty() {
        return Err(Error::contract("loss of an empty batch"));
    }
    let nodes: Vec<NodeId> = terms.iter().map(|t| t.ce).collect();
    let coeffs = vec![1.0 / nodes.len() as f64; nodes.len()];
    tape.affine_combination(&nodes, &coeffs, 0.0)
}

/// Cross-entropy plus `lambda` times the soft accuracy gap.
pub fn loss_fr(tape: &mut Tape, terms: &[SampleTerm], lambda: f64) -> Result<NodeId> {
    let base = loss_vanilla(tape, terms)?;
    let acc = soft_group_accuracy(tape, terms)?;
    let gap = soft_max_acc_gap(tape, &acc)?;
    tape.affine_combination(&[base, gap.gap], &[1.0, lambda], 0.0)
}

/// Sum over present groups of `w_s` times the group's mean cross-entropy.
pub fn loss_gr(
    tape: &mut Tape,
    terms: &[SampleTerm],
    weights: &GroupWeights,
    group_set: &[String],
) -> Result<NodeId> {
    if terms.is_empty() {
        return Err(Error::contract("loss of an empty batch"));
    }
    let means = group_means(tape, terms, |t| t.ce)?;
    let mut nodes = Vec::with_capacity(means.len());
    let mut coeffs = Vec::with_capacity(means.len());
    for entry in &means {
        let name = group_set.get(entry.group).ok_or_else(|| {
            Error::contract(format!("group index {} outside the group set", entry.group))
        })?;
        let w = weights
            .get(name)
            .ok_or_else(|| Error::MissingGroupWeight(name.clone()))?;
        nodes.push(entry.acc);
        coeffs.push(w);
    }
    tape.affine_combination(&nodes, &coeffs, 0.0)
}

/// Group-reweighted cross-entropy plus `lambda` times the soft accuracy gap.
pub fn loss_hybrid(
    tape: &mut Tape,
    terms: &[SampleTerm],
    weights: &GroupWeights,
    group_set: &[String],
    lambda: f64,
) -> Result<NodeId> {
    let base = loss_gr(tape, terms, weights, group_set)?;
    let acc = soft_group_accuracy(tape, terms)?;
    let gap = soft_max_acc_gap(tape, &acc)?;
    tape.affine_combination(&[base, gap.gap], &[1.0, lambda], 0.0)
}

/// A built batch objective: the scalar loss node plus the gap node when the
/// mode includes the penalty.
pub struct BatchLoss {
    pub loss: NodeId,
    pub soft_gap: Option<NodeId>,
}

/// Dispatch on the configured mode. GR/Hybrid require `weights`.
pub fn batch_loss(
    tape: &mut Tape,
    terms: &[SampleTerm],
    cfg: &LossConfig,
    weights: Option<&GroupWeights>,
) -> Result<BatchLoss> {
    let need_weights = || {
        weights.ok_or_else(|| Error::contract("group weights required for this loss mode"))
    };
    match cfg.mode {
        LossMode::Vanilla => Ok(BatchLoss { loss: loss_vanilla(tape, terms)?, soft_gap: None }),
        LossMode::Fr => {
            let base = loss_vanilla(tape, terms)?;
            let acc = soft_group_accuracy(tape, terms)?;
            let gap = soft_max_acc_gap(tape, &acc)?;
            let loss = tape.affine_combination(&[base, gap.gap], &[1.0, cfg.lambda], 0.0)?;
            Ok(BatchLoss { loss, soft_gap: Some(gap.gap) })
        }
        LossMode::Gr => {
            let loss = loss_gr(tape, terms, need_weights()?, &cfg.group_set)?;
            Ok(BatchLoss { loss, soft_gap: None })
        }
        LossMode::Hybrid => {
            let base = loss_gr(tape, terms, need_weights()?, &cfg.group_set)?;
            let acc = soft_group_accuracy(tape, terms)?;
            let gap = soft_max_acc_gap(tape, &acc)?;
            let loss = tape.affine_combination(&[base, gap.gap], &[1.0, cfg.lambda], 0.0)?;
            Ok(BatchLoss { loss, soft_gap: Some(gap.gap) })
        }
    }
}
