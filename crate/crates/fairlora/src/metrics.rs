//! Hard evaluation metrics: overall and per-group accuracy, the accuracy
//! gap, and rate-based fairness gaps (equalized odds, demographic parity)
//! for comparison.
//!
//! Everything is tallied with integer counts first and divided once at the
//! end, so reports are exactly permutation-invariant.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;

/// Evaluation summary over one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub overall_accuracy: f64,
    /// Accuracy per group, keyed by group name; empty groups omitted.
    pub per_group_accuracy: BTreeMap<String, f64>,
    /// Max minus min of `per_group_accuracy`.
    pub max_acc_gap: f64,
    /// Max minus min of per-group true-positive rates.
    pub tpr_gap: f64,
    /// Max minus min of per-group false-positive rates.
    pub fpr_gap: f64,
    /// Max minus min of per-group positive-prediction rates.
    pub demographic_parity_gap: f64,
    pub per_group_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default, Clone)]
struct Tally {
    n: usize,
    correct: usize,
    tp: usize,
    r#fn: usize,
    fp: usize,
    tn: usize,
    positive_predictions: usize,
}

impl Tally {
    fn tpr(&self) -> Option<f64> {
        let pos = self.tp + self.r#fn;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    fn fpr(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }

    fn positive_rate(&self) -> f64 {
        self.positive_predictions as f64 / self.n as f64
    }
}

fn tally_groups(
    predictions: &[u8],
    labels: &[u8],
    groups: &[String],
) -> Result<BTreeMap<String, Tally>> {
    if predictions.len() != labels.len() || predictions.len() != groups.len() {
        return Err(Error::contract(format!(
            "array lengths differ: {} predictions, {} labels, {} groups",
            predictions.len(),
            labels.len(),
            groups.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("evaluation of an empty prediction set"));
    }
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    for ((&pred, &label), group) in predictions.iter().zip(labels).zip(groups) {
        if pred > 1 || label > 1 {
            return Err(Error::contract("predictions and labels must be binary"));
        }
        let t = tallies.entry(group.clone()).or_default();
        t.n += 1;
        t.correct += usize::from(pred == label);
        t.positive_predictions += usize::from(pred == 1);
        match (label, pred) {
            (1, 1) => t.tp += 1,
            (1, 0) => t.r#fn += 1,
            (0, 1) => t.fp += 1,
            (0, 0) => t.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(tallies)
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut any = false;
    for v in values {
        any = true;
        max = max.max(v);
        min = min.min(v);
    }
    if any {
        max - min
    } else {
        0.0
    }
}

/// Full report over hard predictions. `expected_groups` (for example the
/// training group set) lets the caller learn about groups absent from this
/// evaluation; they are omitted from the rates with a recorded warning.
pub fn evaluate_with_groups(
    predictions: &[u8],
    labels: &[u8],
    groups: &[String],
    expected_groups: &[String],
) -> Result<FairnessReport> {
    let tallies = tally_groups(predictions, labels, groups)?;
    let mut warnings = Vec::new();
    for g in expected_groups {
        if !tallies.contains_key(g) {
            warnings.push(format!("group {g:?} has no samples; omitted from the report"));
        }
    }

    let mut per_group_accuracy = BTreeMap::new();
    let mut per_group_counts = BTreeMap::new();
    let mut total = 0usize;
    let mut correct = 0usize;
    for (g, t) in &tallies {
        per_group_accuracy.insert(g.clone(), t.accuracy());
        per_group_counts.insert(g.clone(), t.n);
        total += t.n;
        correct += t.correct;
    }

    for (g, t) in &tallies {
        if t.tpr().is_none() {
            warnings.push(format!("group {g:?} has no positive labels; omitted from TPR gap"));
        }
        if t.fpr().is_none() {
            warnings.push(format!("group {g:?} has no negative labels; omitted from FPR gap"));
        }
    }

    Ok(FairnessReport {
        overall_accuracy: correct as f64 / total as f64,
        max_acc_gap: spread(tallies.values().map(Tally::accuracy)),
        tpr_gap: spread(tallies.values().filter_map(Tally::tpr)),
        fpr_gap: spread(tallies.values().filter_map(Tally::fpr)),
        demographic_parity_gap: spread(tallies.values().map(Tally::positive_rate)),
        per_group_accuracy,
        per_group_counts,
        warnings,
    })
}

/// Report with the group universe taken from the data itself.
pub fn evaluate(predictions: &[u8], labels: &[u8], groups: &[String]) -> Result<FairnessReport> {
    evaluate_with_groups(predictions, labels, groups, &[])
}

/// (TPR gap, FPR gap): each is max minus min of the per-group rate over the
/// groups where the rate is defined.
pub fn equalized_odds_gaps(
    predictions: &[u8],
    labels: &[u8],
    groups: &[String],
) -> Result<(f64, f64)> {
    let tallies = tally_groups(predictions, labels, groups)?;
    Ok((
        spread(tallies.values().filter_map(Tally::tpr)),
        spread(tallies.values().filter_map(Tally::fpr)),
    ))
}

/// Max minus min of per-group positive-prediction rates.
pub fn demographic_parity_gap(predictions: &[u8], groups: &[String]) -> Result<f64> {
    let labels = vec![0u8; predictions.len()];
    let tallies = tally_groups(predictions, &labels, groups)?;
    Ok(spread(tallies.values().map(Tally::positive_rate)))
}
