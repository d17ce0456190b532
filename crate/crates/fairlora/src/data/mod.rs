//! Dataset representation, synthetic generation, and JSONL persistence.

mod jsonl;
mod synth;

pub use jsonl::{load_jsonl, save_jsonl};
pub use synth::{generate_synthetic, reference_synth, GroupSpec, SynthConfig};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One labeled, group-annotated example. `features` is the flattened
/// sequence, row-major over (position, token feature).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u8,
    pub group: String,
}

/// Samples plus per-group index bookkeeping. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    samples: Vec<Sample>,
    group_set: Vec<String>,
    group_counts: Vec<usize>,
    /// Index into `group_set`, one entry per sample.
    group_indices: Vec<usize>,
    feature_dim: usize,
}

impl GroupedDataset {
    /// Build from samples, inferring the group set in first-appearance order.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut group_set = Vec::new();
        for s in &samples {
            if !group_set.contains(&s.group) {
                group_set.push(s.group.clone());
            }
        }
        Self::with_group_set(samples, group_set)
    }

    /// Build with an explicit ordered group set; groups may have zero
    /// samples (splits of imbalanced data), but every sample's group must
    /// appear in the set.
    pub fn with_group_set(samples: Vec<Sample>, group_set: Vec<String>) -> Result<Self> {
        let mut feature_dim = 0;
        let mut group_counts = vec![0usize; group_set.len()];
        let mut group_indices = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Schema(format!(
                    "sample {}: label {} is not binary",
                    i, s.label
                )));
            }
            if i == 0 {
                feature_dim = s.features.len();
            } else if s.features.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "sample {}: feature dimension {} != {}",
                    i,
                    s.features.len(),
                    feature_dim
                )));
            }
            let gi = group_set.iter().position(|g| g == &s.group).ok_or_else(|| {
                Error::Schema(format!("sample {}: group {:?} not in group set", i, s.group))
            })?;
            group_counts[gi] += 1;
            group_indices.push(gi);
        }
        Ok(GroupedDataset { samples, group_set, group_counts, group_indices, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Ordered group identifiers. Max/min tie-breaks across this crate
    /// resolve to the lowest index in this ordering.
    pub fn group_set(&self) -> &[String] {
        &self.group_set
    }

    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    /// Group index of sample `i`.
    pub fn group_index_of(&self, i: usize) -> usize {
        self.group_indices[i]
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.group_set.iter().position(|g| g == name)
    }

    /// Flattened feature length (0 for an empty dataset).
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Counts keyed by group name, zero-count groups omitted.
    pub fn count_map(&self) -> BTreeMap<String, usize> {
        self.group_set
            .iter()
            .zip(&self.group_counts)
            .filter(|(_, &c)| c > 0)
            .map(|(g, &c)| (g.clone(), c))
            .collect()
    }

    /// Deterministic stratified split into train/val/test. Each group is
    /// shuffled and partitioned so every split matches the parent's group
    /// proportions to within one sample.
    pub fn stratified_split(&self, ratios: SplitRatios, seed: u64) -> Result<SplitResult> {
        ratios.validate()?;
        let parts = [ratios.train, ratios.val, ratios.test];
        let mut assigned: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut warnings = Vec::new();

        for (gi, gname) in self.group_set.iter().enumerate() {
            let mut indices: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.group_indices[i] == gi)
                .collect();
            if indices.is_empty() {
                continue;
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(crate::seeds::derive_indexed(seed, "split-group", gi as u64));
            indices.shuffle(&mut rng);

            let weights: Vec<f64> = parts.iter().map(|r| r * indices.len() as f64).collect();
            let mut counts = largest_remainder(&weights, indices.len());
            if counts.iter().any(|&c| c == 0) {
                warnings.push(format!(
                    "group {:?} has only {} samples; some splits receive none",
                    gname,
                    indices.len()
                ));
            }
            if counts[0] == 0 {
                // Keep every group represented in training.
                let donor = (0..3).max_by_key(|&p| counts[p]).unwrap();
                counts[donor] -= 1;
                counts[0] += 1;
                warnings.push(format!("group {:?} forced into the train split", gname));
            }
            let mut offset = 0;
            for (part, &c) in counts.iter().enumerate() {
                assigned[part].extend_from_slice(&indices[offset..offset + c]);
                offset += c;
            }
        }

        let build = |idxs: &[usize]| -> Result<GroupedDataset> {
            let samples = idxs.iter().map(|&i| self.samples[i].clone()).collect();
            GroupedDataset::with_group_set(samples, self.group_set.clone())
        };
        Ok(SplitResult {
            train: build(&assigned[0])?,
            val: build(&assigned[1])?,
            test: build(&assigned[2])?,
            warnings,
        })
    }
}

/// Train/val/test proportions; all strictly positive, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| r <= 0.0) {
            return Err(Error::config("split ratios must be strictly positive"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {}, expected 1", sum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
    pub warnings: Vec<String>,
}

/// Apportion `total` items over fractional targets: floor each weight, then
/// hand the remainder to the largest fractional parts (ties to the lowest
/// index).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| w.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = weights[a] - weights[a].floor();
        let fb = weights[b] - weights[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % weights.len()]] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(group: &str, label: u8, tag: f64) -> Sample {
        Sample { features: vec![tag, tag + 0.5], label, group: group.to_string() }
    }

    fn dataset(per_group: &[(&str, usize)]) -> GroupedDataset {
        let mut samples = Vec::new();
        let mut tag = 0.0;
        for (g, n) in per_group {
            for k in 0..*n {
                samples.push(sample(g, (k % 2) as u8, tag));
                tag += 1.0;
            }
        }
        GroupedDataset::from_samples(samples).unwrap()
    }

    #[test]
    fn counts_are_consistent() {
        let ds = dataset(&[("a", 3), ("b", 2)]);
        assert_eq!(ds.group_set(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.group_counts(), &[3, 2]);
        assert_eq!(ds.group_counts().iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn inconsistent_feature_dim_is_schema_error() {
        let samples = vec![
            Sample { features: vec![0.0, 1.0], label: 0, group: "a".into() },
            Sample { features: vec![0.0], label: 1, group: "a".into() },
        ];
        assert!(matches!(GroupedDataset::from_samples(samples), Err(Error::Schema(_))));
    }

    #[test]
    fn non_binary_label_is_schema_error() {
        let samples = vec![Sample { features: vec![0.0], label: 2, group: "a".into() }];
        assert!(matches!(GroupedDataset::from_samples(samples), Err(Error::Schema(_))));
    }

    #[test]
    fn split_sizes_paper_protocol() {
        // 0.7/0.1/0.2 over 10,000 -> 7000/1000/2000
        let ds = dataset(&[("a", 9030), ("b", 430), ("c", 540)]);
        let split = ds.stratified_split(SplitRatios::default(), 1).unwrap();
        assert_eq!(split.train.len(), 7000);
        assert_eq!(split.val.len(), 1000);
        assert_eq!(split.test.len(), 2000);
    }

    #[test]
    fn split_preserves_group_proportions_within_one() {
        let ds = dataset(&[("a", 903), ("b", 43), ("c", 54)]);
        let split = ds.stratified_split(SplitRatios::default(), 7).unwrap();
        for (part, ratio) in
            [(&split.train, 0.7), (&split.val, 0.1), (&split.test, 0.2)]
        {
            for (gi, &parent_count) in ds.group_counts().iter().enumerate() {
                let expected = ratio * parent_count as f64;
                let got = part.group_counts()[gi] as f64;
                assert!(
                    (got - expected).abs() <= 1.0,
                    "group {gi}: got {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn split_is_a_partition() {
        let ds = dataset(&[("a", 50), ("b", 50)]);
        let split = ds.stratified_split(SplitRatios::default(), 3).unwrap();
        let mut tags: Vec<u64> = split
            .train
            .samples()
            .iter()
            .chain(split.val.samples())
            .chain(split.test.samples())
            .map(|s| s.features[0].to_bits())
            .collect();
        tags.sort_unstable();
        let mut parent: Vec<u64> = ds.samples().iter().map(|s| s.features[0].to_bits()).collect();
        parent.sort_unstable();
        assert_eq!(tags, parent);
    }

    #[test]
    fn balanced_two_group_splits_stay_balanced() {
        let ds = dataset(&[("a", 500), ("b", 500)]);
        let split = ds.stratified_split(SplitRatios::default(), 11).unwrap();
        for part in [&split.train, &split.val, &split.test] {
            let diff =
                part.group_counts()[0] as i64 - part.group_counts()[1] as i64;
            assert!(diff.abs() <= 1, "imbalance {diff}");
        }
    }

    #[test]
    fn zero_ratio_is_config_error() {
        let ds = dataset(&[("a", 10)]);
        let r = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };
        assert!(matches!(ds.stratified_split(r, 1), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_group_warns_and_lands_in_train() {
        let ds = dataset(&[("big", 100), ("tiny", 1)]);
        let split = ds.stratified_split(SplitRatios::default(), 5).unwrap();
        assert!(!split.warnings.is_empty());
        let gi = ds.group_index("tiny").unwrap();
        assert_eq!(split.train.group_counts()[gi], 1);
    }

    #[test]
    fn split_determinism() {
        let ds = dataset(&[("a", 97), ("b", 31)]);
        let s1 = ds.stratified_split(SplitRatios::default(), 9).unwrap();
        let s2 = ds.stratified_split(SplitRatios::default(), 9).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.val, s2.val);
        assert_eq!(s1.test, s2.test);
    }

    #[test]
    fn largest_remainder_exact_total() {
        let counts = largest_remainder(&[6321.0, 301.0, 378.0], 7000);
        assert_eq!(counts.iter().sum::<usize>(), 7000);
        let counts = largest_remainder(&[3.5, 3.5, 3.0], 10);
        assert_eq!(counts, vec![4, 3, 3]);
    }
}
