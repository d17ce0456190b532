//! Synthetic demographically-imbalanced sequence data.
//!
//! Every token of a sample is isotropic noise plus the group's class-signal
//! direction, signed by the label and scaled by the group's signal strength.
//! Group directions share a common component but keep a group-specific one:
//! the shared part transfers from majority training for free, while the
//! group-specific part is only learned from that group's own samples. A
//! rare low-signal group therefore stays underfit under plain training —
//! the disparity the reweighted objectives get to fix.

use super::{largest_remainder, GroupedDataset, Sample};
use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Standard deviation of the per-token noise.
const NOISE_SCALE: f64 = 1.0;
/// Magnitude of a full-strength class direction.
const SIGNAL_SCALE: f64 = 1.0;
/// Mixing weight of the direction component shared across groups; the rest
/// is group-specific.
const SHARED_DIRECTION_WEIGHT: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupSpec {
    pub name: String,
    /// Share of the dataset drawn from this group.
    pub fraction: f64,
    /// Label-signal strength in [0, 1]; lower is a harder group.
    pub signal: f64,
    /// P(label = 1) within the group.
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
}

fn default_positive_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub groups: Vec<GroupSpec>,
    /// Per-position feature dimension.
    pub token_dim: usize,
    pub seq_len: usize,
    pub samples: usize,
    /// Overridden per run by the experiment runner.
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("at least one group required"));
        }
        let sum: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("group fractions sum to {}, expected 1", sum)));
        }
        for g in &self.groups {
            if !(0.0..=1.0).contains(&g.signal) {
                return Err(Error::config(format!("group {:?}: signal {} not in [0, 1]", g.name, g.signal)));
            }
            if !(0.0..=1.0).contains(&g.positive_rate) {
                return Err(Error::config(format!(
                    "group {:?}: positive rate {} not in [0, 1]",
                    g.name, g.positive_rate
                )));
            }
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.groups.len() {
            return Err(Error::config("duplicate group names"));
        }
        if self.token_dim == 0 || self.seq_len == 0 {
            return Err(Error::config("token_dim and seq_len must be positive"));
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Generate a dataset; a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<GroupedDataset> {
    cfg.validate()?;
    let fractions: Vec<f64> =
        cfg.groups.iter().map(|g| g.fraction * cfg.samples as f64).collect();
    let counts = largest_remainder(&fractions, cfg.samples);

    let mut dir_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "directions"));
    let shared = unit_gaussian(&mut dir_rng, cfg.token_dim);
    let directions: Vec<Vec<f64>> = cfg
        .groups
        .iter()
        .map(|_| {
            let unique = unit_gaussian(&mut dir_rng, cfg.token_dim);
            let mixed: Vec<f64> = shared
                .iter()
                .zip(&unique)
                .map(|(s, u)| SHARED_DIRECTION_WEIGHT * s + (1.0 - SHARED_DIRECTION_WEIGHT) * u)
                .collect();
            let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            mixed.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.samples);
    for (gi, group) in cfg.groups.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "group-samples", gi as u64));
        for _ in 0..counts[gi] {
            let label = u8::from(rng.gen_bool(group.positive_rate));
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let amp = sign * group.signal * SIGNAL_SCALE;
            let mut features = Vec::with_capacity(cfg.seq_len * cfg.token_dim);
            for _ in 0..cfg.seq_len {
                for d in &directions[gi] {
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push(NOISE_SCALE * noise + amp * d);
                }
            }
            samples.push(Sample { features, label, group: group.name.clone() });
        }
    }
    GroupedDataset::with_group_set(
        samples,
        cfg.groups.iter().map(|g| g.name.clone()).collect(),
    )
}

/// The reference imbalanced benchmark: one dominant group and two small
/// groups at 0.903/0.043/0.054, minority signal 0.6x the majority's.
pub fn reference_synth(samples: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        groups: vec![
            GroupSpec { name: "majority".into(), fraction: 0.903, signal: 1.0, positive_rate: 0.5 },
            GroupSpec { name: "minority_a".into(), fraction: 0.043, signal: 0.6, positive_rate: 0.5 },
            GroupSpec { name: "minority_b".into(), fraction: 0.054, signal: 0.6, positive_rate: 0.5 },
        ],
        token_dim: 16,
        seq_len: 8,
        samples,
        seed,
    }
}
