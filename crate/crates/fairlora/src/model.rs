//! Toy causal-attention classifier with low-rank adapters.
//!
//! A frozen single-head attention stack with a trainable classification head;
//! the only other trainable state is the low-rank pair (B, A) attached to a
//! configurable subset of the attention projections. Each adapted projection
//! computes `W0 x + (alpha/r) B A x` with `W0` frozen. `B` starts at zero, so
//! an untrained model is exactly the frozen base model.

use crate::autodiff::{DenseMatrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Frozen base matrix plus a trainable low-rank update.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// d x k, frozen.
    pub base: DenseMatrix,
    /// r x k, trainable.
    pub a: DenseMatrix,
    /// d x r, trainable; zero-initialized.
    pub b: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(base: DenseMatrix, rank: usize, alpha: f64, init_rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, k) = (base.rows(), base.cols());
        if rank == 0 || rank > d.min(k) {
            return Err(Error::contract(format!(
                "rank {} invalid for a {}x{} base",
                rank, d, k
            )));
        }
        // A ~ N(0, 0.02^2), B = 0: training starts at the frozen model.
        let a = DenseMatrix::from_fn(rank, k, |_, _| {
            let z: f64 = init_rng.sample(StandardNormal);
            0.02 * z
        });
        let b = DenseMatrix::zeros(d, rank);
        Ok(LoraAdapter { base, a, b, rank, alpha })
    }

    /// Scale applied to the low-rank branch.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `W0 x + (alpha/r) B (A x)` for a single column vector `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.base.cols() {
            return Err(Error::contract(format!(
                "input length {} != {} columns",
                x.len(),
                self.base.cols()
            )));
        }
        let xm = DenseMatrix::from_vec(x.len(), 1, x.to_vec())?;
        let mut out = self.base.matmul(&xm)?;
        let ax = self.a.matmul(&xm)?;
        let bax = self.b.matmul(&ax)?;
        out.add_scaled(&bax, self.scaling());
        Ok(out.data().to_vec())
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Attention projections that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

/// How the per-position hidden states are pooled before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final position; under causal attention it has seen the whole input.
    #[default]
    LastToken,
    /// First position; under causal attention it sees only itself.
    FirstToken,
    Mean,
}

/// Position information mixed into the embedded sequence. `None` keeps the
/// model fully position-independent (identical tokens give identical hidden
/// states); `Sinusoidal` adds the standard fixed encoding so attention can
/// address positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    None,
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub layers: usize,
    /// LoRA rank; 0 disables adapters entirely.
    pub rank: usize,
    pub alpha: f64,
    pub adapted: Vec<Projection>,
    /// Dropout on the low-rank branch during training.
    pub dropout: f64,
    pub pooling: Pooling,
    pub positional: PositionalEncoding,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            input_dim: 16,
            hidden_dim: 32,
            seq_len: 8,
            layers: 2,
            rank: 4,
            alpha: 8.0,
            adapted: Projection::ALL.to_vec(),
            dropout: 0.05,
            pooling: Pooling::LastToken,
            positional: PositionalEncoding::Sinusoidal,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.seq_len == 0 || self.layers == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.rank > self.hidden_dim {
            return Err(Error::config(format!(
                "rank {} exceeds hidden dim {}",
                self.rank, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One attention projection: frozen base, plus an adapter when configured.
#[derive(Debug, Clone, PartialEq)]
struct ProjectionWeights {
    base: DenseMatrix,
    adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionLayer {
    q: ProjectionWeights,
    k: ProjectionWeights,
    v: ProjectionWeights,
    o: ProjectionWeights,
}

impl AttentionLayer {
    fn projection(&self, p: Projection) -> &ProjectionWeights {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::O => &self.o,
        }
    }

    fn projection_mut(&mut self, p: Projection) -> &mut ProjectionWeights {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
            Projection::O => &mut self.o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    /// d x d_in, frozen.
    embed: DenseMatrix,
    layers: Vec<AttentionLayer>,
    /// 2 x d, trainable.
    head: DenseMatrix,
}

/// Forward mode: training enables the seeded dropout mask on the low-rank
/// branch, evaluation disables it.
pub enum ForwardMode<'r> {
    Eval,
    Train { dropout_rng: &'r mut ChaCha8Rng },
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, "model-init"));
        let d = config.hidden_dim;
        let gauss = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            DenseMatrix::from_fn(rows, cols, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                std * z
            })
        };
        let embed = gauss(&mut rng, d, config.input_dim, 1.0 / (config.input_dim as f64).sqrt());
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let make = |rng: &mut ChaCha8Rng, proj: Projection| -> Result<ProjectionWeights> {
                let base = gauss(rng, d, d, 1.0 / (d as f64).sqrt());
                let adapter = if config.rank > 0 && config.adapted.contains(&proj) {
                    Some(LoraAdapter::new(base.clone(), config.rank, config.alpha, rng)?)
                } else {
                    None
                };
                Ok(ProjectionWeights { base, adapter })
            };
            layers.push(AttentionLayer {
                q: make(&mut rng, Projection::Q)?,
                k: make(&mut rng, Projection::K)?,
                v: make(&mut rng, Projection::V)?,
                o: make(&mut rng, Projection::O)?,
            });
        }
        let head = gauss(&mut rng, 2, d, 0.02);
        Ok(ToyModel { config, embed, layers, head })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn head(&self) -> &DenseMatrix {
        &self.head
    }

    pub fn set_head(&mut self, head: DenseMatrix) -> Result<()> {
        if head.rows() != 2 || head.cols() != self.config.hidden_dim {
            return Err(Error::contract("head must be 2 x hidden_dim"));
        }
        self.head = head;
        Ok(())
    }

    /// Copy with all adapters removed: the frozen base model plus head.
    pub fn strip_adapters(&self) -> ToyModel {
        let mut out = self.clone();
        out.config.rank = 0;
        out.config.adapted.clear();
        for layer in &mut out.layers {
            for p in Projection::ALL {
                layer.projection_mut(p).adapter = None;
            }
        }
        out
    }

    /// Fold every adapter's low-rank update into its base matrix
    /// (`W0 += (alpha/r) B A`), then restart the adapters: fresh Gaussian A,
    /// B back to zero. Turns a fine-tuned model into the frozen starting
    /// point for a further round of adaptation.
    pub fn merge_adapters(&mut self, reinit_seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(reinit_seed, "adapter-reinit"));
        for layer in &mut self.layers {
            for p in Projection::ALL {
                let proj = layer.projection_mut(p);
                if let Some(ad) = proj.adapter.as_mut() {
                    let update = ad.b.matmul(&ad.a)?;
                    proj.base.add_scaled(&update, ad.scaling());
                    ad.a = DenseMatrix::from_fn(ad.rank, proj.base.cols(), |_, _| {
                        let z: f64 = rng.sample(StandardNormal);
                        0.02 * z
                    });
                    ad.b = DenseMatrix::zeros(proj.base.rows(), ad.rank);
                    ad.base = proj.base.clone();
                }
            }
        }
        Ok(())
    }

    /// Reshape a flat feature vector into the L x d_in input matrix.
    pub fn sequence_from_features(&self, features: &[f64]) -> Result<DenseMatrix> {
        let want = self.config.seq_len * self.config.input_dim;
        if features.len() != want {
            return Err(Error::contract(format!(
                "feature length {} != seq_len {} x input_dim {}",
                features.len(),
                self.config.seq_len,
                self.config.input_dim
            )));
        }
        DenseMatrix::from_vec(self.config.seq_len, self.config.input_dim, features.to_vec())
    }

    /// Stable names of all trainable matrices, in update order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                if layer.projection(p).adapter.is_some() {
                    names.push(format!("layer{}.{}.a", li, p.tag()));
                    names.push(format!("layer{}.{}.b", li, p.tag()));
                }
            }
        }
        names.push("head".to_string());
        names
    }

    /// Trainable matrices in the same order as `trainable_names`.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut DenseMatrix)> {
        let mut out: Vec<(String, &mut DenseMatrix)> = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (tag, proj) in [
                ("q", &mut layer.q),
                ("k", &mut layer.k),
                ("v", &mut layer.v),
                ("o", &mut layer.o),
            ] {
                if let Some(ad) = proj.adapter.as_mut() {
                    out.push((format!("layer{}.{}.a", li, tag), &mut ad.a));
                    out.push((format!("layer{}.{}.b", li, tag), &mut ad.b));
                }
            }
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Snapshot of the frozen matrices, keyed by name.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, DenseMatrix> {
        let mut out = BTreeMap::new();
        out.insert("embed".to_string(), self.embed.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                out.insert(
                    format!("layer{}.{}.base", li, p.tag()),
                    layer.projection(p).base.clone(),
                );
            }
        }
        out
    }

    /// Fraction of parameters that receive gradients, counting every frozen
    /// base weight in the denominator.
    pub fn trainable_fraction(&self) -> f64 {
        let mut trainable = self.head.len();
        let mut total = self.embed.len() + self.head.len();
        for layer in &self.layers {
            for p in Projection::ALL {
                let proj = layer.projection(p);
                total += proj.base.len();
                if let Some(ad) = &proj.adapter {
                    trainable += ad.trainable_params();
                    total += ad.trainable_params();
                }
            }
        }
        param_fraction(trainable, total)
    }

    /// Bind current weights onto a tape for a differentiable forward pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        let embed = tape.constant(self.embed.clone());
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let bind_proj = |tape: &mut Tape, proj: &ProjectionWeights| BoundProjection {
                base: tape.constant(proj.base.clone()),
                adapter: proj.adapter.as_ref().map(|ad| BoundAdapter {
                    a: tape.param(ad.a.clone()),
                    b: tape.param(ad.b.clone()),
                    scaling: ad.scaling(),
                }),
            };
            layers.push(BoundLayer {
                q: bind_proj(tape, &layer.q),
                k: bind_proj(tape, &layer.k),
                v: bind_proj(tape, &layer.v),
                o: bind_proj(tape, &layer.o),
            });
        }
        let head = tape.param(self.head.clone());
        BoundModel { model: self, embed, layers, head }
    }

    /// Evaluation-mode logits for one flattened feature vector.
    pub fn eval_logits(&self, features: &[f64]) -> Result<[f64; 2]> {
        let seq = self.sequence_from_features(features)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = bound.classify(&mut tape, &seq, &mut ForwardMode::Eval)?;
        let v = tape.value(logits);
        Ok([v.get(0, 0), v.get(0, 1)])
    }

    /// Evaluation-mode hidden states (L x d) for a raw sequence.
    pub fn eval_hidden_states(&self, seq: &DenseMatrix) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = bound.hidden_states(&mut tape, seq, &mut ForwardMode::Eval)?;
        Ok(tape.value(h).clone())
    }

    /// Hard prediction with ties resolved to class 0.
    pub fn predict(&self, features: &[f64]) -> Result<u8> {
        let logits = self.eval_logits(features)?;
        Ok(argmax_pair(logits))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = BufWriter::new(file);
        let ckpt = Checkpoint::from_model(self);
        serde_json::to_writer_pretty(&mut writer, &ckpt)?;
        use std::io::Write;
        writer.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ckpt.into_model()
    }
}

/// Prediction rule shared by training metrics and evaluation: argmax over the
/// logit pair, class 0 on ties.
pub fn argmax_pair(logits: [f64; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// Fixed sinusoidal position matrix (L x d).
fn sinusoidal_encoding(seq_len: usize, dim: usize) -> DenseMatrix {
    DenseMatrix::from_fn(seq_len, dim, |pos, j| {
        let rate = 10_000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Fraction helper used by `trainable_fraction` and parameter-budget checks.
pub fn param_fraction(trainable: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        trainable as f64 / total as f64
    }
}

struct BoundAdapter {
    a: NodeId,
    b: NodeId,
    scaling: f64,
}

struct BoundProjection {
    base: NodeId,
    adapter: Option<BoundAdapter>,
}

struct BoundLayer {
    q: BoundProjection,
    k: BoundProjection,
    v: BoundProjection,
    o: BoundProjection,
}

/// A model whose weights are registered on a tape. Parameter node ids map
/// one-to-one onto `ToyModel::trainable_names` order.
pub struct BoundModel<'m> {
    model: &'m ToyModel,
    embed: NodeId,
    layers: Vec<BoundLayer>,
    head: NodeId,
}

impl<'m> BoundModel<'m> {
    /// Parameter nodes in `trainable_names` order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for proj in [&layer.q, &layer.k, &layer.v, &layer.o] {
                if let Some(ad) = &proj.adapter {
                    out.push(ad.a);
                    out.push(ad.b);
                }
            }
        }
        out.push(self.head);
        out
    }

    /// Rows of `h` projected through base + scaled low-rank branch:
    /// `h . W^T + (alpha/r) dropout(h) . A^T . B^T`.
    fn project(
        &self,
        tape: &mut Tape,
        h: NodeId,
        proj: &BoundProjection,
        mode: &mut ForwardMode,
    ) -> Result<NodeId> {
        let base_t = tape.transpose(proj.base);
        let mut out = tape.matmul(h, base_t)?;
        if let Some(ad) = &proj.adapter {
            let branch_in = match mode {
                ForwardMode::Eval => h,
                ForwardMode::Train { dropout_rng } => {
                    let p = self.model.config.dropout;
                    if p > 0.0 {
                        let shape = tape.value(h);
                        let (rows, cols) = (shape.rows(), shape.cols());
                        let keep = 1.0 / (1.0 - p);
                        let mask = DenseMatrix::from_fn(rows, cols, |_, _| {
                            if dropout_rng.gen::<f64>() < p {
                                0.0
                            } else {
                                keep
                            }
                        });
                        tape.mul_mask(h, mask)?
                    } else {
                        h
                    }
                }
            };
            let a_t = tape.transpose(ad.a);
            let ha = tape.matmul(branch_in, a_t)?;
            let b_t = tape.transpose(ad.b);
            let hab = tape.matmul(ha, b_t)?;
            let scaled = tape.scale(hab, ad.scaling);
            out = tape.add(out, scaled)?;
        }
        Ok(out)
    }

    /// Causal attention stack over an L x d_in sequence; position `i`'s
    /// output depends only on positions `0..=i`.
    pub fn hidden_states(
        &self,
        tape: &mut Tape,
        seq: &DenseMatrix,
        mode: &mut ForwardMode,
    ) -> Result<NodeId> {
        let cfg = &self.model.config;
        if seq.rows() != cfg.seq_len || seq.cols() != cfg.input_dim {
            return Err(Error::contract(format!(
                "sequence shape {}x{} != {}x{}",
                seq.rows(),
                seq.cols(),
                cfg.seq_len,
                cfg.input_dim
            )));
        }
        let x = tape.constant(seq.clone());
        let embed_t = tape.transpose(self.embed);
        let mut h = tape.matmul(x, embed_t)?;
        if cfg.positional == PositionalEncoding::Sinusoidal {
            let pe = tape.constant(sinusoidal_encoding(cfg.seq_len, cfg.hidden_dim));
            h = tape.add(h, pe)?;
        }
        let inv_sqrt_d = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for layer in &self.layers {
            let q = self.project(tape, h, &layer.q, mode)?;
            let k = self.project(tape, h, &layer.k, mode)?;
            let v = self.project(tape, h, &layer.v, mode)?;
            let k_t = tape.transpose(k);
            let scores_raw = tape.matmul(q, k_t)?;
            let scores = tape.scale(scores_raw, inv_sqrt_d);
            let probs = tape.causal_softmax(scores)?;
            let context = tape.matmul(probs, v)?;
            let attn_out = self.project(tape, context, &layer.o, mode)?;
            h = tape.add(h, attn_out)?;
        }
        Ok(h)
    }

    /// Logits (1x2) for a sequence, pooled per the configured mode.
    pub fn classify(
        &self,
        tape: &mut Tape,
        seq: &DenseMatrix,
        mode: &mut ForwardMode,
    ) -> Result<NodeId> {
        let h = self.hidden_states(tape, seq, mode)?;
        let pooled = match self.model.config.pooling {
            Pooling::LastToken => tape.row_select(h, self.model.config.seq_len - 1)?,
            Pooling::FirstToken => tape.row_select(h, 0)?,
            Pooling::Mean => tape.mean_rows(h)?,
        };
        let head_t = tape.transpose(self.head);
        tape.matmul(pooled, head_t)
    }
}

/// Named-matrix checkpoint with shape headers; exact JSON round-trip.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ToyModelConfig,
    matrices: BTreeMap<String, MatrixRecord>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from(m: &DenseMatrix) -> Self {
        MatrixRecord { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
    }

    fn matrix(&self) -> Result<DenseMatrix> {
        DenseMatrix::from_vec(self.rows, self.cols, self.data.clone())
    }
}

impl Checkpoint {
    fn from_model(model: &ToyModel) -> Self {
        let mut matrices = BTreeMap::new();
        matrices.insert("embed".to_string(), MatrixRecord::from(&model.embed));
        matrices.insert("head".to_string(), MatrixRecord::from(&model.head));
        for (li, layer) in model.layers.iter().enumerate() {
            for p in Projection::ALL {
                let proj = layer.projection(p);
                let prefix = format!("layer{}.{}", li, p.tag());
                matrices.insert(format!("{prefix}.base"), MatrixRecord::from(&proj.base));
                if let Some(ad) = &proj.adapter {
                    matrices.insert(format!("{prefix}.a"), MatrixRecord::from(&ad.a));
                    matrices.insert(format!("{prefix}.b"), MatrixRecord::from(&ad.b));
                }
            }
        }
        Checkpoint { config: model.config.clone(), matrices }
    }

    fn into_model(self) -> Result<ToyModel> {
        let fetch = |name: &str| -> Result<DenseMatrix> {
            self.matrices
                .get(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint missing matrix {name:?}")))?
                .matrix()
        };
        let embed = fetch("embed")?;
        let head = fetch("head")?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for li in 0..self.config.layers {
            let get_proj = |p: Projection| -> Result<ProjectionWeights> {
                let prefix = format!("layer{}.{}", li, p.tag());
                let base = fetch(&format!("{prefix}.base"))?;
                let adapter = if self.config.rank > 0 && self.config.adapted.contains(&p) {
                    Some(LoraAdapter {
                        base: base.clone(),
                        a: fetch(&format!("{prefix}.a"))?,
                        b: fetch(&format!("{prefix}.b"))?,
                        rank: self.config.rank,
                        alpha: self.config.alpha,
                    })
                } else {
                    None
                };
                Ok(ProjectionWeights { base, adapter })
            };
            layers.push(AttentionLayer {
                q: get_proj(Projection::Q)?,
                k: get_proj(Projection::K)?,
                v: get_proj(Projection::V)?,
                o: get_proj(Projection::O)?,
            });
        }
        Ok(ToyModel { config: self.config, embed, layers, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_seq(model: &ToyModel, seed: u64) -> DenseMatrix {
        let mut r = rng(seed);
        DenseMatrix::from_fn(model.config().seq_len, model.config().input_dim, |_, _| {
            r.sample(StandardNormal)
        })
    }

    fn small_config() -> ToyModelConfig {
        ToyModelConfig {
            input_dim: 5,
            hidden_dim: 8,
            seq_len: 4,
            layers: 2,
            rank: 2,
            alpha: 4.0,
            adapted: Projection::ALL.to_vec(),
            dropout: 0.0,
            pooling: Pooling::LastToken,
            positional: PositionalEncoding::Sinusoidal,
            seed: 77,
        }
    }

    #[test]
    fn lora_forward_zero_b_is_base() {
        let base = DenseMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        let adapter = LoraAdapter::new(base.clone(), 2, 4.0, &mut rng(1)).unwrap();
        let x = [1.0, -2.0, 0.5];
        let got = adapter.forward(&x).unwrap();
        let expect = base.matmul(&DenseMatrix::from_vec(3, 1, x.to_vec()).unwrap()).unwrap();
        assert_eq!(got, expect.data());
    }

    #[test]
    fn lora_forward_identity_composition() {
        // W0 = 0, alpha = r, B.A = I  =>  output = x
        let adapter = LoraAdapter {
            base: DenseMatrix::zeros(2, 2),
            a: DenseMatrix::identity(2),
            b: DenseMatrix::identity(2),
            rank: 2,
            alpha: 2.0,
        };
        let got = adapter.forward(&[3.0, -4.0]).unwrap();
        assert_eq!(got, vec![3.0, -4.0]);
    }

    #[test]
    fn lora_forward_hand_oracle() {
        // d=k=2, r=1, W0=I, alpha=2, B=[[1],[0]], A=[[0,1]], x=[3,4] -> [11,4]
        let adapter = LoraAdapter {
            base: DenseMatrix::identity(2),
            a: DenseMatrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap(),
            b: DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            rank: 1,
            alpha: 2.0,
        };
        let got = adapter.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(got, vec![11.0, 4.0]);
    }

    #[test]
    fn lora_forward_dimension_mismatch() {
        let adapter = LoraAdapter::new(DenseMatrix::zeros(2, 3), 1, 1.0, &mut rng(1)).unwrap();
        assert!(adapter.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_init_equals_frozen_base_exactly() {
        let model = ToyModel::new(small_config()).unwrap();
        let base = model.strip_adapters();
        for trial in 0..100 {
            let seq = random_seq(&model, 1000 + trial);
            let features: Vec<f64> = seq.data().to_vec();
            let a = model.eval_logits(&features).unwrap();
            let b = base.eval_logits(&features).unwrap();
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }

    #[test]
    fn single_token_sequence_runs() {
        let cfg = ToyModelConfig { seq_len: 1, ..small_config() };
        let model = ToyModel::new(cfg).unwrap();
        let seq = random_seq(&model, 5);
        let h = model.eval_hidden_states(&seq).unwrap();
        assert_eq!(h.rows(), 1);
        assert!(h.all_finite());
    }

    #[test]
    fn causality_prefix_is_bitwise_invariant() {
        let model = ToyModel::new(small_config()).unwrap();
        let seq = random_seq(&model, 9);
        let h = model.eval_hidden_states(&seq).unwrap();
        for j in 1..model.config().seq_len {
            let mut perturbed = seq.clone();
            for c in 0..model.config().input_dim {
                perturbed.set(j, c, perturbed.get(j, c) + 1.5);
            }
            let hp = model.eval_hidden_states(&perturbed).unwrap();
            for i in 0..j {
                for c in 0..model.config().hidden_dim {
                    assert_eq!(
                        h.get(i, c).to_bits(),
                        hp.get(i, c).to_bits(),
                        "row {i} changed when token {j} was perturbed"
                    );
                }
            }
        }
    }

    #[test]
    fn uniform_tokens_give_equal_hidden_states() {
        let cfg = ToyModelConfig { positional: PositionalEncoding::None, ..small_config() };
        let model = ToyModel::new(cfg).unwrap();
        let token: Vec<f64> = (0..model.config().input_dim).map(|i| 0.3 * i as f64 - 0.5).collect();
        let seq = DenseMatrix::from_fn(model.config().seq_len, model.config().input_dim, |_, j| {
            token[j]
        });
        let h = model.eval_hidden_states(&seq).unwrap();
        for i in 1..h.rows() {
            for c in 0..h.cols() {
                assert!(
                    (h.get(i, c) - h.get(0, c)).abs() <= 1e-12,
                    "position {i} differs at column {c}"
                );
            }
        }
    }

    #[test]
    fn first_token_pooling_is_blind_to_suffix() {
        let cfg = ToyModelConfig { pooling: Pooling::FirstToken, ..small_config() };
        let model = ToyModel::new(cfg).unwrap();
        let seq = random_seq(&model, 11);
        let logits = model.eval_logits(seq.data()).unwrap();
        for trial in 0..20 {
            let mut perturbed = seq.clone();
            let mut r = rng(400 + trial);
            for i in 1..model.config().seq_len {
                for c in 0..model.config().input_dim {
                    perturbed.set(i, c, r.sample(StandardNormal));
                }
            }
            let lp = model.eval_logits(perturbed.data()).unwrap();
            assert_eq!(logits[0].to_bits(), lp[0].to_bits());
            assert_eq!(logits[1].to_bits(), lp[1].to_bits());
        }
    }

    #[test]
    fn last_token_pooling_sees_the_prefix() {
        let model = ToyModel::new(small_config()).unwrap();
        let seq = random_seq(&model, 21);
        let logits = model.eval_logits(seq.data()).unwrap();
        let mut changed = 0;
        for trial in 0..100 {
            let mut perturbed = seq.clone();
            let mut r = rng(500 + trial);
            for c in 0..model.config().input_dim {
                perturbed.set(0, c, r.sample(StandardNormal));
            }
            let lp = model.eval_logits(perturbed.data()).unwrap();
            if lp[0] != logits[0] || lp[1] != logits[1] {
                changed += 1;
            }
        }
        assert!(changed >= 95, "only {changed}/100 prefix perturbations changed the logits");
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let mut model = ToyModel::new(small_config()).unwrap();
        model.set_head(DenseMatrix::zeros(2, model.config().hidden_dim)).unwrap();
        let seq = random_seq(&model, 31);
        let logits = model.eval_logits(seq.data()).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        assert_eq!(model.predict(seq.data()).unwrap(), 0);
    }

    #[test]
    fn trainable_fraction_matches_enumeration() {
        let cfg = ToyModelConfig::default();
        let model = ToyModel::new(cfg.clone()).unwrap();
        // Explicit parameter count for d=32, d_in=16, 2 layers, r=4, q/k/v/o.
        let d = cfg.hidden_dim;
        let adapters = cfg.layers * cfg.adapted.len() * (cfg.rank * d + d * cfg.rank);
        let head = 2 * d;
        let frozen = d * cfg.input_dim + cfg.layers * 4 * d * d;
        let expect = (adapters + head) as f64 / (adapters + head + frozen) as f64;
        assert!((model.trainable_fraction() - expect).abs() < 1e-15);
    }

    #[test]
    fn rank_zero_counts_head_only() {
        let cfg = ToyModelConfig { rank: 0, adapted: vec![], ..ToyModelConfig::default() };
        let model = ToyModel::new(cfg.clone()).unwrap();
        let d = cfg.hidden_dim;
        let head = 2 * d;
        let frozen = d * cfg.input_dim + cfg.layers * 4 * d * d;
        let expect = head as f64 / (head + frozen) as f64;
        assert!((model.trainable_fraction() - expect).abs() < 1e-15);
    }

    #[test]
    fn trainable_fraction_monotone_in_rank() {
        let mut last = 0.0;
        for r in [1, 2, 4, 8] {
            let cfg = ToyModelConfig { rank: r, ..ToyModelConfig::default() };
            let f = ToyModel::new(cfg).unwrap().trainable_fraction();
            assert!(f > last, "rank {r}: {f} <= {last}");
            assert!(f < 1.0);
            last = f;
        }
    }

    #[test]
    fn reference_parameter_budget() {
        // 20M adapter parameters on an 8.3B base is ~0.24% trainable.
        let frac = param_fraction(20_000_000, 8_300_000_000);
        assert!((frac - 0.0024).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = ToyModel::new(small_config()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = ToyModel::load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn dropout_draws_are_seed_deterministic() {
        let cfg = ToyModelConfig { dropout: 0.5, ..small_config() };
        let mut model = ToyModel::new(cfg).unwrap();
        // B starts at zero, which would make the mask invisible.
        let mut r = rng(99);
        for (_, m) in model.trainable_mut() {
            for v in m.data_mut() {
                *v = 0.1 * r.sample::<f64, _>(StandardNormal);
            }
        }
        let model = model;
        let seq = random_seq(&model, 41);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut dr = rng(seed);
            let mut mode = ForwardMode::Train { dropout_rng: &mut dr };
            let logits = bound.classify(&mut tape, &seq, &mut mode).unwrap();
            (tape.value(logits).get(0, 0), tape.value(logits).get(0, 1))
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
