//! Skeleton-language alignment.
//!
//! Skeleton vectors `z^s` and paired label-sentence embeddings `z^t` are
//! compared by temperature-scaled cosine similarity:
//!
//! `P_s2t[i][j] = softmax_j(cos(z^s_i, z^t_j) / τ)`,
//! `P_t2s[i][j] = softmax_j(cos(z^t_i, z^s_j) / τ)`,
//!
//! and pulled towards the label-agreement target `ŷ` (positives of each row
//! share its mass) by `L_con = ½ · mean_i [KL(ŷ_i ‖ P_s2t[i]) + KL(ŷ_i ‖ P_t2s[i])]`.
//! Pretraining minimises either `L_se = CE + L_con(z_g)` or
//! `L_st = CE + ½ (L_con(z_s) + L_con(z_t))`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{read_json, write_json, Encoder, EncoderConfig, JointGraph, JointGraphSpec};
use crate::error::{Error, Result};
use crate::numerics::functions::{kl_divergence, l2_norm, softmax};
use crate::numerics::{BoundParams, Params, SgdState, Tape, Tensor, Var};
use crate::skeldata::{CoordinateNorm, SkeletonSequence};
use crate::tokenizer::{SkeletonTokenizer, TokenBundle, TokenVars, TokenizerConfig};
use crate::unify::{masked_mean_var, unify_var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Unit-normalised sentence embedding per emotion label.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingTable {
    pub provenance: String,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl TextEmbeddingTable {
    pub fn from_entries(
        provenance: impl Into<String>,
        entries: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::param("text embedding table is empty"))?;
        let mut map = BTreeMap::new();
        for (label, v) in entries {
            if v.len() != dim {
                return Err(Error::param(format!(
                    "embedding for {label:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            let n = l2_norm(&v);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "embedding for {label:?} has zero norm"
                )));
            }
            map.insert(label, v.iter().map(|x| x / n).collect());
        }
        Ok(Self {
            provenance: provenance.into(),
            dim,
            entries: map,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require(&self, labels: &[String]) -> Result<()> {
        match labels.iter().find(|l| !self.entries.contains_key(*l)) {
            Some(missing) => Err(Error::param(format!(
                "no text embedding for label {missing:?}"
            ))),
            None => Ok(()),
        }
    }

    /// `(N, dim)` matrix of the embeddings of `labels`, in order.
    pub fn rows_for(&self, labels: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.dim);
        for l in labels {
            let v = self
                .get(l)
                .ok_or_else(|| Error::param(format!("no text embedding for label {l:?}")))?;
            data.extend_from_slice(v);
        }
        Tensor::new(vec![labels.len(), self.dim], data)
    }

    /// Deterministic pseudo-embeddings, one random unit vector per label
    /// seeded from a hash of the label text.
    pub fn synthetic(labels: &[String], dim: usize) -> Result<Self> {
        let entries = labels
            .iter()
            .map(|l| {
                let digest = Sha256::digest(l.as_bytes());
                let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (l.clone(), v)
            })
            .collect();
        Self::from_entries("synthetic: hashed-label random unit vectors", entries)
    }

    pub fn format(&self) -> String {
        let mut out = format!("{} {}\n", self.entries.len(), self.dim);
        for (label, v) in &self.entries {
            out.push_str(label);
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.format())?;
        Ok(())
    }
}

fn parse_embeddings(text: &str) -> std::result::Result<Vec<(String, Vec<f64>)>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("missing header line")?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let [count, dim] = h.as_slice() else {
        return Err(format!("header must be `label_count dim`, got {header:?}"));
    };
    let count: usize = count
        .parse()
        .map_err(|_| format!("bad label count {count:?}"))?;
    let dim: usize = dim.parse().map_err(|_| format!("bad dimension {dim:?}"))?;
    let mut entries = Vec::with_capacity(count);
    for line in lines {
        let mut parts = line.split_whitespace();
        let label = parts.next().ok_or("empty entry")?.to_string();
        let v = parts
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| format!("{label}: bad value {t:?}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v.len() != dim {
            return Err(format!("{label}: expected {dim} values, got {}", v.len()));
        }
        entries.push((label, v));
    }
    if entries.len() != count {
        return Err(format!(
            "header declares {count} labels, file has {}",
            entries.len()
        ));
    }
    Ok(entries)
}

/// Reads an embedding file and checks that it covers every label in `labels`.
pub fn load_text_embeddings(path: &Path, labels: &[String]) -> Result<TextEmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let entries = parse_embeddings(&text).map_err(|r| Error::load(path, r))?;
    let table = TextEmbeddingTable::from_entries(path.display().to_string(), entries)
        .map_err(|e| Error::load(path, e.to_string()))?;
    if let Some(missing) = labels.iter().find(|l| table.get(l).is_none()) {
        return Err(Error::load(
            path,
            format!("missing embedding for label {missing:?}"),
        ));
    }
    Ok(table)
}

/// Row-stochastic `ŷ`: entry `(i, j)` is `1 / |{k : y_k = y_i}|` when `y_i = y_j`.
pub fn target_matrix(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let positives = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..n {
            if labels[j] == labels[i] {
                data[i * n + j] = 1.0 / positives;
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

fn normalized_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    let mut data = x.data().to_vec();
    for (i, row) in data.chunks_mut(c).enumerate() {
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// `(P_s2t, P_t2s)` for `(N, D)` skeleton and text matrices.
pub fn similarity_distributions(
    zs: &Tensor,
    zt: &Tensor,
    temperature: f64,
) -> Result<(Tensor, Tensor)> {
    check_temperature(temperature)?;
    if zs.shape() != zt.shape() || zs.shape().len() != 2 {
        return Err(Error::param(format!(
            "skeleton batch {:?} and text batch {:?} must both be (N, D)",
            zs.shape(),
            zt.shape()
        )));
    }
    let sim = normalized_rows(zs)?.matmul(&normalized_rows(zt)?.transpose())?;
    let n = sim.rows();
    let mut s2t = Vec::with_capacity(n * n);
    for i in 0..n {
        s2t.extend(softmax(sim.row(i), temperature)?);
    }
    let sim_t = sim.transpose();
    let mut t2s = Vec::with_capacity(n * n);
    for i in 0..n {
        t2s.extend(softmax(sim_t.row(i), temperature)?);
    }
    Ok((Tensor::new(vec![n, n], s2t)?, Tensor::new(vec![n, n], t2s)?))
}

pub fn contrastive_loss_from_distributions(
    p_s2t: &Tensor,
    p_t2s: &Tensor,
    targets: &Tensor,
) -> Result<f64> {
    let n = targets.rows();
    if p_s2t.shape() != targets.shape() || p_t2s.shape() != targets.shape() {
        return Err(Error::param(
            "similarity and target matrices must share a shape",
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += kl_divergence(targets.row(i), p_s2t.row(i))?
            + kl_divergence(targets.row(i), p_t2s.row(i))?;
    }
    Ok(0.5 * total / n as f64)
}

pub fn contrastive_loss(
    zs: &Tensor,
    zt: &Tensor,
    targets: &Tensor,
    temperature: f64,
) -> Result<f64> {
    let (s2t, t2s) = similarity_distributions(zs, zt, temperature)?;
    contrastive_loss_from_distributions(&s2t, &t2s, targets)
}

/// Taped `L_con` for `(N, D)` skeleton and text variables.
pub fn contrastive_var(
    tape: &mut Tape,
    zs: Var,
    zt: Var,
    targets: Rc<Tensor>,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let ns = tape.normalize_rows(zs)?;
    let nt = tape.normalize_rows(zt)?;
    let sim = tape.matmul_nt(ns, nt);
    let scaled = tape.scale(sim, 1.0 / temperature);
    let lp_s2t = tape.log_softmax_rows(scaled);
    let scaled_t = tape.transpose(scaled);
    let lp_t2s = tape.log_softmax_rows(scaled_t);
    let a = tape.kl_rows(lp_s2t, targets.clone());
    let b = tape.kl_rows(lp_t2s, targets);
    let sum = tape.add(a, b);
    Ok(tape.scale(sum, 0.5))
}

/// The objective used during pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Classification plus contrastive loss on the semantic token.
    #[default]
    Se,
    /// Classification plus contrastive losses on spatial and temporal tokens.
    St,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Var,
    pub contrastive: Var,
}

/// `L_se = mean CE(logits, y) + L_con(z_g, z^t)`.
pub fn loss_se_var(
    tape: &mut Tape,
    zg: Var,
    logits: Var,
    labels: &[usize],
    text: Var,
    temperature: f64,
) -> Result<LossParts> {
    let targets = Rc::new(target_matrix(labels));
    let cross_entropy = class_ce(tape, logits, labels);
    let contrastive = contrastive_var(tape, zg, text, targets, temperature)?;
    let total = tape.add(cross_entropy, contrastive);
    Ok(LossParts {
        total,
        cross_entropy,
        contrastive,
    })
}

/// `L_st = mean CE(logits, y) + ½ (L_con(z_s, z^t) + L_con(z_t, z^t))`, where
/// `spatial` and `temporal` are the tokens already reduced to the text width.
pub fn loss_st_var(
    tape: &mut Tape,
    spatial: Var,
    temporal: Var,
    logits: Var,
    labels: &[usize],
    text: Var,
    temperature: f64,
) -> Result<LossParts> {
    let targets = Rc::new(target_matrix(labels));
    let cross_entropy = class_ce(tape, logits, labels);
    let cs = contrastive_var(tape, spatial, text, targets.clone(), temperature)?;
    let ct = contrastive_var(tape, temporal, text, targets, temperature)?;
    let sum = tape.add(cs, ct);
    let contrastive = tape.scale(sum, 0.5);
    let total = tape.add(cross_entropy, contrastive);
    Ok(LossParts {
        total,
        cross_entropy,
        contrastive,
    })
}

fn class_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    tape.nll_rows(logp, &targets)
}

/// Value of `L_se` for plain tensors.
pub fn loss_se(
    zg: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    text: &Tensor,
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (zg, logits, text) = (
        tape.constant(zg.clone()),
        tape.constant(logits.clone()),
        tape.constant(text.clone()),
    );
    let parts = loss_se_var(&mut tape, zg, logits, labels, text, temperature)?;
    Ok(tape.scalar(parts.total))
}

/// Value of `L_st` for spatial/temporal vectors already reduced to the text width.
pub fn loss_st(
    spatial: &Tensor,
    temporal: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    text: &Tensor,
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(spatial.clone());
    let t = tape.constant(temporal.clone());
    let l = tape.constant(logits.clone());
    let x = tape.constant(text.clone());
    let parts = loss_st_var(&mut tape, s, t, l, labels, x, temperature)?;
    Ok(tape.scalar(parts.total))
}

pub const HEAD_W: &str = "align.head.w";
pub const HEAD_B: &str = "align.head.b";
pub const REDUCE_W: &str = "align.st.w";
pub const REDUCE_B: &str = "align.st.b";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tokenizer: TokenizerConfig,
}

/// Encoder, tokenizer, classification head and the shared `C → D_txt` map
/// used to compare spatial/temporal tokens with text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub encoder: Encoder,
    pub tokenizer: SkeletonTokenizer,
    pub heads: Params,
    /// Classification label space.
    pub labels: Vec<String>,
    pub text_dim: usize,
    /// Length every spatial token vector is unified to.
    pub spatial_len: usize,
    /// Input standardisation per dataset name; datasets without an entry pass through.
    #[serde(default)]
    pub input_norms: BTreeMap<String, CoordinateNorm>,
}

/// One 64-frame training sequence with its graph and label index.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub sequence: SkeletonSequence,
    pub graph: usize,
    pub label: usize,
}

/// Taped forward pass of one batch.
pub struct BatchForward {
    pub semantic: Var,
    pub logits: Var,
    pub spatial: Vec<Var>,
    pub temporal: Vec<Var>,
}

impl AlignmentModel {
    pub fn new(
        config: &ModelConfig,
        labels: Vec<String>,
        text_dim: usize,
        max_joints: usize,
        seed: u64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::param("label space is empty"));
        }
        let encoder = Encoder::new(config.encoder.clone(), seed)?;
        let c = encoder.channels();
        let tokenizer = SkeletonTokenizer::new(c, config.tokenizer.clone(), seed.wrapping_add(1))?;
        let d = tokenizer.token_dim();
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut heads = Params::new();
        heads.insert(
            HEAD_W,
            Tensor::uniform(&[d, k], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        heads.insert(HEAD_B, Tensor::zeros(&[k]));
        heads.insert(
            REDUCE_W,
            Tensor::glorot(&[c, text_dim], c, text_dim, &mut rng),
        );
        heads.insert(REDUCE_B, Tensor::zeros(&[text_dim]));
        Ok(Self {
            encoder,
            tokenizer,
            heads,
            labels,
            text_dim,
            spatial_len: max_joints * c,
            input_norms: BTreeMap::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Encoder, tokenizer and head parameters in one store.
    pub fn all_params(&self) -> Params {
        let mut p = self.encoder.params.clone();
        p.extend(self.tokenizer.params.clone());
        p.extend(self.heads.clone());
        p
    }

    pub fn set_params(&mut self, all: &Params) -> Result<()> {
        for store in [
            &mut self.encoder.params,
            &mut self.tokenizer.params,
            &mut self.heads,
        ] {
            for (name, t) in store.iter_mut() {
                *t = all.get(name)?.clone();
            }
        }
        Ok(())
    }

    /// Fits one [`CoordinateNorm`] per dataset over the given sequences.
    pub fn fit_input_norms(&mut self, samples: &[TrainSample]) -> Result<()> {
        let mut groups: BTreeMap<&str, Vec<&SkeletonSequence>> = BTreeMap::new();
        for s in samples {
            groups
                .entry(s.sequence.dataset_id.as_str())
                .or_default()
                .push(&s.sequence);
        }
        self.input_norms = groups
            .into_iter()
            .map(|(name, seqs)| Ok((name.to_string(), CoordinateNorm::fit(seqs)?)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn normalize_input(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        match self.input_norms.get(&seq.dataset_id) {
            Some(norm) => norm.apply(seq),
            None => Ok(seq.clone()),
        }
    }

    fn token_vars(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        seq: &SkeletonSequence,
        graph: &JointGraph,
    ) -> Result<(TokenVars, (usize, usize, usize))> {
        let seq = self.normalize_input(seq)?;
        let f = self.encoder.forward(tape, bound, &seq, graph)?;
        let dims = (seq.frame_count(), graph.joint_count(), self.channels());
        Ok((self.tokenizer.forward(tape, bound, f, dims)?, dims))
    }

    /// Spatial and temporal tokens unified, pooled to `C` and mapped to the text width.
    fn reduced_tokens(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[(TokenVars, (usize, usize, usize))],
    ) -> Result<(Var, Var)> {
        let c = self.channels();
        let mut sp = Vec::with_capacity(tokens.len());
        let mut tp = Vec::with_capacity(tokens.len());
        for (v, (t, j, _)) in tokens {
            let us = unify_var(tape, v.spatial, self.spatial_len)?;
            sp.push(masked_mean_var(tape, us, j * c, c)?);
            tp.push(masked_mean_var(tape, v.temporal, t * c, c)?);
        }
        let mut out = Vec::with_capacity(2);
        for parts in [sp, tp] {
            let m = tape.concat_rows(&parts);
            let y = tape.matmul(m, bound.var(REDUCE_W));
            out.push(tape.add_row(y, bound.var(REDUCE_B)));
        }
        Ok((out[0], out[1]))
    }

    /// Records the batch loss; returns `(loss parts, logits)`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[&TrainSample],
        graphs: &[JointGraph],
        text: &TextEmbeddingTable,
        loss: LossKind,
        temperature: f64,
    ) -> Result<(LossParts, Var)> {
        let mut tokens = Vec::with_capacity(batch.len());
        for s in batch {
            let g = graphs
                .get(s.graph)
                .ok_or_else(|| Error::param(format!("graph index {} out of range", s.graph)))?;
            tokens.push(self.token_vars(tape, bound, &s.sequence, g)?);
        }
        let semantic: Vec<Var> = tokens.iter().map(|(v, _)| v.semantic).collect();
        let zg = tape.concat_rows(&semantic);
        let logits = tape.matmul(zg, bound.var(HEAD_W));
        let logits = tape.add_row(logits, bound.var(HEAD_B));
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let names: Vec<&str> = labels.iter().map(|&l| self.labels[l].as_str()).collect();
        let text_rows = tape.constant(text.rows_for(&names)?);
        let parts = match loss {
            LossKind::Se => {
                if text.dim() != self.tokenizer.token_dim() {
                    return Err(Error::param(format!(
                        "semantic tokens have width {} but text embeddings have {}",
                        self.tokenizer.token_dim(),
                        text.dim()
                    )));
                }
                loss_se_var(tape, zg, logits, &labels, text_rows, temperature)?
            }
            LossKind::St => {
                let (s, t) = self.reduced_tokens(tape, bound, &tokens)?;
                loss_st_var(tape, s, t, logits, &labels, text_rows, temperature)?
            }
        };
        Ok((parts, logits))
    }

    pub fn tokens(&self, seq: &SkeletonSequence, graph: &JointGraph) -> Result<TokenBundle> {
        let features = self.encoder.encode(&self.normalize_input(seq)?, graph)?;
        self.tokenizer.tokenize(&features)
    }

    /// Class logits of one sequence.
    pub fn logits(&self, seq: &SkeletonSequence, graph: &JointGraph) -> Result<Vec<f64>> {
        let tokens = self.tokens(seq, graph)?;
        let z = Tensor::matrix(1, tokens.semantic.len(), tokens.semantic)?;
        let mut out = z.matmul(self.heads.get(HEAD_W)?)?.into_data();
        out.iter_mut()
            .zip(self.heads.get(HEAD_B)?.data())
            .for_each(|(o, b)| *o += b);
        Ok(out)
    }

    pub fn predict(&self, seq: &SkeletonSequence, graph: &JointGraph) -> Result<usize> {
        Ok(argmax(&self.logits(seq, graph)?))
    }

    pub fn accuracy(&self, samples: &[TrainSample], graphs: &[JointGraph]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::param("accuracy of an empty sample set"));
        }
        let mut correct = 0;
        for s in samples {
            if self.predict(&s.sequence, &graphs[s.graph])? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Learning-rate schedule and optimiser settings for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSchedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Zero-based epochs from which the rate is multiplied by `decay_factor` once more.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl PretrainSchedule {
    pub fn desk() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 20,
            warmup_epochs: 5,
            decay_epochs: vec![10, 15],
            decay_factor: 0.1,
            batch_size: 16,
            max_grad_norm: 1.0,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            epochs: 200,
            decay_epochs: vec![100, 150, 175],
            batch_size: 64,
            ..Self::desk()
        }
    }

    /// Rate for a zero-based epoch: linear warmup from `lr/10` to `lr`, then step decay.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let base = self.learning_rate;
        if epoch < self.warmup_epochs && self.warmup_epochs > 1 {
            let frac = epoch as f64 / (self.warmup_epochs - 1) as f64;
            return base * (0.1 + 0.9 * frac);
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        base * self.decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::param("contrastive batches need at least 2 samples"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    /// Accuracy of the batch logits seen during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub schedule: PretrainSchedule,
    pub loss: LossKind,
    pub temperature: f64,
    pub seed: u64,
    /// Epochs already completed by the model being resumed; their shuffles are replayed.
    #[serde(default)]
    pub start_epoch: usize,
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0 disables).
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Batches of one epoch; a trailing single sample joins the previous batch.
fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().expect("at least one batch remains") = &order[start..];
    }
    batches
}

/// Trains encoder, tokenizer and heads with momentum SGD; `on_epoch` sees each epoch's metrics
/// together with the model as it stands after that epoch.
pub fn pretrain(
    model: &mut AlignmentModel,
    samples: &[TrainSample],
    graphs: &[JointGraph],
    text: &TextEmbeddingTable,
    options: &PretrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics, &AlignmentModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    options.schedule.validate()?;
    check_temperature(options.temperature)?;
    if samples.len() < 2 {
        return Err(Error::param("pretraining needs at least 2 samples"));
    }
    text.require(&model.labels)?;
    if options.start_epoch == 0 {
        model.fit_input_norms(samples)?;
    }
    let mut params = model.all_params();
    let mut sgd = SgdState::new(options.schedule.learning_rate, options.schedule.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(options.schedule.epochs);
    for epoch in 0..options.schedule.epochs {
        let lr = options.schedule.learning_rate_at(epoch);
        sgd.learning_rate = lr;
        order.shuffle(&mut rng);
        if epoch < options.start_epoch {
            continue;
        }
        let (mut loss_sum, mut ce_sum, mut con_sum, mut correct, mut seen) = (0.0, 0.0, 0.0, 0, 0);
        for (step, idx) in epoch_batches(&order, options.schedule.batch_size)
            .into_iter()
            .enumerate()
        {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let bound = tape.bind(&params, true);
            let (parts, logits) = model.batch_loss(
                &mut tape,
                &bound,
                &batch,
                graphs,
                text,
                options.loss,
                options.temperature,
            )?;
            let loss = tape.scalar(parts.total);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} at epoch {epoch}, step {step} (learning rate {lr})"
                )));
            }
            let lv = tape.value(logits);
            for (i, s) in batch.iter().enumerate() {
                if argmax(lv.row(i)) == s.label {
                    correct += 1;
                }
            }
            let n = batch.len() as f64;
            loss_sum += loss * n;
            ce_sum += tape.scalar(parts.cross_entropy) * n;
            con_sum += tape.scalar(parts.contrastive) * n;
            seen += batch.len();
            let mut grads = tape.backward(parts.total).for_params(&bound);
            clip_grad_norm(&mut grads, options.schedule.max_grad_norm);
            sgd.step(&mut params, &grads)?;
            model.set_params(&params)?;
        }
        let metrics = EpochMetrics {
            epoch,
            learning_rate: lr,
            loss: loss_sum / seen as f64,
            cross_entropy: ce_sum / seen as f64,
            contrastive: con_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        on_epoch(&metrics, model)?;
        history.push(metrics);
    }
    Ok(history)
}

const CHECKPOINT_FORMAT: &str = "emotok-alignment";
const CHECKPOINT_VERSION: u32 = 1;

/// A pretrained model together with the graphs of the datasets it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCheckpoint {
    pub format: String,
    pub version: u32,
    pub graphs: Vec<(String, JointGraphSpec)>,
    pub model: AlignmentModel,
}

impl AlignmentCheckpoint {
    pub fn new(model: AlignmentModel, graphs: Vec<(String, JointGraphSpec)>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            graphs,
            model,
        }
    }

    pub fn graph_for(&self, dataset: &str) -> Result<JointGraph> {
        let spec = self
            .graphs
            .iter()
            .find(|(n, _)| n == dataset)
            .map(|(_, s)| s)
            .ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint has no graph for dataset {dataset:?}"))
            })?;
        JointGraph::from_spec(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_joint_graph;
    use crate::numerics::{finite_diff_check, GradCheck};
    use crate::skeldata::{
        default_edges, resample_to_frames, synthesize_dataset, SynthProfile, TARGET_FRAMES,
    };
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, d], 1.0, &mut rng)
    }

    #[test]
    fn single_item_distributions_are_one() {
        let z = Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap();
        let (a, b) = similarity_distributions(&z, &z, 0.07).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[1.0]);
    }

    #[test]
    fn orthonormal_basis_diagonal() {
        let n = 4;
        let tau = 0.07;
        let z = Tensor::identity(n);
        let (p, q) = similarity_distributions(&z, &z, tau).unwrap();
        let e = (1.0 / tau).exp();
        let expected = e / (e + (n - 1) as f64);
        for i in 0..n {
            assert!(close(p.at2(i, i), expected, 1e-12));
            assert!(close(q.at2(i, i), expected, 1e-12));
        }
    }

    #[test]
    fn zero_skeleton_vector_is_degenerate() {
        let zs = Tensor::matrix(2, 2, vec![0., 0., 1., 0.]).unwrap();
        let zt = Tensor::identity(2);
        assert!(matches!(
            similarity_distributions(&zs, &zt, 0.07),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn contrastive_examples() {
        let y = target_matrix(&[0, 1]);
        assert_eq!(
            contrastive_loss_from_distributions(&y, &y, &y).unwrap(),
            0.0
        );
        let p = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let v = contrastive_loss_from_distributions(&p, &p, &y).unwrap();
        // ½ · mean(−ln 0.9 − ln 0.9, −ln 0.8 − ln 0.8)
        assert!(close(v, 0.164_252_033_486_018, 1e-15), "{v}");
    }

    #[test]
    fn duplicate_labels_prefer_uniform_rows() {
        let y = target_matrix(&[3, 3]);
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
        let loss_at = |a: f64| {
            let p = Tensor::matrix(2, 2, vec![a, 1.0 - a, 1.0 - a, a]).unwrap();
            contrastive_loss_from_distributions(&p, &p, &y).unwrap()
        };
        let best = (1..100)
            .map(|k| k as f64 / 100.0)
            .min_by(|a, b| loss_at(*a).total_cmp(&loss_at(*b)))
            .unwrap();
        assert!(close(best, 0.5, 1e-12));
        assert!(loss_at(0.5).abs() < 1e-15);
    }

    #[test]
    fn taped_contrastive_matches_plain() {
        let zs = random_matrix(5, 7, 1);
        let zt = random_matrix(5, 7, 2);
        let labels = [0, 1, 0, 2, 1];
        let y = target_matrix(&labels);
        let plain = contrastive_loss(&zs, &zt, &y, 0.2).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(zs), tape.constant(zt));
        let v = contrastive_var(&mut tape, a, b, Rc::new(y), 0.2).unwrap();
        assert!(close(tape.scalar(v), plain, 1e-12));
    }

    #[test]
    fn untrained_head_cross_entropy_near_log_k() {
        let labels: Vec<String> = (0..8).map(|i| format!("L{i}")).collect();
        let config = ModelConfig {
            encoder: EncoderConfig {
                base_channels: 8,
                layer_count: 2,
                ..Default::default()
            },
            tokenizer: TokenizerConfig { token_dim: 16 },
        };
        let model = AlignmentModel::new(&config, labels.clone(), 16, 4, 3).unwrap();
        let g = build_joint_graph(4, &default_edges(4)).unwrap();
        let d = synthesize_dataset(&SynthProfile::custom("ce", 4, &["A"], 8, 1)).unwrap();
        let samples: Vec<TrainSample> = d
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| TrainSample {
                sequence: resample_to_frames(s, TARGET_FRAMES).unwrap(),
                graph: 0,
                label: i,
            })
            .collect();
        let text = TextEmbeddingTable::synthetic(&labels, 16).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&model.all_params(), false);
        let batch: Vec<&TrainSample> = samples.iter().collect();
        let (parts, _) = model
            .batch_loss(&mut tape, &bound, &batch, &[g], &text, LossKind::Se, 0.07)
            .unwrap();
        let ce = tape.scalar(parts.cross_entropy);
        assert!((ce - 8f64.ln()).abs() <= 0.5, "{ce}");
    }

    #[test]
    fn st_with_text_equal_vectors_reduces_to_ce() {
        let text = random_matrix(3, 4, 5);
        let logits = random_matrix(3, 3, 6);
        let labels = [0, 1, 2];
        let st = loss_st(&text, &text, &logits, &labels, &text, 0.07).unwrap();
        let se = loss_se(&text, &logits, &labels, &text, 0.07).unwrap();
        assert!(close(st, se, 1e-12));
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = class_ce(&mut tape, l, &labels);
        let con = contrastive_loss(&text, &text, &target_matrix(&labels), 0.07).unwrap();
        assert!(close(st, tape.scalar(ce) + con, 1e-12));
    }

    #[test]
    fn schedule_shape() {
        let s = PretrainSchedule::desk();
        assert!(close(s.learning_rate_at(0), 0.01, 1e-15));
        assert!(close(s.learning_rate_at(4), 0.1, 1e-15));
        assert!(close(s.learning_rate_at(9), 0.1, 1e-15));
        assert!(close(s.learning_rate_at(10), 0.01, 1e-15));
        assert!(close(s.learning_rate_at(15), 0.001, 1e-15));
        let p = PretrainSchedule::paper_scale();
        assert_eq!(
            (p.learning_rate, p.epochs, p.warmup_epochs, p.batch_size),
            (0.1, 200, 5, 64)
        );
        assert_eq!(p.decay_epochs, [100, 150, 175]);
        let text = toml::to_string(&p).unwrap();
        assert_eq!(toml::from_str::<PretrainSchedule>(&text).unwrap(), p);
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), [4, 5]);
        let b = epoch_batches(&order[..6], 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), [4, 2]);
    }

    #[test]
    fn embedding_file_round_trip_and_errors() {
        let labels: Vec<String> = ["Neutral", "Joy", "Shame"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let t = TextEmbeddingTable::synthetic(&labels, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.txt");
        t.save(&path).unwrap();
        let back = load_text_embeddings(&path, &labels).unwrap();
        assert_eq!(back.get("Joy"), t.get("Joy"));
        let mut more = labels.clone();
        more.push("Anger".into());
        let err = load_text_embeddings(&path, &more).unwrap_err().to_string();
        assert!(err.contains("Anger"), "{err}");
        std::fs::write(&path, "1 3\nJoy 2 0 0\n").unwrap();
        let back = load_text_embeddings(&path, &["Joy".to_string()]).unwrap();
        assert_eq!(back.get("Joy").unwrap(), &[1.0, 0.0, 0.0]);
        std::fs::write(&path, "1 3\nJoy 2 0\n").unwrap();
        assert!(load_text_embeddings(&path, &[]).is_err());
    }

    proptest! {
        #[test]
        fn similarity_rows_sum_to_one_and_scale_invariant(
            n in 1usize..12, d in 1usize..16, seed in any::<u64>(), k in 0.01f64..100.0,
        ) {
            let zs = random_matrix(n, d, seed);
            let zt = random_matrix(n, d, seed ^ 0x5555);
            prop_assume!((0..n).all(|i| l2_norm(zs.row(i)) > 1e-6 && l2_norm(zt.row(i)) > 1e-6));
            let (p, q) = similarity_distributions(&zs, &zt, 0.07).unwrap();
            for i in 0..n {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            let scaled = zs.map(|v| v * k);
            let (p2, q2) = similarity_distributions(&scaled, &zt, 0.07).unwrap();
            for (a, b) in p.data().iter().zip(p2.data()).chain(q.data().iter().zip(q2.data())) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % 3).collect();
            let y = target_matrix(&labels);
            prop_assert!(contrastive_loss(&zs, &zt, &y, 0.07).unwrap() >= 0.0);
        }
    }

    #[test]
    fn taped_losses_pass_gradient_check() {
        let labels = [0usize, 1, 0, 2];
        let zs = random_matrix(4, 5, 7);
        let zt = random_matrix(4, 5, 8);
        let logits = random_matrix(4, 3, 9);
        let run = |flat: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.param(Tensor::new(vec![4, 5], flat[..20].to_vec()).unwrap());
            let t = tape.param(Tensor::new(vec![4, 5], flat[20..40].to_vec()).unwrap());
            let l = tape.param(Tensor::new(vec![4, 3], flat[40..].to_vec()).unwrap());
            let text = tape.constant(zt.clone());
            let se = loss_se_var(&mut tape, a, l, &labels, text, 0.3).unwrap();
            let st = loss_st_var(&mut tape, a, t, l, &labels, text, 0.3).unwrap();
            let total = tape.add(se.total, st.total);
            let g = tape.backward(total);
            let grad: Vec<f64> = [a, t, l]
                .iter()
                .flat_map(|v| g.get(*v).unwrap().data().to_vec())
                .collect();
            (tape.scalar(total), grad)
        };
        let mut flat = zs.data().to_vec();
        flat.extend_from_slice(random_matrix(4, 5, 10).data());
        flat.extend_from_slice(logits.data());
        let (_, grad) = run(&flat);
        let report = finite_diff_check(|p| run(p).0, &flat, &grad, &GradCheck::default());
        assert!(report.passed, "{report:?}");
    }
}
