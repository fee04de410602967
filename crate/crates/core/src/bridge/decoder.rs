//! A small pre-norm causal transformer that stands in for the language model.
//! Skeleton tokens enter as embedding-space vectors at the positions of the
//! `<SkeletonFeature>` marker.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{lora_a_name, lora_b_name, lora_linear, LoraAdapter};
use super::prompt::SkeletonSlots;
use super::vocab::{Vocab, EOS, SKELETON_FEATURE};
use crate::encoder::{read_json, write_json};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Params, Tape, Tensor, Var};
use crate::unify::MaskPolicy;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyDecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Text positions available besides the skeleton slots.
    pub context: usize,
    pub mlp_ratio: usize,
}

impl Default for TinyDecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 2,
            heads: 4,
            context: 128,
            mlp_ratio: 4,
        }
    }
}

impl TinyDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.layers == 0
            || self.heads == 0
            || self.context == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::param("decoder dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

fn lname(layer: usize, part: &str) -> String {
    format!("dec.{layer}.{part}")
}

pub const TOK_EMB: &str = "dec.tok";
pub const POS_EMB: &str = "dec.pos";
pub const LNF_G: &str = "dec.lnf.g";
pub const LNF_B: &str = "dec.lnf.b";
pub const HEAD: &str = "dec.head";

/// Token ids of one decoder pass with the skeleton marker expanded into slots.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    pub ids: Vec<usize>,
    pub slot_positions: Vec<usize>,
    /// Per position: may later positions attend to it.
    pub key_valid: Vec<bool>,
    /// Per slot: multiplier applied to its projected vector.
    pub slot_gain: Vec<f64>,
    /// Length of the prompt part, slots included.
    pub prompt_len: usize,
}

/// Next-token targets; only `supervised` positions contribute to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub next: Vec<usize>,
    pub supervised: Vec<bool>,
}

impl LossTargets {
    /// Every position inside the completion predicts its successor.
    pub fn completion_only(input: &DecoderInput) -> Self {
        let n = input.ids.len();
        let next = (0..n)
            .map(|i| if i + 1 < n { input.ids[i + 1] } else { 0 })
            .collect();
        let supervised = (0..n)
            .map(|i| i + 1 < n && i + 1 >= input.prompt_len)
            .collect();
        Self { next, supervised }
    }

    fn as_options(&self) -> Vec<Option<usize>> {
        self.next
            .iter()
            .zip(&self.supervised)
            .map(|(&t, &s)| s.then_some(t))
            .collect()
    }
}

/// Mean next-token cross-entropy over supervised positions.
pub fn completion_loss(tape: &mut Tape, logits: Var, targets: &LossTargets) -> Result<Var> {
    if !targets.supervised.iter().any(|&s| s) {
        return Err(Error::param("no supervised positions"));
    }
    let logp = tape.log_softmax_rows(logits);
    Ok(tape.nll_rows(logp, &targets.as_options()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    /// `None` decodes greedily.
    pub sample_seed: Option<u64>,
    pub temperature: f64,
    pub policy: MaskPolicy,
}

impl GenerateOptions {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            sample_seed: None,
            temperature: 1.0,
            policy: MaskPolicy::Drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyDecoder {
    pub config: TinyDecoderConfig,
    pub vocab: Vocab,
    pub slot_capacity: usize,
    pub params: Params,
}

impl TinyDecoder {
    pub fn new(
        config: TinyDecoderConfig,
        vocab: Vocab,
        slot_capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::param("empty vocabulary"));
        }
        let d = config.d_model;
        let h = d * config.mlp_ratio;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        p.insert(TOK_EMB, Tensor::uniform(&[v, d], 0.1, &mut rng));
        p.insert(
            POS_EMB,
            Tensor::uniform(&[config.context + slot_capacity, d], 0.1, &mut rng),
        );
        for l in 0..config.layers {
            for part in ["ln1", "ln2"] {
                p.insert(lname(l, &format!("{part}.g")), Tensor::filled(&[d], 1.0));
                p.insert(lname(l, &format!("{part}.b")), Tensor::zeros(&[d]));
            }
            for part in ["wq", "wk", "wv", "wo"] {
                p.insert(lname(l, part), Tensor::glorot(&[d, d], d, d, &mut rng));
            }
            p.insert(lname(l, "bo"), Tensor::zeros(&[d]));
            p.insert(lname(l, "w1"), Tensor::glorot(&[h, d], d, h, &mut rng));
            p.insert(lname(l, "b1"), Tensor::zeros(&[h]));
            p.insert(lname(l, "w2"), Tensor::glorot(&[d, h], h, d, &mut rng));
            p.insert(lname(l, "b2"), Tensor::zeros(&[d]));
        }
        p.insert(LNF_G, Tensor::filled(&[d], 1.0));
        p.insert(LNF_B, Tensor::zeros(&[d]));
        p.insert(HEAD, Tensor::glorot(&[v, d], d, v, &mut rng));
        Ok(Self {
            config,
            vocab,
            slot_capacity,
            params: p,
        })
    }

    /// Matrices adapted by LoRA: query and value projections of every layer.
    pub fn lora_targets(&self) -> Vec<(String, (usize, usize))> {
        let d = self.config.d_model;
        (0..self.config.layers)
            .flat_map(|l| [lname(l, "wq"), lname(l, "wv")])
            .map(|n| (n, (d, d)))
            .collect()
    }

    /// Ids for `prompt` followed by `completion` and `<eos>` when given.
    pub fn input(
        &self,
        prompt: &str,
        completion: Option<&str>,
        slots: Option<&SkeletonSlots>,
        policy: MaskPolicy,
    ) -> Result<DecoderInput> {
        let marker = self.vocab.special(SKELETON_FEATURE);
        let prompt_ids = self.vocab.encode(prompt);
        let markers = prompt_ids.iter().filter(|&&i| i == marker).count();
        let mut ids = Vec::new();
        let mut slot_positions = Vec::new();
        let mut key_valid = Vec::new();
        let mut slot_gain = Vec::new();
        for &id in &prompt_ids {
            if id == marker && slots.is_some() {
                if markers != 1 {
                    return Err(Error::param(
                        "a prompt with skeleton tokens needs exactly one <SkeletonFeature> marker",
                    ));
                }
                for &valid in &slots.expect("checked").valid {
                    slot_positions.push(ids.len());
                    ids.push(marker);
                    key_valid.push(valid || policy == MaskPolicy::Zeros);
                    slot_gain.push(if valid { 1.0 } else { 0.0 });
                }
            } else {
                ids.push(id);
                key_valid.push(true);
            }
        }
        let prompt_len = ids.len();
        if let Some(c) = completion {
            ids.extend(self.vocab.encode(c));
            ids.push(self.vocab.special(EOS));
            key_valid.resize(ids.len(), true);
        }
        self.check_len(&ids, slot_positions.len())?;
        Ok(DecoderInput {
            ids,
            slot_positions,
            key_valid,
            slot_gain,
            prompt_len,
        })
    }

    fn check_len(&self, ids: &[usize], slots: usize) -> Result<()> {
        if slots > self.slot_capacity || ids.len() - slots > self.config.context {
            return Err(Error::param(format!(
                "sequence of {} text tokens and {slots} slots exceeds context {} + {}",
                ids.len() - slots,
                self.config.context,
                self.slot_capacity
            )));
        }
        if ids.is_empty() {
            return Err(Error::param("empty decoder input"));
        }
        Ok(())
    }

    /// Logits `(n, vocab)` for `input`. `slot_emb` holds projected slot vectors
    /// `(slots, d_model)`; `dropout` enables adapter dropout with the given generator.
    pub fn forward(
        &self,
        tape: &mut Tape,
        base: &BoundParams,
        adapter: Option<(&LoraAdapter, &BoundParams)>,
        input: &DecoderInput,
        slot_emb: Option<Var>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = input.ids.len();
        let d = self.config.d_model;
        self.check_len(&input.ids, input.slot_positions.len())?;
        let mut x = tape.gather_rows(base.var(TOK_EMB), &input.ids);
        if let Some(se) = slot_emb {
            if tape.value(se).rows() != input.slot_positions.len() || tape.value(se).cols() != d {
                return Err(Error::param(
                    "projected slots do not match the input's slot positions",
                ));
            }
            let gains: Vec<f64> = input
                .slot_gain
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g, d))
                .collect();
            let se = if input.slot_gain.iter().all(|&g| g == 1.0) {
                se
            } else {
                tape.mul_const(se, gains)
            };
            x = tape.replace_rows(x, se, &input.slot_positions);
        } else if !input.slot_positions.is_empty() {
            return Err(Error::param(
                "input has skeleton slots but no slot embeddings were given",
            ));
        }
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(base.var(POS_EMB), &positions);
        x = tape.add(x, pos);

        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = input.key_valid[j] || j == i;
            }
        }
        let heads = self.config.heads;
        let dh = d / heads;
        for l in 0..self.config.layers {
            let h = tape.layer_norm(
                x,
                base.var(&lname(l, "ln1.g")),
                base.var(&lname(l, "ln1.b")),
                LN_EPS,
            );
            let mut lin = |tape: &mut Tape, part: &str| {
                let name = lname(l, part);
                let ab = adapter
                    .filter(|(a, _)| a.adapts(&name))
                    .map(|(_, b)| (b.var(&lora_a_name(&name)), b.var(&lora_b_name(&name))));
                let (scale, mask) = match adapter {
                    Some((a, _)) => {
                        let mask = dropout
                            .as_deref_mut()
                            .filter(|_| ab.is_some() && a.config.dropout > 0.0)
                            .map(|rng| {
                                let keep = 1.0 - a.config.dropout;
                                (0..n * a.config.rank)
                                    .map(|_| {
                                        if rng.random::<f64>() < keep {
                                            1.0 / keep
                                        } else {
                                            0.0
                                        }
                                    })
                                    .collect()
                            });
                        (a.config.scale(), mask)
                    }
                    None => (0.0, None),
                };
                lora_linear(tape, h, base.var(&name), ab, scale, mask)
            };
            let q = lin(tape, "wq");
            let k = lin(tape, "wk");
            let v = lin(tape, "wv");
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_nt(qh, kh);
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let p = tape.masked_softmax_rows(s, &allowed);
                outs.push(tape.matmul(p, vh));
            }
            let o = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)
            };
            let o = tape.matmul_nt(o, base.var(&lname(l, "wo")));
            let o = tape.add_row(o, base.var(&lname(l, "bo")));
            x = tape.add(x, o);

            let h2 = tape.layer_norm(
                x,
                base.var(&lname(l, "ln2.g")),
                base.var(&lname(l, "ln2.b")),
                LN_EPS,
            );
            let m = tape.matmul_nt(h2, base.var(&lname(l, "w1")));
            let m = tape.add_row(m, base.var(&lname(l, "b1")));
            let m = tape.gelu(m);
            let m = tape.matmul_nt(m, base.var(&lname(l, "w2")));
            let m = tape.add_row(m, base.var(&lname(l, "b2")));
            x = tape.add(x, m);
        }
        let x = tape.layer_norm(x, base.var(LNF_G), base.var(LNF_B), LN_EPS);
        Ok(tape.matmul_nt(x, base.var(HEAD)))
    }

    /// Autoregressive continuation of `prompt` until `<eos>` or `max_tokens`.
    pub fn generate(
        &self,
        adapter: Option<&LoraAdapter>,
        projection: Option<&super::lora::ProjectionLayer>,
        prompt: &str,
        slots: Option<&SkeletonSlots>,
        options: &GenerateOptions,
    ) -> Result<String> {
        let mut tape = Tape::new();
        let base = tape.bind(&self.params, false);
        let ad = adapter.map(|a| (a, tape.bind(&a.params, false)));
        let slot_emb = match (slots, projection) {
            (Some(s), Some(p)) => {
                let pb = tape.bind(&p.params, false);
                Some(p.project_var(&mut tape, &pb, s)?)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::param("skeleton slots need a projection layer")),
        };
        let mut input = self.input(prompt, None, slots, options.policy)?;
        let eos = self.vocab.special(EOS);
        let mut rng = options.sample_seed.map(ChaCha8Rng::seed_from_u64);
        let mut out = Vec::new();
        for _ in 0..options.max_tokens {
            if input.ids.len() - input.slot_positions.len() >= self.config.context {
                break;
            }
            let logits = self.forward(
                &mut tape,
                &base,
                ad.as_ref().map(|(a, b)| (*a, b)),
                &input,
                slot_emb,
                None,
            )?;
            let t = tape.value(logits);
            let last = t.row(t.rows() - 1);
            let next = match rng.as_mut() {
                None => crate::align::argmax(last),
                Some(r) => sample(last, options.temperature, r)?,
            };
            if next == eos {
                break;
            }
            out.push(next);
            input.ids.push(next);
            input.key_valid.push(true);
        }
        self.vocab.decode(&out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &DecoderCheckpoint {
                format: DECODER_FORMAT.into(),
                version: 1,
                decoder: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: DecoderCheckpoint = read_json(path)?;
        if ck.format != DECODER_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!(
                "{} is not a version 1 {DECODER_FORMAT} file",
                path.display()
            )));
        }
        ck.decoder.config.validate()?;
        Ok(ck.decoder)
    }
}

const DECODER_FORMAT: &str = "emotok-decoder";

#[derive(Serialize, Deserialize)]
struct DecoderCheckpoint {
    format: String,
    version: u32,
    decoder: TinyDecoder,
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let p = crate::numerics::softmax(logits, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.len() - 1)
}
