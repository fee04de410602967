//! Base language-model training and adapter fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{completion_loss, DecoderInput, LossTargets, TinyDecoder};
use super::lora::{LoraAdapter, LoraConfig, ProjectionLayer};
use super::prompt::PromptExchange;
use crate::align::clip_grad_norm;
use crate::encoder::{read_json, write_json};
use crate::error::{Error, Result};
use crate::evalkit::PromptKind;
use crate::numerics::{AdamState, BoundParams, Params, Tape, Tensor, Var};
use crate::unify::MaskPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseLmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaseLmConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

/// Shuffled passes over `0..n` cut into batches of `size`.
struct BatchCycle {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchCycle {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            cursor: n,
            size: size.min(n).max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.order.shuffle(&mut c.rng);
        c.cursor = 0;
        c
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "loss became {loss} at step {step}"
        )));
    }
    Ok(())
}

/// Next-token training of every decoder weight on plain text documents.
pub fn pretrain_base(
    decoder: &mut TinyDecoder,
    corpus: &[String],
    config: &BaseLmConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if corpus.is_empty() {
        return Err(Error::param("base corpus is empty"));
    }
    let docs: Vec<(DecoderInput, LossTargets)> = corpus
        .iter()
        .map(|text| {
            let input = decoder.input("", Some(text), None, MaskPolicy::Drop)?;
            let targets = LossTargets::completion_only(&input);
            Ok((input, targets))
        })
        .collect::<Result<_>>()?;
    let mut adam = AdamState::new(config.learning_rate);
    let mut batches = BatchCycle::new(docs.len(), config.batch_size, config.seed);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let bound = tape.bind(&decoder.params, true);
        let batch = batches.next_batch();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (input, targets) = &docs[i];
            if !targets.supervised.iter().any(|&s| s) {
                continue;
            }
            let logits = decoder.forward(&mut tape, &bound, None, input, None, None)?;
            losses.push(completion_loss(&mut tape, logits, targets)?);
        }
        if losses.is_empty() {
            return Err(Error::param(
                "base corpus documents need at least two tokens",
            ));
        }
        let loss = mean_of(&mut tape, &losses);
        let value = tape.scalar(loss);
        check_finite(value, step)?;
        let mut grads = tape.backward(loss).for_params(&bound);
        clip_grad_norm(&mut grads, 1.0);
        adam.step(&mut decoder.params, &grads)?;
        let m = StepMetrics {
            step,
            learning_rate: config.learning_rate,
            loss: value,
        };
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    if vars.len() == 1 {
        return vars[0];
    }
    let rows: Vec<Var> = vars.iter().map(|&v| tape.reshape(v, &[1, 1])).collect();
    let stacked = tape.concat_rows(&rows);
    tape.mean(stacked)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length in steps before the constant peak rate.
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub policy: MaskPolicy,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            learning_rate: 5e-3,
            warmup_steps: 10,
            max_grad_norm: 1.0,
            seed: 0,
            policy: MaskPolicy::Drop,
        }
    }
}

impl FinetuneConfig {
    /// Full-scale schedules: 10,000 description steps at batch 16 and
    /// 800,000 recognition steps at batch 64, peak rate 1e-5.
    pub fn paper_scale(kind: PromptKind) -> Self {
        let (steps, batch_size) = match kind {
            PromptKind::Description => (10_000, 16),
            PromptKind::Recognition => (800_000, 64),
        };
        Self {
            steps,
            batch_size,
            learning_rate: 1e-5,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::param(format!("invalid fine-tune settings {self:?}")));
        }
        Ok(())
    }
}

/// Parameters that fine-tuning updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeState {
    pub adapter: LoraAdapter,
    pub projection: ProjectionLayer,
}

impl BridgeState {
    pub fn new(
        decoder: &TinyDecoder,
        lora: LoraConfig,
        projection: ProjectionLayer,
        seed: u64,
    ) -> Result<Self> {
        if projection.output_dim != decoder.config.d_model {
            return Err(Error::param(format!(
                "projection width {} does not match decoder width {}",
                projection.output_dim, decoder.config.d_model
            )));
        }
        Ok(Self {
            adapter: LoraAdapter::new(lora, &decoder.lora_targets(), seed)?,
            projection,
        })
    }

    pub fn trainable(&self) -> Params {
        let mut p = self.adapter.params.clone();
        p.extend(self.projection.params.clone());
        p
    }

    fn absorb(&mut self, all: &Params) -> Result<()> {
        for (name, t) in self.adapter.params.iter_mut() {
            *t = all.get(name)?.clone();
        }
        for (name, t) in self.projection.params.iter_mut() {
            *t = all.get(name)?.clone();
        }
        Ok(())
    }

    pub fn generate(
        &self,
        decoder: &TinyDecoder,
        prompt: &str,
        slots: &super::prompt::SkeletonSlots,
        options: &super::decoder::GenerateOptions,
    ) -> Result<String> {
        decoder.generate(
            Some(&self.adapter),
            Some(&self.projection),
            prompt,
            Some(slots),
            options,
        )
    }
}

/// Teacher-forced completion loss of a batch, recorded on `tape`.
pub fn exchange_loss(
    tape: &mut Tape,
    decoder: &TinyDecoder,
    state: &BridgeState,
    exchanges: &[&PromptExchange],
    policy: MaskPolicy,
    mut dropout: Option<&mut ChaCha8Rng>,
    trainable: &Params,
) -> Result<(Var, BoundParams)> {
    let base = tape.bind(&decoder.params, false);
    let bound = tape.bind(trainable, true);
    let mut losses = Vec::with_capacity(exchanges.len());
    for ex in exchanges {
        let input = decoder.input(&ex.prompt, Some(&ex.completion), Some(&ex.slots), policy)?;
        let targets = LossTargets::completion_only(&input);
        let slots = state.projection.project_var(tape, &bound, &ex.slots)?;
        let logits = decoder.forward(
            tape,
            &base,
            Some((&state.adapter, &bound)),
            &input,
            Some(slots),
            dropout.as_deref_mut(),
        )?;
        losses.push(completion_loss(tape, logits, &targets)?);
    }
    if losses.is_empty() {
        return Err(Error::param("empty exchange batch"));
    }
    Ok((mean_of(tape, &losses), bound))
}

/// Adapter and projection training on `exchanges`; the decoder stays untouched.
pub fn finetune(
    decoder: &TinyDecoder,
    state: &mut BridgeState,
    exchanges: &[PromptExchange],
    config: &FinetuneConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    config.validate()?;
    if exchanges.is_empty() {
        return Err(Error::param("fine-tuning needs at least one exchange"));
    }
    let mut adam = AdamState::new(config.learning_rate);
    let mut batches = BatchCycle::new(exchanges.len(), config.batch_size, config.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d80f);
    let mut params = state.trainable();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&PromptExchange> = batches
            .next_batch()
            .into_iter()
            .map(|i| &exchanges[i])
            .collect();
        let mut tape = Tape::new();
        let (loss, bound) = exchange_loss(
            &mut tape,
            decoder,
            state,
            &batch,
            config.policy,
            Some(&mut drop_rng),
            &params,
        )?;
        let value = tape.scalar(loss);
        check_finite(value, step)?;
        let mut grads = tape.backward(loss).for_params(&bound);
        clip_grad_norm(&mut grads, config.max_grad_norm);
        adam.learning_rate = config.learning_rate_at(step);
        adam.step(&mut params, &grads)?;
        state.absorb(&params)?;
        let m = StepMetrics {
            step,
            learning_rate: adam.learning_rate,
            loss: value,
        };
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

const ADAPTER_FORMAT: &str = "emotok-adapter";

/// Versioned adapter file: LoRA settings, factor tensors and the projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<String>,
    pub tensors: BTreeMap<String, Tensor>,
    pub projection: ProjectionLayer,
}

impl AdapterCheckpoint {
    pub fn new(stage: &str, state: &BridgeState) -> Self {
        Self {
            format: ADAPTER_FORMAT.into(),
            version: 1,
            stage: stage.into(),
            rank: state.adapter.config.rank,
            alpha: state.adapter.config.alpha,
            dropout: state.adapter.config.dropout,
            targets: state.adapter.targets.clone(),
            tensors: state
                .adapter
                .params
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            projection: state.projection.clone(),
        }
    }

    pub fn into_state(self) -> Result<BridgeState> {
        let config = LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        };
        config.validate()?;
        let mut params = Params::new();
        for (k, v) in self.tensors {
            params.insert(k, v);
        }
        Ok(BridgeState {
            adapter: LoraAdapter {
                config,
                targets: self.targets,
                params,
            },
            projection: self.projection,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != ADAPTER_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!(
                "{} is not a version 1 {ADAPTER_FORMAT} file",
                path.display()
            )));
        }
        Ok(ck)
    }
}
