//! Skeleton-aware language interface: projection of skeleton tokens into a
//! decoder's embedding space, prompt assembly, LoRA fine-tuning and two
//! interchangeable decoder backends.

pub mod decoder;
pub mod lora;
pub mod prompt;
pub mod remote;
pub mod train;
pub mod vocab;

pub use decoder::{
    completion_loss, DecoderInput, GenerateOptions, LossTargets, TinyDecoder, TinyDecoderConfig,
};
pub use lora::{lora_forward, lora_linear, LoraAdapter, LoraConfig, ProjectionLayer};
pub use prompt::{
    assemble_prompt, description_exchange, recognition_exchange, Granularity, PromptExchange,
    SkeletonSlots, RECOGNITION_PROMPT,
};
pub use remote::{
    MockBehaviour, MockServer, RemoteClient, RemoteConfig, RemoteRequest, API_KEY_ENV,
};
pub use train::{
    exchange_loss, finetune, pretrain_base, AdapterCheckpoint, BaseLmConfig, BridgeState,
    FinetuneConfig, StepMetrics,
};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::numerics::Tape;

/// Anything that turns a prompt plus skeleton slots into text.
pub trait SkeletonDecoder {
    fn name(&self) -> &'static str;
    fn generate(
        &self,
        prompt: &str,
        slots: &SkeletonSlots,
        options: &GenerateOptions,
    ) -> Result<String>;
}

/// The built-in decoder with its trained adapter and projection.
#[derive(Clone, Debug)]
pub struct TinyBackend {
    pub decoder: TinyDecoder,
    pub state: BridgeState,
}

impl SkeletonDecoder for TinyBackend {
    fn name(&self) -> &'static str {
        "tiny"
    }

    fn generate(
        &self,
        prompt: &str,
        slots: &SkeletonSlots,
        options: &GenerateOptions,
    ) -> Result<String> {
        self.state.generate(&self.decoder, prompt, slots, options)
    }
}

/// An external service reached over HTTP. Skeleton tokens are sent projected
/// when a projection is available and raw otherwise; padded slots are omitted.
#[derive(Debug)]
pub struct RemoteBackend {
    pub client: RemoteClient,
    pub projection: Option<ProjectionLayer>,
}

impl RemoteBackend {
    pub fn skeleton_rows(&self, slots: &SkeletonSlots) -> Result<Vec<Vec<f64>>> {
        let Some(p) = &self.projection else {
            return Ok(slots.valid_rows());
        };
        let mut tape = Tape::new();
        let bound = tape.bind(&p.params, false);
        let v = p.project_var(&mut tape, &bound, slots)?;
        let t = tape.value(v);
        Ok((0..slots.len())
            .filter(|&i| slots.valid[i])
            .map(|i| t.row(i).to_vec())
            .collect())
    }
}

impl SkeletonDecoder for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn generate(
        &self,
        prompt: &str,
        slots: &SkeletonSlots,
        options: &GenerateOptions,
    ) -> Result<String> {
        self.client.decode(&RemoteRequest {
            prompt: prompt.to_string(),
            skeleton_tokens: self.skeleton_rows(slots)?,
            max_tokens: options.max_tokens,
        })
    }
}

#[derive(Debug)]
pub enum Backend {
    Tiny(Box<TinyBackend>),
    Remote(RemoteBackend),
}

impl Backend {
    pub fn decoder(&self) -> &dyn SkeletonDecoder {
        match self {
            Backend::Tiny(t) => t.as_ref(),
            Backend::Remote(r) => r,
        }
    }

    /// Fine-tuning is only possible on the built-in decoder.
    pub fn trainable(&mut self) -> Result<&mut TinyBackend> {
        match self {
            Backend::Tiny(t) => Ok(t),
            Backend::Remote(_) => Err(Error::Precondition(
                "the remote backend is inference-only; fine-tuning requires the tiny decoder"
                    .into(),
            )),
        }
    }
}
