//! Experiment configuration: one TOML file describing data, models,
//! schedules and the decoder backend.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use emotok_core::align::{LossKind, ModelConfig, PretrainSchedule, DEFAULT_TEMPERATURE};
use emotok_core::bridge::{
    BaseLmConfig, FinetuneConfig, Granularity, LoraConfig, RemoteConfig, TinyDecoderConfig,
};
use emotok_core::evalkit::{OutputFormat, PromptKind};
use emotok_core::unify::MaskPolicy;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One shared model over every dataset.
    #[default]
    Joint,
    /// One model per dataset.
    Separate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum TaskOrder {
    /// Description first, then recognition.
    #[default]
    #[serde(rename = "d-r")]
    #[value(name = "d-r")]
    DescriptionFirst,
    /// Recognition first, then description.
    #[serde(rename = "r-d")]
    #[value(name = "r-d")]
    RecognitionFirst,
}

impl TaskOrder {
    /// The configured tasks in training order.
    pub fn arrange(self, tasks: &[PromptKind]) -> Vec<PromptKind> {
        let seq = match self {
            TaskOrder::DescriptionFirst => [PromptKind::Description, PromptKind::Recognition],
            TaskOrder::RecognitionFirst => [PromptKind::Recognition, PromptKind::Description],
        };
        seq.into_iter().filter(|k| tasks.contains(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Tiny,
    Remote,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifests: Vec<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Label lexicon; the bundled one is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub temperature: f64,
    pub schedule: PretrainSchedule,
    /// Label embeddings file; deterministic pseudo-embeddings are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
    /// Width of the pseudo-embeddings; defaults to the token width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            loss: LossKind::Se,
            temperature: DEFAULT_TEMPERATURE,
            schedule: PretrainSchedule::desk(),
            text_embeddings: None,
            text_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub granularity: Granularity,
    pub order: TaskOrder,
    pub tasks: Vec<PromptKind>,
    pub format: OutputFormat,
    pub policy: MaskPolicy,
    pub decoder: TinyDecoderConfig,
    pub lora: LoraConfig,
    pub base: BaseLmConfig,
    pub recognition: FinetuneConfig,
    pub description: FinetuneConfig,
    /// Cap on training exchanges per task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_exchanges: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Semantic,
            order: TaskOrder::DescriptionFirst,
            tasks: vec![PromptKind::Recognition, PromptKind::Description],
            format: OutputFormat::B,
            policy: MaskPolicy::Drop,
            decoder: TinyDecoderConfig::default(),
            lora: LoraConfig::desk(),
            base: BaseLmConfig::default(),
            recognition: FinetuneConfig::default(),
            description: FinetuneConfig::default(),
            max_exchanges: None,
            max_new_tokens: 48,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub remote: RemoteConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: EvalSplit,
    pub tasks: Vec<PromptKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: EvalSplit::Test,
            tasks: vec![PromptKind::Recognition, PromptKind::Description],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paper_scale: bool,
    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub order: Option<TaskOrder>,
    pub granularity: Option<Granularity>,
    pub strategy: Option<Strategy>,
    pub format: Option<OutputFormat>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, turning relative file references into absolute paths
    /// anchored at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let base = std::path::absolute(parent.unwrap_or(Path::new(".")))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.manifests.iter_mut().for_each(fix);
        self.data.lexicon.iter_mut().for_each(fix);
        self.pretrain.text_embeddings.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.paper_scale {
            self.pretrain.schedule = PretrainSchedule::paper_scale();
            self.bridge.lora = LoraConfig::default();
            self.bridge.recognition = FinetuneConfig {
                policy: self.bridge.policy,
                ..FinetuneConfig::paper_scale(PromptKind::Recognition)
            };
            self.bridge.description = FinetuneConfig {
                policy: self.bridge.policy,
                ..FinetuneConfig::paper_scale(PromptKind::Description)
            };
        }
        if let Some(b) = o.backend {
            self.backend.kind = b;
        }
        if let Some(e) = &o.endpoint {
            self.backend.remote.endpoint = e.clone();
        }
        if let Some(x) = o.order {
            self.bridge.order = x;
        }
        if let Some(x) = o.granularity {
            self.bridge.granularity = x;
        }
        if let Some(x) = o.strategy {
            self.pretrain.strategy = x;
        }
        if let Some(x) = o.format {
            self.bridge.format = x;
        }
    }

    /// Checks referenced files and value ranges.
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.data.manifests.is_empty(), "data.manifests is empty");
        let files = self
            .data
            .manifests
            .iter()
            .chain(&self.data.lexicon)
            .chain(&self.pretrain.text_embeddings);
        for f in files {
            ensure!(
                f.is_file(),
                "referenced file {} does not exist",
                f.display()
            );
        }
        self.pretrain.schedule.validate()?;
        ensure!(
            self.pretrain.temperature > 0.0 && self.pretrain.temperature.is_finite(),
            "pretrain.temperature must be positive"
        );
        self.bridge.decoder.validate()?;
        self.bridge.lora.validate()?;
        self.bridge.recognition.validate()?;
        self.bridge.description.validate()?;
        ensure!(
            self.bridge.recognition.policy == self.bridge.policy
                && self.bridge.description.policy == self.bridge.policy,
            "bridge.recognition.policy and bridge.description.policy must equal bridge.policy"
        );
        ensure!(!self.bridge.tasks.is_empty(), "bridge.tasks is empty");
        ensure!(!self.eval.tasks.is_empty(), "eval.tasks is empty");
        ensure!(
            self.bridge.max_new_tokens > 0,
            "bridge.max_new_tokens must be positive"
        );
        if self.backend.kind == BackendKind::Remote && self.backend.remote.endpoint.is_empty() {
            bail!("backend.remote.endpoint is required for the remote backend");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
