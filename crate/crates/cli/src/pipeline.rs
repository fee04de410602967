//! The experiment stages behind the command-line verbs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use emotok_core::align::{
    load_text_embeddings, pretrain, AlignmentCheckpoint, AlignmentModel, EpochMetrics, LossKind,
    PretrainOptions, TextEmbeddingTable, TrainSample,
};
use emotok_core::bridge::{
    assemble_prompt, description_exchange, finetune, pretrain_base, recognition_exchange,
    AdapterCheckpoint, Backend, BridgeState, FinetuneConfig, GenerateOptions, ProjectionLayer,
    PromptExchange, RemoteBackend, RemoteClient, SkeletonSlots, TinyBackend, TinyDecoder, Vocab,
    RECOGNITION_PROMPT,
};
use emotok_core::encoder::{build_joint_graph, JointGraph};
use emotok_core::evalkit::{
    answer_for, canonical_map, extract_label, score_text, EvalReport, Extracted, GenerationRecord,
    LabelLexicon, OutputFormat, PromptKind,
};
use emotok_core::skeldata::{
    load_dataset, read_sample, resample_to_frames, split_ids, Dataset, SplitSpec, TARGET_FRAMES,
};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, EvalSplit, ExperimentConfig, Strategy, TaskOrder};
use crate::run::{
    params_digest, require_finalized, InputDigest, StageDir, EVAL, FINETUNE, PRETRAIN,
};

pub const PRETRAIN_REPORT: &str = "report.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const BASE_DECODER: &str = "decoder-base.json";
pub const FINAL_ADAPTER: &str = "adapter-final.json";
pub const STAGES_FILE: &str = "stages.json";
pub const EVAL_REPORT: &str = "report.json";
pub const EVAL_SUMMARY: &str = "summary.txt";

/// Progress messages for the console.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn sub_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

pub fn adapter_file(kind: PromptKind) -> String {
    format!("adapter-{}.json", kind_name(kind))
}

fn kind_name(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::Recognition => "recognition",
        PromptKind::Description => "description",
    }
}

pub struct LoadedDataset {
    pub dataset: Dataset,
    pub manifest_path: PathBuf,
    pub graph: JointGraph,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl LoadedDataset {
    pub fn name(&self) -> &str {
        &self.dataset.manifest.name
    }

    pub fn ids(&self, split: EvalSplit) -> &[String] {
        match split {
            EvalSplit::Train => &self.train,
            EvalSplit::Test => &self.test,
        }
    }
}

/// Every configured dataset with its graph and seeded train/test split.
pub struct Corpus {
    pub lexicon: LabelLexicon,
    pub datasets: Vec<LoadedDataset>,
    pub max_joints: usize,
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let lexicon = match &cfg.data.lexicon {
            Some(p) => LabelLexicon::load(p)?,
            None => LabelLexicon::default(),
        };
        let mut datasets = Vec::with_capacity(cfg.data.manifests.len());
        for (i, path) in cfg.data.manifests.iter().enumerate() {
            let dataset = load_dataset(path)?;
            let m = &dataset.manifest;
            ensure!(
                datasets.iter().all(|d: &LoadedDataset| d.name() != m.name),
                "dataset name {:?} appears twice",
                m.name
            );
            let graph = build_joint_graph(m.joint_count, &m.edges_or_default())?;
            let ids: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
            let spec = SplitSpec {
                train_fraction: cfg.data.train_fraction,
                seed: sub_seed(cfg.seed, 100 + i as u64),
            };
            let (train, test) =
                split_ids(&ids, &spec).with_context(|| format!("splitting {}", m.name))?;
            datasets.push(LoadedDataset {
                dataset,
                manifest_path: path.clone(),
                graph,
                train,
                test,
            });
        }
        let max_joints = datasets
            .iter()
            .map(|d| d.dataset.manifest.joint_count)
            .max()
            .unwrap_or(0);
        Ok(Self {
            lexicon,
            datasets,
            max_joints,
        })
    }

    /// Adds manifests, sample files and the lexicon to `digest`.
    pub fn digest(&self, cfg: &ExperimentConfig, digest: &mut InputDigest) -> Result<()> {
        digest.add("config", cfg.to_toml().as_bytes());
        for d in &self.datasets {
            digest.add_file(&format!("manifest:{}", d.name()), &d.manifest_path)?;
            let dir = d.manifest_path.parent().unwrap_or(Path::new("."));
            for s in &d.dataset.manifest.samples {
                digest.add_file(&format!("sample:{}:{}", d.name(), s.id), &dir.join(&s.path))?;
            }
        }
        digest.add("lexicon", self.lexicon.to_toml().as_bytes());
        if let Some(p) = &cfg.pretrain.text_embeddings {
            digest.add_file("text_embeddings", p)?;
        }
        Ok(())
    }

    pub fn canonical(&self, label: &str) -> Result<String> {
        self.lexicon
            .canonical(label)
            .map(str::to_string)
            .ok_or_else(|| anyhow!("label {label:?} is not in the lexicon"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub dataset: String,
    pub train: f64,
    pub test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub checkpoint: String,
    pub datasets: Vec<String>,
    pub labels: Vec<String>,
    pub spatial_len: usize,
    pub final_epoch: Option<EpochMetrics>,
    pub accuracy: Vec<DatasetAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub models: Vec<ModelReport>,
}

pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub report: PretrainReport,
    pub checkpoints: Vec<AlignmentCheckpoint>,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    model: &'a str,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

fn epoch_line_key(line: &str) -> Option<(String, usize)> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    Some((
        v.get("model")?.as_str()?.to_string(),
        v.get("epoch")?.as_u64()? as usize,
    ))
}

struct Group {
    name: String,
    checkpoint: String,
    members: Vec<usize>,
}

fn groups(cfg: &ExperimentConfig, corpus: &Corpus) -> Vec<Group> {
    match cfg.pretrain.strategy {
        Strategy::Joint => vec![Group {
            name: "joint".into(),
            checkpoint: "alignment.json".into(),
            members: (0..corpus.datasets.len()).collect(),
        }],
        Strategy::Separate => corpus
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| Group {
                name: d.name().to_string(),
                checkpoint: format!("alignment-{}.json", d.name()),
                members: vec![i],
            })
            .collect(),
    }
}

fn train_samples(
    corpus: &Corpus,
    members: &[usize],
    labels: &[String],
    split: EvalSplit,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (g, &i) in members.iter().enumerate() {
        let d = &corpus.datasets[i];
        for id in d.ids(split) {
            let seq = d
                .dataset
                .sequence(id)
                .ok_or_else(|| anyhow!("missing sample {id}"))?;
            out.push(TrainSample {
                sequence: resample_to_frames(seq, TARGET_FRAMES)?,
                graph: g,
                label: labels
                    .iter()
                    .position(|l| *l == seq.label)
                    .ok_or_else(|| anyhow!("label {} outside the label space", seq.label))?,
            });
        }
    }
    Ok(out)
}

/// Trains one alignment model per group (one shared model for the joint
/// strategy, one per dataset otherwise). An unfinished stage directory left
/// by the same config resumes from its last completed epoch.
pub fn run_pretrain(cfg: &ExperimentConfig, root: &Path, log: Log) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let mut stage = StageDir::open(root, PRETRAIN, cfg)?;
    let mut digest = InputDigest::default();
    corpus.digest(cfg, &mut digest)?;
    stage.write_inputs_digest(digest)?;

    let progress_path = stage.file(PROGRESS_FILE);
    let mut progress: BTreeMap<String, usize> = if stage.resumed() && progress_path.is_file() {
        serde_json::from_str(&fs::read_to_string(&progress_path)?)?
    } else {
        BTreeMap::new()
    };
    let kept: Vec<String> = stage
        .metric_lines()?
        .into_iter()
        .filter(|l| {
            epoch_line_key(l).is_some_and(|(m, e)| progress.get(&m).is_some_and(|&p| e < p))
        })
        .collect();
    stage.reset_metrics(&kept)?;
    stage.phase("setup");

    let epochs = cfg.pretrain.schedule.epochs;
    let mut models = Vec::new();
    let mut checkpoints = Vec::new();
    for group in groups(cfg, &corpus) {
        let mut labels: Vec<String> = Vec::new();
        for &i in &group.members {
            for l in &corpus.datasets[i].dataset.manifest.labels {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        let text = match &cfg.pretrain.text_embeddings {
            Some(p) => load_text_embeddings(p, &labels)?,
            None => TextEmbeddingTable::synthetic(
                &labels,
                cfg.pretrain
                    .text_dim
                    .unwrap_or(cfg.model.tokenizer.token_dim),
            )?,
        };
        let members: Vec<&LoadedDataset> =
            group.members.iter().map(|&i| &corpus.datasets[i]).collect();
        let max_joints = members
            .iter()
            .map(|d| d.dataset.manifest.joint_count)
            .max()
            .unwrap_or(0);
        let graphs: Vec<JointGraph> = members.iter().map(|d| d.graph.clone()).collect();
        let specs: Vec<_> = members
            .iter()
            .map(|d| (d.name().to_string(), d.graph.spec()))
            .collect();
        let samples = train_samples(&corpus, &group.members, &labels, EvalSplit::Train)?;
        let ck_path = stage.file(&group.checkpoint);
        let done = progress.get(&group.name).copied().unwrap_or(0).min(epochs);
        let mut model = if done > 0 {
            AlignmentCheckpoint::load(&ck_path)?.model
        } else {
            AlignmentModel::new(&cfg.model, labels.clone(), text.dim(), max_joints, cfg.seed)?
        };
        if done > 0 {
            log(&format!("{}: resuming after epoch {done}", group.name));
        }
        if done < epochs || !ck_path.is_file() {
            let options = PretrainOptions {
                schedule: cfg.pretrain.schedule.clone(),
                loss: cfg.pretrain.loss,
                temperature: cfg.pretrain.temperature,
                seed: sub_seed(cfg.seed, 1),
                start_epoch: done,
            };
            let name = group.name.clone();
            let mut on_epoch = |m: &EpochMetrics, model: &AlignmentModel| -> Result<()> {
                AlignmentCheckpoint::new(model.clone(), specs.clone()).save(&ck_path)?;
                progress.insert(name.clone(), m.epoch + 1);
                fs::write(&progress_path, serde_json::to_string(&progress)?)?;
                stage.append_metric(&EpochLine {
                    model: &name,
                    metrics: m,
                })?;
                log(&format!(
                    "{name}: epoch {:>3}  loss {:.4}  ce {:.4}  con {:.4}  acc {:.3}",
                    m.epoch, m.loss, m.cross_entropy, m.contrastive, m.accuracy
                ));
                Ok(())
            };
            pretrain(
                &mut model,
                &samples,
                &graphs,
                &text,
                &options,
                |m, model| {
                    on_epoch(m, model).map_err(|e| std::io::Error::other(e.to_string()).into())
                },
            )
            .with_context(|| format!("pretraining model {}", group.name))?;
        }
        let mut accuracy = Vec::new();
        for (g, d) in members.iter().enumerate() {
            let one = |split| -> Result<Option<f64>> {
                let s = train_samples(&corpus, &[group.members[g]], &labels, split)?;
                if s.is_empty() {
                    return Ok(None);
                }
                let single = [d.graph.clone()];
                let s: Vec<TrainSample> = s
                    .into_iter()
                    .map(|x| TrainSample { graph: 0, ..x })
                    .collect();
                Ok(Some(model.accuracy(&s, &single)?))
            };
            accuracy.push(DatasetAccuracy {
                dataset: d.name().to_string(),
                train: one(EvalSplit::Train)?.unwrap_or(0.0),
                test: one(EvalSplit::Test)?,
            });
        }
        let final_epoch = stage
            .metric_lines()?
            .iter().rfind(|l| epoch_line_key(l).is_some_and(|(m, _)| m == group.name))
            .map(|l| serde_json::from_str::<EpochMetrics>(l))
            .transpose()?;
        models.push(ModelReport {
            name: group.name.clone(),
            checkpoint: group.checkpoint.clone(),
            datasets: members.iter().map(|d| d.name().to_string()).collect(),
            labels,
            spatial_len: model.spatial_len,
            final_epoch,
            accuracy,
        });
        checkpoints.push(AlignmentCheckpoint::new(model, specs));
    }
    let report = PretrainReport {
        strategy: cfg.pretrain.strategy,
        loss: cfg.pretrain.loss,
        models,
    };
    stage.write_json(PRETRAIN_REPORT, &report)?;
    stage.phase("train");
    let dir = stage.finalize()?;
    Ok(PretrainOutcome {
        dir,
        report,
        checkpoints,
    })
}

/// The pretrained alignment models of a run.
pub struct AlignmentSet {
    pub checkpoints: Vec<AlignmentCheckpoint>,
}

impl AlignmentSet {
    pub fn load(root: &Path) -> Result<Self> {
        let dir = require_finalized(root, PRETRAIN, "run `emotok pretrain` first")?;
        let report: PretrainReport =
            serde_json::from_str(&fs::read_to_string(dir.join(PRETRAIN_REPORT))?)?;
        let checkpoints = report
            .models
            .iter()
            .map(|m| AlignmentCheckpoint::load(&dir.join(&m.checkpoint)))
            .collect::<emotok_core::Result<_>>()?;
        Ok(Self { checkpoints })
    }

    pub fn for_dataset(&self, name: &str) -> Result<(&AlignmentModel, JointGraph)> {
        let ck = self
            .checkpoints
            .iter()
            .find(|c| c.graphs.iter().any(|(n, _)| n == name))
            .ok_or_else(|| anyhow!("no pretrained model covers dataset {name:?}"))?;
        Ok((&ck.model, ck.graph_for(name)?))
    }
}

/// One sample turned into decoder slots.
#[derive(Clone, Debug)]
pub struct Example {
    pub dataset: String,
    pub sample_id: String,
    pub label: String,
    pub canonical: String,
    pub description: Option<String>,
    pub slots: SkeletonSlots,
}

pub fn examples(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    align: &AlignmentSet,
    split: EvalSplit,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in &corpus.datasets {
        let (model, graph) = align.for_dataset(d.name())?;
        for id in d.ids(split) {
            let seq = d
                .dataset
                .sequence(id)
                .ok_or_else(|| anyhow!("missing sample {id}"))?;
            let bundle = model.tokens(&resample_to_frames(seq, TARGET_FRAMES)?, &graph)?;
            out.push(Example {
                dataset: d.name().to_string(),
                sample_id: id.clone(),
                label: seq.label.clone(),
                canonical: corpus.canonical(&seq.label)?,
                description: d.dataset.description(id).map(str::to_string),
                slots: SkeletonSlots::from_bundle(
                    &bundle,
                    cfg.bridge.granularity,
                    corpus.max_joints,
                )?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub task: PromptKind,
    pub exchanges: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: String,
    /// Recognition accuracy on the evaluation split once this stage is done.
    pub recognition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenDigests {
    pub decoder_before: String,
    pub decoder_after: String,
    pub encoder_before: Vec<String>,
    pub encoder_after: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagesReport {
    pub order: TaskOrder,
    pub stages: Vec<StageRecord>,
    /// Set when recognition was trained before description, the order that
    /// exposes forgetting of the recognition task.
    pub forgetting_check: bool,
    /// Recognition accuracy right after its own stage minus the final one.
    pub recognition_drop: Option<f64>,
    pub frozen: FrozenDigests,
}

pub struct FinetuneOutcome {
    pub dir: PathBuf,
    pub decoder: TinyDecoder,
    pub state: BridgeState,
    pub alignment: AlignmentSet,
    pub report: StagesReport,
}

/// Plain documents for the base language model and every text the vocabulary must cover.
fn base_texts(lex: &LabelLexicon, train: &[Example]) -> Result<(Vec<String>, Vec<String>)> {
    let mut corpus = Vec::new();
    for label in lex.labels() {
        for format in [OutputFormat::A, OutputFormat::B, OutputFormat::C] {
            corpus.push(answer_for(format, label, lex)?);
        }
    }
    corpus.extend(train.iter().filter_map(|e| e.description.clone()));
    let mut vocab_texts = corpus.clone();
    vocab_texts.push(RECOGNITION_PROMPT.to_string());
    for label in lex.labels() {
        vocab_texts.push(assemble_prompt(
            PromptKind::Description,
            Some(&label.to_lowercase()),
            lex,
        )?);
    }
    Ok((corpus, vocab_texts))
}

fn exchanges_for(
    cfg: &ExperimentConfig,
    lex: &LabelLexicon,
    kind: PromptKind,
    train: &[Example],
) -> Result<Vec<PromptExchange>> {
    let mut out = Vec::new();
    for e in train {
        let ex = match kind {
            PromptKind::Recognition => recognition_exchange(
                &e.sample_id,
                &e.canonical,
                e.slots.clone(),
                cfg.bridge.format,
                lex,
            )?,
            PromptKind::Description => match &e.description {
                Some(d) => {
                    description_exchange(&e.sample_id, &e.canonical, d, e.slots.clone(), lex)?
                }
                None => continue,
            },
        };
        out.push(ex);
        if cfg.bridge.max_exchanges.is_some_and(|m| out.len() >= m) {
            break;
        }
    }
    ensure!(
        !out.is_empty(),
        "no training exchanges for the {} task",
        kind_name(kind)
    );
    Ok(out)
}

fn generate_options(cfg: &ExperimentConfig) -> GenerateOptions {
    GenerateOptions {
        policy: cfg.bridge.policy,
        ..GenerateOptions::greedy(cfg.bridge.max_new_tokens)
    }
}

/// Share of `examples` whose recognition answer names the right label.
pub fn recognition_accuracy(
    cfg: &ExperimentConfig,
    lex: &LabelLexicon,
    decoder: &TinyDecoder,
    state: &BridgeState,
    examples: &[Example],
) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let options = generate_options(cfg);
    let mut hits = 0;
    for e in examples {
        let text = state.generate(decoder, RECOGNITION_PROMPT, &e.slots, &options)?;
        if extract_label(&text, lex).label() == Some(e.canonical.as_str()) {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / examples.len() as f64))
}

fn encoder_digests(align: &AlignmentSet) -> Vec<String> {
    align
        .checkpoints
        .iter()
        .map(|c| params_digest(&c.model.encoder.params))
        .collect()
}

#[derive(Serialize)]
struct StepLine<'a> {
    phase: &'a str,
    step: usize,
    learning_rate: f64,
    loss: f64,
}

/// Trains the base decoder, then the adapter and projection task by task in
/// the configured order. The decoder weights and every pretrained model stay
/// untouched; the report carries digests proving it.
pub fn run_finetune(cfg: &ExperimentConfig, root: &Path, log: Log) -> Result<FinetuneOutcome> {
    if cfg.backend.kind == BackendKind::Remote {
        return Err(emotok_core::Error::Precondition(
            "the remote backend is inference-only; fine-tuning requires the tiny decoder (--backend tiny)".into(),
        )
        .into());
    }
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let alignment = AlignmentSet::load(root)?;
    let mut stage = StageDir::open(root, FINETUNE, cfg)?;
    let mut digest = InputDigest::default();
    corpus.digest(cfg, &mut digest)?;
    for ck in &alignment.checkpoints {
        digest.add(
            "alignment",
            params_digest(&ck.model.all_params()).as_bytes(),
        );
    }
    stage.write_inputs_digest(digest)?;
    stage.reset_metrics(&[])?;
    let encoder_before = encoder_digests(&alignment);

    let lex = &corpus.lexicon;
    let train = examples(cfg, &corpus, &alignment, EvalSplit::Train)?;
    let held = examples(cfg, &corpus, &alignment, cfg.eval.split)?;
    ensure!(!train.is_empty(), "training split is empty");
    stage.phase("tokens");

    let (docs, vocab_texts) = base_texts(lex, &train)?;
    let vocab = Vocab::build(&vocab_texts);
    let slot_capacity = train[0].slots.len();
    let mut decoder = TinyDecoder::new(
        cfg.bridge.decoder,
        vocab,
        slot_capacity,
        sub_seed(cfg.seed, 2),
    )?;
    let base_cfg = emotok_core::bridge::BaseLmConfig {
        seed: sub_seed(cfg.seed, 3).wrapping_add(cfg.bridge.base.seed),
        ..cfg.bridge.base
    };
    let mut step_err = None;
    pretrain_base(&mut decoder, &docs, &base_cfg, |m| {
        if step_err.is_none() {
            step_err = stage
                .append_metric(&StepLine {
                    phase: "base",
                    step: m.step,
                    learning_rate: m.learning_rate,
                    loss: m.loss,
                })
                .err();
        }
        if m.step % 50 == 0 {
            log(&format!("base lm: step {:>5}  loss {:.4}", m.step, m.loss));
        }
    })?;
    if let Some(e) = step_err.take() {
        return Err(e);
    }
    decoder.save(&stage.file(BASE_DECODER))?;
    let decoder_before = params_digest(&decoder.params);
    stage.phase("base");

    let projection = ProjectionLayer::new(
        cfg.bridge.granularity,
        train[0].slots.width(),
        cfg.bridge.decoder.d_model,
        sub_seed(cfg.seed, 4),
    )?;
    let mut state = BridgeState::new(&decoder, cfg.bridge.lora, projection, sub_seed(cfg.seed, 5))?;
    let order = cfg.bridge.order.arrange(&cfg.bridge.tasks);
    let mut records = Vec::new();
    for (k, &kind) in order.iter().enumerate() {
        let exchanges = exchanges_for(cfg, lex, kind, &train)?;
        let base = match kind {
            PromptKind::Recognition => cfg.bridge.recognition,
            PromptKind::Description => cfg.bridge.description,
        };
        let fc = FinetuneConfig {
            seed: sub_seed(cfg.seed, 10 + k as u64).wrapping_add(base.seed),
            ..base
        };
        let phase = kind_name(kind);
        log(&format!(
            "{phase}: {} exchanges, {} steps",
            exchanges.len(),
            fc.steps
        ));
        let history = finetune(&decoder, &mut state, &exchanges, &fc, |m| {
            if step_err.is_none() {
                step_err = stage
                    .append_metric(&StepLine {
                        phase,
                        step: m.step,
                        learning_rate: m.learning_rate,
                        loss: m.loss,
                    })
                    .err();
            }
            if m.step % 50 == 0 {
                log(&format!("{phase}: step {:>5}  loss {:.4}", m.step, m.loss));
            }
        })
        .with_context(|| format!("fine-tuning the {phase} stage"))?;
        if let Some(e) = step_err.take() {
            return Err(e);
        }
        let checkpoint = adapter_file(kind);
        AdapterCheckpoint::new(phase, &state).save(&stage.file(&checkpoint))?;
        let acc = recognition_accuracy(cfg, lex, &decoder, &state, &held)?;
        if let Some(a) = acc {
            log(&format!("{phase}: recognition accuracy after stage {a:.4}"));
        }
        records.push(StageRecord {
            task: kind,
            exchanges: exchanges.len(),
            steps: fc.steps,
            final_loss: history.last().map(|m| m.loss),
            checkpoint,
            recognition_accuracy: acc,
        });
        stage.phase(phase);
    }
    AdapterCheckpoint::new("final", &state).save(&stage.file(FINAL_ADAPTER))?;

    let rec_pos = order.iter().position(|&k| k == PromptKind::Recognition);
    let recognition_drop = match (rec_pos, records.last()) {
        (Some(p), Some(last)) if p + 1 < records.len() => records[p]
            .recognition_accuracy
            .zip(last.recognition_accuracy)
            .map(|(a, b)| a - b),
        _ => None,
    };
    let report = StagesReport {
        order: cfg.bridge.order,
        forgetting_check: order == [PromptKind::Recognition, PromptKind::Description],
        stages: records,
        recognition_drop,
        frozen: FrozenDigests {
            decoder_before,
            decoder_after: params_digest(&decoder.params),
            encoder_before,
            encoder_after: encoder_digests(&alignment),
        },
    };
    ensure!(
        report.frozen.decoder_before == report.frozen.decoder_after
            && report.frozen.encoder_before == report.frozen.encoder_after,
        "frozen weights changed during fine-tuning"
    );
    stage.write_json(STAGES_FILE, &report)?;
    let dir = stage.finalize()?;
    Ok(FinetuneOutcome {
        dir,
        decoder,
        state,
        alignment,
        report,
    })
}

/// The decoder a run generates with.
pub fn load_backend(cfg: &ExperimentConfig, root: &Path) -> Result<Backend> {
    match cfg.backend.kind {
        BackendKind::Tiny => {
            let dir = require_finalized(root, FINETUNE, "run `emotok finetune` first")?;
            let decoder = TinyDecoder::load(&dir.join(BASE_DECODER))?;
            let state = AdapterCheckpoint::load(&dir.join(FINAL_ADAPTER))?.into_state()?;
            Ok(Backend::Tiny(Box::new(TinyBackend { decoder, state })))
        }
        BackendKind::Remote => {
            let finetune = root.join(FINETUNE);
            let projection = if crate::run::is_finalized(&finetune) {
                Some(AdapterCheckpoint::load(&finetune.join(FINAL_ADAPTER))?.projection)
            } else {
                None
            };
            Ok(Backend::Remote(RemoteBackend {
                client: RemoteClient::new(cfg.backend.remote.clone())?,
                projection,
            }))
        }
    }
}

fn is_transport(e: &emotok_core::Error) -> bool {
    use emotok_core::Error as E;
    matches!(
        e,
        E::Timeout { .. } | E::Transport { .. } | E::Status { .. } | E::Schema(_)
    )
}

/// Generates for `prompt`, turning transport failures into a per-record failure.
fn generate_record(
    backend: &Backend,
    prompt: &str,
    slots: &SkeletonSlots,
    options: &GenerateOptions,
) -> Result<(String, Option<String>)> {
    match backend.decoder().generate(prompt, slots, options) {
        Ok(t) => Ok((t, None)),
        Err(e) if is_transport(&e) => Ok((String::new(), Some(e.to_string()))),
        Err(e) => Err(e.into()),
    }
}

fn empty_split(cfg: &ExperimentConfig) -> anyhow::Error {
    let name = match cfg.eval.split {
        EvalSplit::Train => "train",
        EvalSplit::Test => "test",
    };
    emotok_core::Error::Parameter(format!("the {name} split has no samples to evaluate")).into()
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    lex: &LabelLexicon,
    backend: &Backend,
    examples: &[Example],
    log: Log,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(empty_split(cfg));
    }
    let options = generate_options(cfg);
    let mut records = Vec::new();
    for (n, e) in examples.iter().enumerate() {
        if cfg.eval.tasks.contains(&PromptKind::Recognition) {
            let (generated, failure) =
                generate_record(backend, RECOGNITION_PROMPT, &e.slots, &options)?;
            records.push(GenerationRecord {
                sample_id: e.sample_id.clone(),
                kind: PromptKind::Recognition,
                prompt: RECOGNITION_PROMPT.to_string(),
                extracted: extract_label(&generated, lex),
                generated,
                reference_label: e.canonical.clone(),
                expected_completion: Some(answer_for(cfg.bridge.format, &e.canonical, lex)?),
                reference_description: None,
                scores: None,
                failure,
            });
        }
        if let (true, Some(reference)) = (
            cfg.eval.tasks.contains(&PromptKind::Description),
            &e.description,
        ) {
            let prompt = assemble_prompt(
                PromptKind::Description,
                Some(&e.canonical.to_lowercase()),
                lex,
            )?;
            let (generated, failure) = generate_record(backend, &prompt, &e.slots, &options)?;
            let scores = if failure.is_none() {
                Some(score_text(&generated, reference, lex)?)
            } else {
                None
            };
            records.push(GenerationRecord {
                sample_id: e.sample_id.clone(),
                kind: PromptKind::Description,
                prompt,
                extracted: extract_label(&generated, lex),
                generated,
                reference_label: e.canonical.clone(),
                expected_completion: None,
                reference_description: Some(reference.clone()),
                scores,
                failure,
            });
        }
        if (n + 1) % 25 == 0 {
            log(&format!("eval: {}/{} samples", n + 1, examples.len()));
        }
    }
    Ok(EvalReport::new(records)?)
}

pub struct EvalOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Generates on the configured split, scores every record and writes the report.
pub fn run_eval(cfg: &ExperimentConfig, root: &Path, log: Log) -> Result<EvalOutcome> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let alignment = AlignmentSet::load(root)?;
    let backend = load_backend(cfg, root)?;
    let held = examples(cfg, &corpus, &alignment, cfg.eval.split)?;
    if held.is_empty() {
        return Err(empty_split(cfg));
    }
    let mut stage = StageDir::open(root, EVAL, cfg)?;
    let mut digest = InputDigest::default();
    corpus.digest(cfg, &mut digest)?;
    if cfg.backend.kind == BackendKind::Tiny {
        let dir = root.join(FINETUNE);
        digest.add_file("decoder", &dir.join(BASE_DECODER))?;
        digest.add_file("adapter", &dir.join(FINAL_ADAPTER))?;
    }
    stage.write_inputs_digest(digest)?;
    stage.phase("setup");
    let report = evaluate(cfg, &corpus.lexicon, &backend, &held, log)?;
    stage.write_text(EVAL_REPORT, &(report.to_json() + "\n"))?;
    stage.write_text(EVAL_SUMMARY, &(report.summary_lines().join("\n") + "\n"))?;
    stage.phase("generate");
    let dir = stage.finalize()?;
    Ok(EvalOutcome { dir, report })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Described {
    pub dataset: String,
    /// Recognised label in the dataset's own vocabulary, or `Error`.
    pub label: String,
    pub recognition_text: String,
    pub description: Option<String>,
}

/// Recognises and describes one sample file.
pub fn run_describe(
    cfg: &ExperimentConfig,
    root: &Path,
    sample: &Path,
    dataset: Option<&str>,
) -> Result<Described> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let mut seq = read_sample(sample, "", None)?;
    let d = match dataset {
        Some(name) => corpus
            .datasets
            .iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| anyhow!("no configured dataset is named {name:?}"))?,
        None => {
            let fits: Vec<&LoadedDataset> = corpus
                .datasets
                .iter()
                .filter(|d| d.dataset.manifest.joint_count == seq.joint_count())
                .collect();
            match fits.as_slice() {
                [one] => *one,
                [] => bail!("no configured dataset has {} joints", seq.joint_count()),
                _ => bail!(
                    "several datasets have {} joints; pass --dataset",
                    seq.joint_count()
                ),
            }
        }
    };
    ensure!(
        d.dataset.manifest.joint_count == seq.joint_count(),
        "sample has {} joints but {} uses {}",
        seq.joint_count(),
        d.name(),
        d.dataset.manifest.joint_count
    );
    seq.dataset_id = d.name().to_string();
    let alignment = AlignmentSet::load(root)?;
    let (model, graph) = alignment.for_dataset(d.name())?;
    let bundle = model.tokens(&resample_to_frames(&seq, TARGET_FRAMES)?, &graph)?;
    let slots = SkeletonSlots::from_bundle(&bundle, cfg.bridge.granularity, corpus.max_joints)?;
    let backend = load_backend(cfg, root)?;
    let options = generate_options(cfg);
    let lex = &corpus.lexicon;
    let recognition_text = backend
        .decoder()
        .generate(RECOGNITION_PROMPT, &slots, &options)?;
    let (label, description) = match extract_label(&recognition_text, lex) {
        Extracted::Label(canonical) => {
            let labels = canonical_map(&d.dataset.manifest.labels, lex).unwrap_or_default();
            let own = labels
                .iter()
                .find(|(_, c)| **c == canonical)
                .map(|(l, _)| l.clone())
                .unwrap_or_else(|| canonical.clone());
            let prompt = assemble_prompt(
                PromptKind::Description,
                Some(&canonical.to_lowercase()),
                lex,
            )?;
            (
                own,
                Some(backend.decoder().generate(&prompt, &slots, &options)?),
            )
        }
        Extracted::Error => ("Error".to_string(), None),
    };
    Ok(Described {
        dataset: d.name().to_string(),
        label,
        recognition_text,
        description,
    })
}
