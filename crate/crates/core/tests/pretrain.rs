use emotok_core::align::{
    pretrain, AlignmentModel, LossKind, ModelConfig, PretrainOptions, PretrainSchedule,
    TextEmbeddingTable, TrainSample,
};
use emotok_core::encoder::{build_joint_graph, EncoderConfig, JointGraph};
use emotok_core::skeldata::{
    default_edges, resample_to_frames, synthesize_dataset, SynthProfile, TARGET_FRAMES,
};
use emotok_core::tokenizer::TokenizerConfig;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_channels: 16,
            layer_count: 2,
            ..EncoderConfig::default()
        },
        tokenizer: TokenizerConfig { token_dim: 32 },
    }
}

fn three_class(joints: usize, name: &str) -> (Vec<TrainSample>, JointGraph, Vec<String>) {
    let labels = ["Joy", "Anger", "Sadness"];
    let profile = SynthProfile::custom(name, joints, &labels, 8, 11);
    let data = synthesize_dataset(&profile).unwrap();
    let graph = build_joint_graph(joints, &default_edges(joints)).unwrap();
    let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let samples = data
        .sequences
        .iter()
        .map(|s| TrainSample {
            sequence: resample_to_frames(s, TARGET_FRAMES).unwrap(),
            graph: 0,
            label: labels.iter().position(|l| *l == s.label).unwrap(),
        })
        .collect();
    (samples, graph, labels)
}

fn options(epochs: usize, loss: LossKind) -> PretrainOptions {
    PretrainOptions {
        schedule: PretrainSchedule {
            epochs,
            warmup_epochs: 2,
            decay_epochs: vec![],
            batch_size: 8,
            ..PretrainSchedule::desk()
        },
        loss,
        temperature: 0.07,
        seed: 5,
        start_epoch: 0,
    }
}

#[test]
fn small_model_separates_three_classes() {
    let (samples, graph, labels) = three_class(12, "small");
    let text = TextEmbeddingTable::synthetic(&labels, 32).unwrap();
    for loss in [LossKind::Se, LossKind::St] {
        let mut model = AlignmentModel::new(&small_config(), labels.clone(), 32, 12, 3).unwrap();
        let hist = pretrain(
            &mut model,
            &samples,
            std::slice::from_ref(&graph),
            &text,
            &options(10, loss),
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(hist.len(), 10);
        assert!(
            hist.last().unwrap().loss < hist[0].loss,
            "{loss:?}: {hist:?}"
        );
        assert!(
            model.accuracy(&samples, std::slice::from_ref(&graph)).unwrap() >= 0.9,
            "{loss:?}"
        );
    }
}

#[test]
fn resumed_run_continues_the_epoch_count() {
    let (samples, graph, labels) = three_class(10, "resume");
    let text = TextEmbeddingTable::synthetic(&labels, 32).unwrap();
    let mut model = AlignmentModel::new(&small_config(), labels, 32, 10, 3).unwrap();
    pretrain(
        &mut model,
        &samples,
        std::slice::from_ref(&graph),
        &text,
        &options(2, LossKind::Se),
        |_, _| Ok(()),
    )
    .unwrap();
    let norms = model.input_norms.clone();
    let resume = PretrainOptions {
        start_epoch: 2,
        ..options(4, LossKind::Se)
    };
    let hist = pretrain(
        &mut model,
        &samples,
        &[graph],
        &text,
        &resume,
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(hist.iter().map(|m| m.epoch).collect::<Vec<_>>(), [2, 3]);
    assert_eq!(model.input_norms, norms);
}
