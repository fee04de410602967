use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use emotok_core::align::{similarity_distributions, AlignmentModel, ModelConfig};
use emotok_core::bridge::{
    GenerateOptions, Granularity, ProjectionLayer, SkeletonSlots, TinyDecoder, TinyDecoderConfig,
    Vocab, RECOGNITION_PROMPT,
};
use emotok_core::encoder::build_joint_graph;
use emotok_core::evalkit::{bleu, meteor_simplified, rouge, LabelLexicon};
use emotok_core::numerics::Tensor;
use emotok_core::skeldata::{
    default_edges, resample_to_frames, synthesize_dataset, SynthProfile, TARGET_FRAMES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256, 768] {
        let a = Tensor::uniform(&[n, n], 1.0, &mut rng);
        let b = Tensor::uniform(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zs = Tensor::uniform(&[64, 768], 1.0, &mut rng);
    let zt = Tensor::uniform(&[64, 768], 1.0, &mut rng);
    c.bench_function("similarity_distributions 64x768", |b| {
        b.iter(|| similarity_distributions(black_box(&zs), &zt, 0.07).unwrap())
    });
}

fn encoder_tokens(c: &mut Criterion) {
    let data = synthesize_dataset(&SynthProfile::named("kdae-like", 1, 2).unwrap()).unwrap();
    let seq = resample_to_frames(&data.sequences[0], TARGET_FRAMES).unwrap();
    let j = seq.joint_count();
    let graph = build_joint_graph(j, &default_edges(j)).unwrap();
    let names: Vec<String> = data.manifest.labels.clone();
    let model = AlignmentModel::new(&ModelConfig::default(), names, 768, j, 3).unwrap();
    c.bench_function("skeleton tokens (default model, 64 frames)", |b| {
        b.iter(|| model.tokens(black_box(&seq), &graph).unwrap())
    });
}

fn decoder_generation(c: &mut Criterion) {
    let texts = [
        "this is a sad person.",
        "this is a happy person.",
        "the person walks slowly.",
        RECOGNITION_PROMPT,
    ];
    let cfg = TinyDecoderConfig {
        d_model: 128,
        ..TinyDecoderConfig::default()
    };
    let decoder = TinyDecoder::new(cfg, Vocab::build(&texts), 1, 4).unwrap();
    let projection = ProjectionLayer::new(Granularity::Semantic, 32, 128, 5).unwrap();
    let slots = SkeletonSlots {
        granularity: Granularity::Semantic,
        values: Tensor::matrix(1, 32, vec![0.1; 32]).unwrap(),
        valid: vec![true],
        spatial_slots: 0,
    };
    let opts = GenerateOptions::greedy(24);
    c.bench_function("tiny decoder greedy 24 tokens", |b| {
        b.iter(|| {
            decoder
                .generate(
                    None,
                    Some(&projection),
                    RECOGNITION_PROMPT,
                    Some(&slots),
                    &opts,
                )
                .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let lex = LabelLexicon::default();
    let hyp =
        "the person walks slowly with the head lowered and the arms hanging loosely at the sides";
    let reference =
        "the head is lowered and the person moves slowly while the arms hang at the sides";
    c.bench_function("rouge", |b| {
        b.iter(|| rouge(black_box(hyp), reference).unwrap())
    });
    c.bench_function("bleu-4", |b| b.iter(|| bleu(black_box(hyp), reference, 4)));
    c.bench_function("meteor", |b| {
        b.iter(|| meteor_simplified(black_box(hyp), reference, &lex))
    });
}

criterion_group!(
    benches,
    gemm,
    similarity,
    encoder_tokens,
    decoder_generation,
    metrics
);
criterion_main!(benches);
