use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxzsl::crf::InferenceConfig;
use ctxzsl::geometry::GeomEmbedConfig;
use ctxzsl::pipeline::{infer_scenes, synthesize, ContextModel, SynthesisInputs, UnaryModel};
use ctxzsl::relnet::{batch_loss_gradients, LossTerms, RelNetParams};
use ctxzsl::scene::Scene;
use ctxzsl::synthworld::{gen_world, into_scenes, SceneConfig, World, WorldConfig};
use ctxzsl::zsl::{GcnConfig, Method, Setting, Similarity};
use ctxzsl::Exec;

struct Setup {
    world: World,
    train: Vec<Scene>,
    test: Vec<Scene>,
    net: RelNetParams,
    unary: UnaryModel,
}

fn setup() -> Setup {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let scenes = |n, include_unseen, seed| {
        let cfg = SceneConfig { n_scenes: n, min_objects: 3, max_objects: 6, include_unseen, seed };
        into_scenes(world.gen_scenes(&cfg, Exec::Parallel).unwrap())
    };
    let train = scenes(64, false, 1);
    let test = scenes(200, true, 2);
    let net = RelNetParams::init(GeomEmbedConfig::default(), 256, world.graph.n_relations(), None, 3).unwrap();
    let inp = SynthesisInputs {
        labels: &world.labels,
        embeddings: &world.embeddings,
        w_seen: &world.w_seen,
        word_graph: None,
        gcn: GcnConfig::default(),
        similarity: Similarity::Cosine,
        row_normalize: true,
        ridge: 1e-6,
    };
    let w = synthesize(Method::Sync, &inp).unwrap();
    let unary = UnaryModel::for_method(Method::Sync, w, &world.labels, &world.embeddings).unwrap();
    Setup { world, train, test, net, unary }
}

fn bench(c: &mut Criterion) {
    let s = setup();
    let cfg = InferenceConfig { gamma: 0.5, ..InferenceConfig::default() };

    let mut g = c.benchmark_group("infer_scenes");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let ctx = ContextModel { relnet: &s.net, graph: &s.world.graph };
                black_box(
                    infer_scenes(&s.test, &s.world.labels, &s.unary, Some(ctx), &cfg, Setting::Generalized, exec)
                        .unwrap(),
                )
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("batch_loss_gradients");
    g.sample_size(10);
    let batch: Vec<&Scene> = s.train.iter().collect();
    let terms = LossTerms { graph: &s.world.graph, labels: &s.world.labels, gamma: 1.0 };
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| black_box(batch_loss_gradients(&batch, None, &s.net, terms, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
