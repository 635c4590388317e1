use criterion::{criterion_group, criterion_main, Criterion};
use ovseg::pipeline::{build_model, scene_gradients, training_data};
use ovseg::prompts::build_category_prompt;
use ovseg::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_forward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (model, store) = build_model(&cfg).unwrap();
    let (vocab, scenes) = training_data(&cfg).unwrap();
    let prompt = build_category_prompt(&vocab.all_classes()).unwrap();
    let scene = &scenes[0];

    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("predict_panoptic_64x64", |b| {
        b.iter(|| model.predict(&store, black_box(&scene.image), &prompt).unwrap())
    });
    group.bench_function("scene_gradients_64x64", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            scene_gradients(&model, &store, &cfg, &vocab, black_box(scene), &mut rng).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
