use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use countocc_core::config::RunConfig;
use countocc_core::experiment::new_trainer;
use countocc_core::model::ToyModel;
use countocc_core::occlusion::{build_eval_mask, sample_training_mask};
use countocc_core::scene::{generate_dataset, generate_scene, scene_rng};

fn occlusion(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let scene = generate_scene(&cfg.scene(), 0, &mut scene_rng(1, 0)).unwrap().scene;
    let (train, eval) = (cfg.train_occ(), cfg.eval_occ());
    c.bench_function("scene", |b| b.iter(|| generate_scene(&cfg.scene(), 0, &mut scene_rng(1, 0)).unwrap()));
    c.bench_function("training_mask", |b| {
        b.iter(|| sample_training_mask(black_box(&scene), &train, &mut scene_rng(2, 0)).unwrap())
    });
    c.bench_function("eval_mask", |b| b.iter(|| build_eval_mask(black_box(&scene), &eval, &mut scene_rng(3, 0)).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = ToyModel::new(cfg.model(), 1, 2).unwrap();
    let s = generate_scene(&cfg.scene(), 0, &mut scene_rng(1, 0)).unwrap();
    let mask = build_eval_mask(&s.scene, &cfg.eval_occ(), &mut scene_rng(3, 0)).unwrap();
    let tokens = model.backbone_tokens(&s.image).unwrap();
    c.bench_function("backbone", |b| b.iter(|| model.backbone_tokens(black_box(&s.image)).unwrap()));
    c.bench_function("predict_counts", |b| {
        b.iter(|| model.predict_counts(&s.image, s.scene.class_id, &s.scene.exemplars, &mask, false).unwrap())
    });
    c.bench_function("gradcam", |b| b.iter(|| model.gradcam_autodiff(black_box(&tokens), cfg.top_k).unwrap()));
}

fn training(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let scenes = generate_dataset(&cfg.scene(), 64, 5, 0).unwrap();
    let mut trainer = new_trainer(&cfg).unwrap();
    let batch = trainer.sample_batch(&scenes).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for stage in [1u8, 2] {
        group.bench_function(format!("stage{stage}"), |b| b.iter(|| trainer.train_step(&batch, stage).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, occlusion, model, training);
criterion_main!(benches);
