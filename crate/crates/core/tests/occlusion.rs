mod common;

use ndarray::Array3;
use proptest::prelude::*;

use countocc_core::annotation::{AnnotatedScene, BoxAnnotation};
use countocc_core::occlusion::{
    apply_mask, build_eval_mask, count_occluded_instances, sample_training_mask, EvalOccConfig, OcclusionMask, Rect,
    TrainOccConfig,
};
use countocc_core::raster::Image;
use countocc_core::scene::{generate_scene, scene_rng, SceneConfig};

use common::{ceil_frac, floor_frac, hidden_centers};

fn toy_scene(seed: u64, count_min: usize, count_max: usize) -> AnnotatedScene {
    let cfg = SceneConfig { count_min, count_max, ..SceneConfig::default() };
    generate_scene(&cfg, seed % 1_000_000, &mut scene_rng(seed, 0)).unwrap().scene
}

fn toy_train_cfg() -> TrainOccConfig {
    TrainOccConfig { apply_probability: 1.0, side_min: 8, side_max: 20, ..TrainOccConfig::default() }
}

fn toy_eval_cfg() -> EvalOccConfig {
    EvalOccConfig { side_min: 4, side_max: 24, max_rectangles: 16, ..EvalOccConfig::default() }
}

fn check_mask_structure(m: &OcclusionMask, scene: &AnnotatedScene) {
    let (w, h) = (scene.width, scene.height);
    for y in 0..h {
        for x in 0..w {
            let inside = m.rectangles.iter().any(|r| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h);
            assert_eq!(m.mask[[y, x]], inside, "pixel ({x}, {y})");
        }
    }
    for r in &m.rectangles {
        assert!(r.w >= 1 && r.h >= 1 && r.x + r.w <= w && r.y + r.h <= h, "{r:?} outside {w}x{h}");
    }
    let mut expected: Vec<usize> = (0..scene.boxes.len())
        .filter(|&i| hidden_centers(&scene.boxes[i..=i], &m.rectangles, w, h) == 1)
        .collect();
    expected.sort();
    assert_eq!(m.occluded_instance_ids, expected);
}

#[test]
fn spec_range_examples() {
    // N = 10 hides 2..=5 centers; N = 2 is clamped to 1..=2.
    assert_eq!((ceil_frac(0.15, 10), floor_frac(0.5, 10)), (2, 5));
    for seed in 0..200 {
        let scene = toy_scene(seed, 10, 10);
        let m = sample_training_mask(&scene, &toy_train_cfg(), &mut scene_rng(seed, 1)).unwrap();
        if !m.fallback {
            assert!((2..=5).contains(&m.occluded_instance_ids.len()));
        }
        let small = toy_scene(seed, 2, 2);
        let m = sample_training_mask(&small, &toy_train_cfg(), &mut scene_rng(seed, 1)).unwrap();
        if !m.fallback {
            assert!((1..=2).contains(&m.occluded_instance_ids.len()));
        }
    }
}

#[test]
fn zero_probability_gives_empty_masks() {
    let cfg = TrainOccConfig { apply_probability: 0.0, ..toy_train_cfg() };
    for seed in 0..50 {
        let m = sample_training_mask(&toy_scene(seed, 3, 9), &cfg, &mut scene_rng(seed, 2)).unwrap();
        assert!(m.rectangles.is_empty());
        assert!(m.mask.iter().all(|&v| !v));
    }
}

#[test]
fn empty_scene_is_an_error() {
    let mut scene = toy_scene(1, 3, 3);
    scene.boxes.clear();
    assert!(sample_training_mask(&scene, &toy_train_cfg(), &mut scene_rng(0, 0)).is_err());
    assert!(build_eval_mask(&scene, &toy_eval_cfg(), &mut scene_rng(0, 0)).is_err());
}

#[test]
fn sides_clamp_on_small_images() {
    let mut scene = toy_scene(3, 4, 4);
    scene.width = 16;
    scene.height = 16;
    scene.boxes = (0..4).map(|i| BoxAnnotation::new(i as f64 * 4.0, 2.0, i as f64 * 4.0 + 3.0, 5.0).unwrap()).collect();
    let cfg = TrainOccConfig { side_min: 30, side_max: 40, ..toy_train_cfg() };
    let m = sample_training_mask(&scene, &cfg, &mut scene_rng(0, 0)).unwrap();
    assert!(m.rectangles.iter().all(|r| r.w <= 16 && r.h <= 16));
}

#[test]
fn eval_window_examples() {
    // N = 20 → 5, 6 or 7 hidden; N = 1 → exactly one, flagged.
    let cfg = SceneConfig { width: 96, height: 96, count_min: 20, count_max: 20, min_gap: 0.5, ..SceneConfig::default() };
    let mut hits = 0;
    for seed in 0..100 {
        let scene = generate_scene(&cfg, seed, &mut scene_rng(seed, 0)).unwrap().scene;
        let m = build_eval_mask(&scene, &toy_eval_cfg(), &mut scene_rng(seed, 5)).unwrap();
        let k = hidden_centers(&scene.boxes, &m.rectangles, 96, 96);
        assert!(k <= 7);
        hits += usize::from((5..=7).contains(&k));
        assert_eq!(m.window_infeasible, !(5..=7).contains(&k));
    }
    assert!(hits >= 95, "{hits}/100");

    let one = toy_scene(4, 1, 1);
    let m = build_eval_mask(&one, &toy_eval_cfg(), &mut scene_rng(4, 5)).unwrap();
    assert_eq!(m.occluded_instance_ids, vec![0]);
    assert!(m.window_infeasible);
}

#[test]
fn apply_mask_examples() {
    let ones = Image { pixels: Array3::from_elem((6, 6, 3), 1.0) };
    let empty = OcclusionMask::empty(6, 6);
    assert_eq!(apply_mask(&ones, &empty).unwrap(), ones);
    let full = OcclusionMask::from_rectangles(6, 6, &[Rect { x: 0, y: 0, w: 6, h: 6 }], &[]);
    assert!(apply_mask(&ones, &full).unwrap().pixels.iter().all(|&v| v == 0.0));
    let small = OcclusionMask::from_rectangles(6, 6, &[Rect { x: 2, y: 3, w: 2, h: 2 }], &[]);
    let out = apply_mask(&ones, &small).unwrap();
    assert_eq!(ones.pixels.sum() - out.pixels.sum(), 4.0 * 3.0);
}

#[test]
fn count_examples() {
    let boxes: Vec<BoxAnnotation> =
        (0..10).map(|i| BoxAnnotation::new(i as f64 * 4.0, 0.0, i as f64 * 4.0 + 2.0, 2.0).unwrap()).collect();
    let none = OcclusionMask::empty(8, 40);
    assert_eq!(count_occluded_instances(&none, &boxes[..7]), (7, 0));
    let all = OcclusionMask::from_rectangles(8, 40, &[Rect { x: 0, y: 0, w: 40, h: 8 }], &boxes);
    assert_eq!(count_occluded_instances(&all, &boxes[..7]), (0, 7));
    // Three centers (x = 1, 5, 9) hidden out of ten.
    let three = OcclusionMask::from_rectangles(8, 40, &[Rect { x: 0, y: 0, w: 11, h: 3 }], &boxes);
    assert_eq!(count_occluded_instances(&three, &boxes), (7, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn accepted_training_masks_respect_the_range(seed in any::<u64>(), n in 4usize..=12) {
        let scene = toy_scene(seed, n, n);
        let cfg = toy_train_cfg();
        let m = sample_training_mask(&scene, &cfg, &mut scene_rng(seed, 9)).unwrap();
        check_mask_structure(&m, &scene);
        prop_assert_eq!(m.rectangles.len(), 1);
        let r = m.rectangles[0];
        prop_assert!(r.w >= cfg.side_min && r.w <= cfg.side_max && r.h >= cfg.side_min && r.h <= cfg.side_max);
        if !m.fallback {
            let k = hidden_centers(&scene.boxes, &m.rectangles, scene.width, scene.height);
            prop_assert!(k >= ceil_frac(0.15, n) && k <= floor_frac(0.5, n), "{} hidden of {}", k, n);
        }
    }

    #[test]
    fn eval_masks_are_well_formed(seed in any::<u64>(), n in 1usize..=12) {
        let scene = toy_scene(seed, n, n);
        let cfg = toy_eval_cfg();
        let m = build_eval_mask(&scene, &cfg, &mut scene_rng(seed, 9)).unwrap();
        check_mask_structure(&m, &scene);
        prop_assert!(m.rectangles.len() <= cfg.max_rectangles);
        prop_assert!(m.rectangles.iter().all(|r| r.w <= cfg.side_max && r.h <= cfg.side_max));
    }

    #[test]
    fn masks_are_reproducible(seed in any::<u64>()) {
        let scene = toy_scene(seed, 3, 12);
        let a = sample_training_mask(&scene, &toy_train_cfg(), &mut scene_rng(seed, 3)).unwrap();
        let b = sample_training_mask(&scene, &toy_train_cfg(), &mut scene_rng(seed, 3)).unwrap();
        prop_assert_eq!(a, b);
        let a = build_eval_mask(&scene, &toy_eval_cfg(), &mut scene_rng(seed, 3)).unwrap();
        let b = build_eval_mask(&scene, &toy_eval_cfg(), &mut scene_rng(seed, 3)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_is_idempotent_and_local(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let s = generate_scene(&cfg, seed % 1_000_000, &mut scene_rng(seed, 0)).unwrap();
        let m = build_eval_mask(&s.scene, &toy_eval_cfg(), &mut scene_rng(seed, 4)).unwrap();
        let once = apply_mask(&s.image, &m).unwrap();
        prop_assert_eq!(&apply_mask(&once, &m).unwrap(), &once);
        for ((y, x, c), &v) in once.pixels.indexed_iter() {
            if m.mask[[y, x]] {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert_eq!(v.to_bits(), s.image.pixels[[y, x, c]].to_bits());
            }
        }
        let (vis, occ) = count_occluded_instances(&m, &s.scene.boxes);
        prop_assert_eq!(vis + occ, s.scene.boxes.len());
        prop_assert_eq!(occ, hidden_centers(&s.scene.boxes, &m.rectangles, cfg.width, cfg.height));
    }
}
