mod common;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use countocc_core::losses::{
    attention_similarity_loss, consistency_loss, reconstruction_loss, roi_mask, roi_stats, LossWeights, RoiStats,
};

use common::{cst_term, random_matrix, rec_terms, rows, sim_terms};

fn stats(mean: f64, std: f64) -> RoiStats {
    RoiStats { mean, std, size: 4 }
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn rec_instance(seed: u64) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = vec![random_matrix(&mut rng, 2, 8, 1.0), random_matrix(&mut rng, 1, 8, 1.0)];
    let t = vec![random_matrix(&mut rng, 2, 8, 1.0), random_matrix(&mut rng, 1, 8, 1.0)];
    (s, t)
}

#[test]
fn identical_tokens_cost_only_the_charbonnier_floor() {
    for seed in 0..20 {
        let (s, _) = rec_instance(seed);
        let w = LossWeights { l2: 0.7, cos: 1.3, char: 2.0, eps_char: 1e-3 };
        let r = reconstruction_loss(&s, &s, &w).unwrap();
        assert!((r.total - 2.0 * 1e-3 * 3.0).abs() <= 1e-9);
        assert_eq!(r.l2, 0.0);
        assert!(r.cos.abs() <= 1e-15);
    }
}

#[test]
fn opposite_unit_rows_cost_two_per_position() {
    let t = vec![array![[1.0, 0.0], [0.0, 1.0]], array![[0.6, 0.8]]];
    let s: Vec<_> = t.iter().map(|a| -a).collect();
    let w = LossWeights { l2: 0.0, cos: 1.0, char: 0.0, eps_char: 1e-3 };
    assert!((reconstruction_loss(&s, &t, &w).unwrap().total - 6.0).abs() < 1e-12);
}

#[test]
fn zero_norm_rows_cost_the_cosine_weight_and_empty_levels_cost_nothing() {
    let w = LossWeights { l2: 0.0, cos: 1.5, char: 0.0, eps_char: 1e-3 };
    let r = reconstruction_loss(&[Array2::zeros((1, 3))], &[array![[1.0, 2.0, 3.0]]], &w).unwrap();
    assert_eq!(r.total, 1.5);
    let r = reconstruction_loss(&[Array2::zeros((0, 3))], &[Array2::zeros((0, 3))], &w).unwrap();
    assert_eq!((r.total, r.positions), (0.0, 0));
}

#[test]
fn ablation_presets_match_the_scalar_oracle_term_by_term() {
    for seed in 0..30 {
        let (s, t) = rec_instance(seed);
        let s_rows: Vec<_> = s.iter().map(rows).collect();
        let t_rows: Vec<_> = t.iter().map(rows).collect();
        for name in ["l2", "l2+cos", "l2+cos+charb"] {
            let w = LossWeights::preset(name).unwrap();
            let r = reconstruction_loss(&s, &t, &w).unwrap();
            let (l2, charb, cos) = rec_terms(&s_rows, &t_rows, w.l2, w.cos, w.char, w.eps_char);
            assert!((r.l2 - l2).abs() <= 1e-12, "{name}");
            assert!((r.charb - charb).abs() <= 1e-12, "{name}");
            assert!((r.cos - cos).abs() <= 1e-12, "{name}");
            assert_eq!(r.total, r.l2 + r.charb + r.cos);
        }
    }
    assert_eq!(LossWeights::preset("l2").unwrap().cos, 0.0);
    assert!(LossWeights::preset("charb").is_err());
}

#[test]
fn similarity_examples() {
    let g = array![[0.1, 0.7], [0.3, 0.0]];
    assert!(attention_similarity_loss(&[g.clone()], &[g.clone()], 1.0, 1.0).unwrap().total.abs() < 1e-15);
    let twice = &g * 2.0;
    assert!(attention_similarity_loss(&[g.clone()], &[twice], 0.0, 1.0).unwrap().total.abs() < 1e-15);
    let zero = Array2::zeros((2, 2));
    assert_eq!(attention_similarity_loss(&[g], &[zero], 0.0, 0.8).unwrap().total, 0.8);
}

#[test]
fn roi_examples() {
    let z = Array2::zeros((2, 2));
    assert!(roi_mask(&z, &z, 0.5).unwrap().iter().all(|&m| !m));
    assert!(roi_mask(&z, &z, 0.0).unwrap().iter().all(|&m| m));
    let t = array![[0.1, 0.3], [0.25, 0.2]];
    let s = array![[0.1, 0.3], [0.25, 0.2]];
    assert_eq!(roi_mask(&t, &s, 0.5).unwrap(), array![[false, true], [true, false]]);

    let all = Array2::from_elem((2, 2), true);
    let c = roi_stats(&Array2::from_elem((2, 2), 0.3), &all).unwrap();
    assert!((c.mean - 0.3).abs() < 1e-15 && c.std < 1e-15);
    let two = roi_stats(&array![[0.0, 1.0]], &array![[true, true]]).unwrap();
    assert_eq!((two.mean, two.std), (0.5, 0.5));
    assert!(roi_stats(&array![[0.0, 1.0]], &array![[false, false]]).unwrap().is_empty());
}

#[test]
fn consistency_examples() {
    assert_eq!(consistency_loss(&[stats(0.5, 0.0)], &[stats(0.5, 0.0)], 0.5).unwrap(), 0.0);
    assert_eq!(consistency_loss(&[stats(0.0, 0.0)], &[stats(0.0, 0.0)], 1.0).unwrap(), 1.0);
    // An empty RoI adds nothing but still counts in the batch.
    let empty = RoiStats { mean: 0.0, std: 0.0, size: 0 };
    let l = consistency_loss(&[stats(0.0, 0.0), empty], &[stats(0.0, 0.0), empty], 1.0).unwrap();
    assert_eq!(l, 0.5);
}

#[test]
fn random_stat_batches_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(1..6);
        let tau = rng.gen_range(0.1..1.0);
        let t: Vec<_> = (0..n).map(|_| stats(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5))).collect();
        let s: Vec<_> = (0..n).map(|_| stats(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5))).collect();
        let expected: f64 = t
            .iter()
            .zip(&s)
            .map(|(a, b)| a.std + b.std + (tau / 2.0 - a.mean).max(0.0) + (tau / 2.0 - b.mean).max(0.0))
            .sum::<f64>()
            / n as f64;
        assert!((consistency_loss(&t, &s, tau).unwrap() - expected).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reconstruction_matches_oracle_and_is_bounded_below(seed in any::<u64>()) {
        let (s, t) = rec_instance(seed);
        let w = LossWeights { l2: 0.5, cos: 0.25, char: 1.5, eps_char: 1e-2 };
        let r = reconstruction_loss(&s, &t, &w).unwrap();
        let (l2, charb, cos) = rec_terms(&s.iter().map(rows).collect::<Vec<_>>(), &t.iter().map(rows).collect::<Vec<_>>(), 0.5, 0.25, 1.5, 1e-2);
        prop_assert!((r.total - (l2 + charb + cos)).abs() <= 1e-12);
        prop_assert!(r.l2 >= 0.0 && r.charb >= 0.0 && r.cos >= -1e-15);
        prop_assert!(r.total > 1.5 * 1e-2 * 3.0);
    }

    #[test]
    fn similarity_and_consistency_match_oracles(seed in any::<u64>(), tau in 0.05f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let s = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let r = attention_similarity_loss(&[t.clone()], &[s.clone()], 0.7, 1.3).unwrap();
        let (l2, cos) = sim_terms(&flat(&t), &flat(&s), 0.7, 1.3);
        prop_assert!((r.l2 - l2).abs() <= 1e-12 && (r.cos - cos).abs() <= 1e-12);

        let roi = roi_mask(&t, &s, tau).unwrap();
        let l = consistency_loss(&[roi_stats(&t, &roi).unwrap()], &[roi_stats(&s, &roi).unwrap()], tau).unwrap();
        prop_assert!((l - cst_term(&flat(&t), &flat(&s), tau)).abs() <= 1e-12);
    }

    #[test]
    fn similarity_vanishes_only_for_equal_maps(seed in any::<u64>(), k in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Array2::from_shape_fn((5, 6), |_| rng.gen_range(0.0..1.0));
        let mut s = t.clone();
        prop_assert!(attention_similarity_loss(&[t.clone()], &[s.clone()], 1.0, 1.0).unwrap().total.abs() < 1e-12);
        s[[rng.gen_range(0..5), rng.gen_range(0..6)]] += 0.01;
        prop_assert!(attention_similarity_loss(&[t.clone()], &[s], 1.0, 1.0).unwrap().total > 0.0);
        let scaled = &t * k;
        let a = attention_similarity_loss(&[t.clone()], &[scaled], 0.0, 1.0).unwrap().total;
        prop_assert!(a.abs() < 1e-12);
    }
}
