mod common;

use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;

use countocc_core::pyramid::{
    downsample_mask_with_threshold, occluded_tokens, reassemble, separate_tokens, FeaturePyramid, LevelMask,
};

use common::random_pyramid;

#[test]
fn downsample_quadrant_by_hand() {
    let mut full = Array2::from_elem((4, 4), false);
    for y in 0..2 {
        for x in 2..4 {
            full[[y, x]] = true;
        }
    }
    let cells = downsample_mask_with_threshold(&full, (2, 2), 0.5);
    assert_eq!(cells.iter().filter(|&&m| m).count(), 1);
    assert!(cells[[0, 1]]);
}

#[test]
fn separate_enumerated_two_by_two() {
    let level = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, y, x)| (y * 2 + x) as f64);
    let mask = LevelMask { mask: Array3::from_shape_vec((1, 2, 2), vec![true, false, false, false]).unwrap() };
    let split = separate_tokens(&level, &mask).unwrap();
    assert_eq!(split.visible_tokens[0].column(0).to_vec(), vec![1.0, 2.0, 3.0]);
    assert_eq!(split.occluded_indices[0], vec![0]);

    let r = Array2::from_elem((1, 1), 42.0);
    let out = reassemble(&level, &mask, &[r]).unwrap();
    assert_eq!(out[[0, 0, 0, 0]], 42.0);
    assert_eq!(out.iter().skip(1).cloned().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn hundred_pyramids_round_trip_bit_exactly() {
    for seed in 0..100 {
        let (pyr, masks) = random_pyramid(seed);
        for (level, mask) in pyr.levels.iter().zip(&masks) {
            let back = reassemble(level, mask, &occluded_tokens(level, mask).unwrap()).unwrap();
            assert!(back.iter().zip(level.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "seed {seed}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_is_disjoint_and_exhaustive(seed in any::<u64>()) {
        let (pyr, masks) = random_pyramid(seed);
        for (level, mask) in pyr.levels.iter().zip(&masks) {
            let (batch, _, h, w) = level.dim();
            let split = separate_tokens(level, mask).unwrap();
            for b in 0..batch {
                prop_assert_eq!(split.n_visible(b) + split.n_occluded(b), h * w);
                let mut all: Vec<usize> = split.visible_indices[b].iter().chain(&split.occluded_indices[b]).cloned().collect();
                all.sort();
                prop_assert_eq!(all, (0..h * w).collect::<Vec<_>>());
                for (r, &i) in split.visible_indices[b].iter().enumerate() {
                    for ch in 0..level.dim().1 {
                        prop_assert_eq!(split.visible_tokens[b][[r, ch]], level[[b, ch, i / w, i % w]]);
                    }
                }
            }
        }
    }

    #[test]
    fn visible_positions_survive_arbitrary_reconstructions(seed in any::<u64>(), fill in -1e6f64..1e6) {
        let (pyr, masks) = random_pyramid(seed);
        for (level, mask) in pyr.levels.iter().zip(&masks) {
            let (batch, c, _, w) = level.dim();
            let rec: Vec<Array2<f64>> = (0..batch)
                .map(|b| Array2::from_elem((mask.occluded_indices(b).len(), c), fill))
                .collect();
            let out = reassemble(level, mask, &rec).unwrap();
            for b in 0..batch {
                for i in mask.visible_indices(b) {
                    for ch in 0..c {
                        prop_assert_eq!(out[[b, ch, i / w, i % w]].to_bits(), level[[b, ch, i / w, i % w]].to_bits());
                    }
                }
                for i in mask.occluded_indices(b) {
                    prop_assert_eq!(out[[b, 0, i / w, i % w]], fill);
                }
            }
        }
    }

    #[test]
    fn wrong_token_count_is_rejected(seed in any::<u64>()) {
        let (pyr, masks) = random_pyramid(seed);
        let (batch, c, _, _) = pyr.levels[0].dim();
        let rec: Vec<Array2<f64>> = (0..batch)
            .map(|b| Array2::zeros((masks[0].occluded_indices(b).len() + 1, c)))
            .collect();
        prop_assert!(reassemble(&pyr.levels[0], &masks[0], &rec).is_err());
    }

    #[test]
    fn dump_round_trips_through_f32(seed in any::<u64>()) {
        let (pyr, _) = random_pyramid(seed);
        let mut buf = Vec::new();
        pyr.write_dump(&mut buf).unwrap();
        let back = FeaturePyramid::read_dump(buf.as_slice()).unwrap();
        for (a, b) in pyr.levels.iter().zip(&back.levels) {
            prop_assert_eq!(a.dim(), b.dim());
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| (*x as f32) as f64 == *y));
        }
    }
}
