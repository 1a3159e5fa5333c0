mod common;

use std::f64::consts::PI;

use common::{bilinear_oracle, brute_force_distance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unept::boundary::bench::{corrupt_rim, run_rim_benchmark, square_scene, RimBenchSettings};
use unept::boundary::{
    bin_to_offset, direction_bins, distance_transform, make_boundary_targets, offset_angle, quantize_angle, refine_labels,
    refine_logits, BoundaryError, LabelMap, DIRECTION_BINS, IGNORE,
};
use unept::numerics::Tensor;

fn map(rows: &[&[u8]]) -> LabelMap {
    let w = rows[0].len();
    LabelMap::new(rows.len(), w, rows.concat()).unwrap()
}

fn one_hot_directions(bins: &[usize], h: usize, w: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[DIRECTION_BINS, h, w], |i| if bins[i % n] == i / n { 1.0 } else { 0.0 })
}

#[test]
fn distance_along_a_row() {
    let dt = distance_transform(&map(&[&[0, 0, 0, 1, 1]]));
    assert_eq!(dt.values, vec![3.0, 2.0, 1.0, 1.0, 2.0]);
    assert!(!dt.single_label);
}

#[test]
fn distance_around_a_single_pixel() {
    let dt = distance_transform(&map(&[&[0, 0, 0], &[0, 1, 0], &[0, 0, 0]]));
    let s = 2f64.sqrt();
    assert_eq!(dt.values, vec![s, 1.0, s, 1.0, 1.0, 1.0, s, 1.0, s]);
}

#[test]
fn single_label_maps_are_infinite() {
    let dt = distance_transform(&LabelMap::filled(4, 5, 3));
    assert!(dt.single_label);
    assert!(dt.values.iter().all(|v| v.is_infinite()));
    let dt = distance_transform(&map(&[&[2, IGNORE, 2]]));
    assert!(dt.single_label);
    assert!(dt.values.iter().all(|v| v.is_infinite()));
}

#[test]
fn ignore_pixels_are_neither_sources_nor_targets() {
    let dt = distance_transform(&map(&[&[0, IGNORE, IGNORE, 1]]));
    assert_eq!(dt.values, vec![3.0, f64::INFINITY, f64::INFINITY, 3.0]);
}

#[test]
fn distance_matches_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let labels: Vec<u8> = (0..h * w).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..3) }).collect();
        let dt = distance_transform(&LabelMap::new(h, w, labels.clone()).unwrap());
        assert_eq!(dt.values, brute_force_distance(&labels, h, w));
    }
}

fn label_map_strategy() -> impl Strategy<Value = LabelMap> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![8 => 0u8..4, 1 => Just(IGNORE)], h * w)
            .prop_map(move |labels| LabelMap::new(h, w, labels).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_transform_is_exact(m in label_map_strategy()) {
        let dt = distance_transform(&m);
        prop_assert_eq!(dt.values, brute_force_distance(m.labels(), m.height(), m.width()));
    }

    #[test]
    fn directions_exist_exactly_on_the_boundary(m in label_map_strategy(), gamma in 0.5f64..4.0) {
        let t = make_boundary_targets(&m, gamma).unwrap();
        let dt = distance_transform(&m);
        for i in 0..m.labels().len() {
            prop_assert_eq!(t.boundary[i], dt.values[i] <= gamma);
            prop_assert_eq!(t.direction[i].is_some(), t.boundary[i]);
            if let Some(b) = t.direction[i] {
                let (dy, dx) = bin_to_offset(b as usize).unwrap();
                prop_assert_eq!(t.offsets[i], (dy as i8, dx as i8));
            } else {
                prop_assert_eq!(t.offsets[i], (0, 0));
            }
        }
    }

    #[test]
    fn refinement_with_zero_probability_is_identity(m in label_map_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (m.height(), m.width());
        let dir = Tensor::from_fn(&[DIRECTION_BINS, h, w], |_| rng.gen_range(-1.0..1.0));
        let prob = Tensor::zeros(&[h, w]);
        prop_assert_eq!(refine_labels(&m, &prob, &dir, 0.5).unwrap(), m);
    }
}

#[test]
fn targets_across_a_vertical_edge() {
    let row: &[u8] = &[0, 0, 0, 0, 1, 1, 1, 1];
    let t = make_boundary_targets(&map(&[row, row, row, row]), 1.0).unwrap();
    for r in 0..4 {
        let dirs: Vec<Option<u8>> = t.direction[r * 8..(r + 1) * 8].to_vec();
        assert_eq!(dirs, vec![None, None, None, Some(4), Some(0), None, None, None]);
    }
    assert_eq!(t.offsets[3], (0, -1));
    assert_eq!(t.offsets[4], (0, 1));
}

#[test]
fn targets_across_a_horizontal_edge() {
    let m = map(&[&[5; 4], &[5; 4], &[2; 4], &[2; 4]]);
    let t = make_boundary_targets(&m, 1.0).unwrap();
    assert!(t.direction[4..8].iter().all(|&d| d == Some(2)));
    assert!(t.direction[8..12].iter().all(|&d| d == Some(6)));
    assert!(t.direction[..4].iter().chain(&t.direction[12..]).all(Option::is_none));
}

#[test]
fn wider_gamma_widens_the_band() {
    let row: &[u8] = &[0, 0, 0, 0, 1, 1, 1, 1];
    let m = map(&[row]);
    let count = |g| make_boundary_targets(&m, g).unwrap().boundary.iter().filter(|&&b| b).count();
    assert_eq!((count(1.0), count(2.0), count(3.0), count(4.0)), (2, 4, 6, 8));
}

#[test]
fn non_positive_gamma_is_rejected() {
    let m = LabelMap::filled(2, 2, 0);
    for g in [0.0, -1.0, f64::NAN] {
        assert!(matches!(make_boundary_targets(&m, g), Err(BoundaryError::InvalidArgument(_))));
    }
}

#[test]
fn angles_quantize_to_the_nearest_sector() {
    assert_eq!(quantize_angle(0.0), 0);
    assert_eq!(quantize_angle(PI / 2.0), 2);
    assert_eq!(quantize_angle(PI), 4);
    assert_eq!(quantize_angle(-PI), 4);
    assert_eq!(quantize_angle(-PI / 2.0), 6);
    assert_eq!(quantize_angle(22.4f64.to_radians()), 0);
    assert_eq!(quantize_angle(22.6f64.to_radians()), 1);
    assert_eq!(quantize_angle(-22.6f64.to_radians()), 7);
    assert_eq!(quantize_angle(2.0 * PI), 0);
}

#[test]
fn bins_round_trip_through_their_offsets() {
    for bin in 0..DIRECTION_BINS {
        let (dy, dx) = bin_to_offset(bin).unwrap();
        assert!(dy.abs() <= 1 && dx.abs() <= 1 && (dy, dx) != (0, 0));
        assert_eq!(quantize_angle(offset_angle(dy as f64, dx as f64)), bin);
    }
    assert_eq!(bin_to_offset(2).unwrap(), (-1, 0));
    assert!(matches!(bin_to_offset(DIRECTION_BINS), Err(BoundaryError::InvalidArgument(_))));
}

#[test]
fn direction_argmax_takes_the_first_maximum() {
    let mut d = Tensor::zeros(&[DIRECTION_BINS, 1, 2]);
    d.data_mut()[3 * 2] = 1.0;
    assert_eq!(direction_bins(&d).unwrap(), vec![3, 0]);
    assert!(direction_bins(&Tensor::zeros(&[4, 1, 2])).is_err());
}

#[test]
fn refinement_moves_labels_along_the_direction() {
    let coarse = map(&[&[0, 0, 1]]);
    let prob = Tensor::new(vec![1, 3], vec![0.0, 0.9, 0.9]).unwrap();
    let dir = one_hot_directions(&[0, 0, 0], 1, 3);
    assert_eq!(refine_labels(&coarse, &prob, &dir, 0.5).unwrap(), map(&[&[0, 1, 1]]));
    let left = one_hot_directions(&[4, 4, 4], 1, 3);
    assert_eq!(refine_labels(&coarse, &prob, &left, 0.5).unwrap(), map(&[&[0, 0, 0]]));
}

#[test]
fn refinement_threshold_is_strict() {
    let coarse = map(&[&[0, 1]]);
    let dir = one_hot_directions(&[0, 0], 1, 2);
    let at = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    assert_eq!(refine_labels(&coarse, &at, &dir, 0.5).unwrap(), coarse);
    let above = Tensor::new(vec![1, 2], vec![0.51, 0.51]).unwrap();
    assert_eq!(refine_labels(&coarse, &above, &dir, 0.5).unwrap(), map(&[&[1, 1]]));
}

#[test]
fn refinement_rejects_bad_arguments() {
    let coarse = LabelMap::filled(2, 2, 0);
    let dir = Tensor::zeros(&[DIRECTION_BINS, 2, 2]);
    let prob = Tensor::zeros(&[2, 2]);
    for t in [0.0, 1.0, f64::NAN] {
        assert!(matches!(refine_labels(&coarse, &prob, &dir, t), Err(BoundaryError::InvalidArgument(_))));
    }
    assert!(matches!(refine_labels(&coarse, &Tensor::zeros(&[2, 3]), &dir, 0.5), Err(BoundaryError::Shape(_))));
    assert!(matches!(refine_labels(&coarse, &prob, &Tensor::zeros(&[DIRECTION_BINS, 3, 2]), 0.5), Err(BoundaryError::Shape(_))));
}

#[test]
fn soft_refinement_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, h, w) = (3, 5, 6);
    let seg = Tensor::from_fn(&[k, h, w], |_| rng.gen_range(-2.0..2.0));
    let prob = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0));
    let dir = Tensor::from_fn(&[DIRECTION_BINS, h, w], |_| rng.gen_range(-1.0..1.0));
    let out = refine_logits(&seg, &prob, &dir).unwrap();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let best = (0..DIRECTION_BINS).max_by(|&a, &b| dir.at(&[a, r, c]).total_cmp(&dir.at(&[b, r, c])).then(b.cmp(&a))).unwrap();
            let (dy, dx) = bin_to_offset(best).unwrap();
            let b = prob.data()[p];
            for ch in 0..k {
                let shifted = bilinear_oracle(|y, x| seg.at(&[ch, y, x]), h, w, (r as i32 + dy) as f64, (c as i32 + dx) as f64);
                let expected = (1.0 - b) * seg.at(&[ch, r, c]) + b * shifted;
                assert!((out.at(&[ch, r, c]) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hard_and_soft_refinement_agree_on_binary_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, h, w) = (4, 6, 7);
    let seg = Tensor::from_fn(&[k, h, w], |_| rng.gen_range(-2.0..2.0));
    let prob = Tensor::from_fn(&[h, w], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let dir = Tensor::from_fn(&[DIRECTION_BINS, h, w], |_| rng.gen_range(-1.0..1.0));
    let argmax = |t: &Tensor| {
        let labels = (0..h * w)
            .map(|p| (0..k).max_by(|&a, &b| t.data()[a * h * w + p].total_cmp(&t.data()[b * h * w + p])).unwrap() as u8)
            .collect();
        LabelMap::new(h, w, labels).unwrap()
    };
    let soft = argmax(&refine_logits(&seg, &prob, &dir).unwrap());
    let hard = refine_labels(&argmax(&seg), &prob, &dir, 0.5).unwrap();
    assert_eq!(soft, hard);
}

#[test]
fn corruption_strips_the_outer_ring() {
    let mut gt = LabelMap::filled(8, 8, 0);
    for r in 2..6 {
        for c in 2..6 {
            gt.set(r, c, 1);
        }
    }
    let corrupted = corrupt_rim(&gt);
    let ones: Vec<(usize, usize)> = (0..64).filter(|&i| corrupted.labels()[i] == 1).map(|i| (i / 8, i % 8)).collect();
    assert_eq!(ones, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
}

#[test]
fn oracle_targets_undo_rim_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let gt = square_scene(&mut rng, 48, 4);
        let t = make_boundary_targets(&gt, 2.0).unwrap();
        let (prob, dir) = t.oracle_inputs();
        assert_eq!(refine_labels(&corrupt_rim(&gt), &prob, &dir, 0.5).unwrap(), gt);
    }
}

#[test]
fn rim_benchmark_gains_in_the_band_without_losses() {
    let report = run_rim_benchmark(&RimBenchSettings::default()).unwrap();
    assert!(report.band_miou_after >= report.band_miou_before + 0.10);
    assert!(report.miou_after >= report.miou_before);
    assert_eq!(report.scenes_worse, 0);
}

#[test]
fn rim_benchmark_rejects_degenerate_settings() {
    for s in [
        RimBenchSettings { size: 16, ..RimBenchSettings::default() },
        RimBenchSettings { classes: 1, ..RimBenchSettings::default() },
        RimBenchSettings { scenes: 0, ..RimBenchSettings::default() },
    ] {
        assert!(run_rim_benchmark(&s).is_err());
    }
}
