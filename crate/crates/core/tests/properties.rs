use std::collections::HashSet;

use proptest::prelude::*;
use statrs::statistics::{Data, Median};
use testvol::cohort::{make_splits, ChannelStack, SplitSizes};
use testvol::inference::{to_mask, Decision, PredictionVolume};
use testvol::metrics::{agreement_from_scores, dice, volume_ml, DiceResult};
use testvol::nifti::{SegmentationMask, VolumeGeometry, VoxelVolume};
use testvol::popstats::{histogram, summarize, SummaryOptions};
use testvol::preprocess::{normalize, NormalizationSpec};

fn geom(dims: [usize; 3]) -> VolumeGeometry {
    VolumeGeometry::new(dims, [1.5, 2.0, 3.0]).unwrap()
}

fn mask_pair() -> impl Strategy<Value = (SegmentationMask, SegmentationMask)> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(x, y, z)| {
        let n = x * y * z;
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(a, b)| {
                let g = geom([x, y, z]);
                (
                    SegmentationMask::new(g.clone(), a).unwrap(),
                    SegmentationMask::new(g, b).unwrap(),
                )
            })
    })
}

fn foreground_set(m: &SegmentationMask) -> HashSet<[usize; 3]> {
    m.foreground().collect()
}

proptest! {
    #[test]
    fn dice_matches_set_oracle((a, b) in mask_pair()) {
        let (sa, sb) = (foreground_set(&a), foreground_set(&b));
        match dice(&a, &b) {
            Ok(d) => {
                let inter = sa.intersection(&sb).count();
                let expected = 2.0 * inter as f64 / (sa.len() + sb.len()) as f64;
                prop_assert_eq!(d.value, expected);
                prop_assert!((0.0..=1.0).contains(&d.value));
                prop_assert_eq!(d.value, dice(&b, &a).unwrap().value);
            }
            Err(_) => prop_assert!(sa.is_empty() && sb.is_empty()),
        }
    }

    #[test]
    fn volume_is_additive_over_disjoint_parts((a, b) in mask_pair()) {
        let g = a.geometry().clone();
        let only_a = SegmentationMask::from_fn(g.clone(), |x, y, z| a.get(x, y, z) && !b.get(x, y, z));
        let union = SegmentationMask::from_fn(g, |x, y, z| a.get(x, y, z) || b.get(x, y, z));
        let (va, vb, vu) = (volume_ml(&only_a), volume_ml(&b), volume_ml(&union));
        prop_assert_eq!(va.voxel_count + vb.voxel_count, vu.voxel_count);
        prop_assert!((va.volume_ml + vb.volume_ml - vu.volume_ml).abs() <= 1e-12 * vu.volume_ml.max(1.0));
    }

    #[test]
    fn normalization_preserves_order(values in prop::collection::vec(-1000i32..1000, 24)) {
        let g = geom([4, 3, 2]);
        let vol = VoxelVolume::new(g.clone(), values.iter().map(|&v| v as f32).collect()).unwrap();
        let stack = ChannelStack::new("s", [vol.clone(), vol.clone(), vol]).unwrap();
        let out = normalize(&stack, &NormalizationSpec::default()).unwrap();
        for ch in out.channels() {
            let d = ch.data();
            for i in 0..d.len() {
                for j in 0..d.len() {
                    if values[i] < values[j] {
                        prop_assert!(d[i] < d[j]);
                    } else if values[i] == values[j] {
                        prop_assert_eq!(d[i], d[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn folds_are_balanced(n_ids in 10usize..120, folds in 2usize..8, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n_ids).map(|i| format!("id{i:04}")).collect();
        let test = n_ids / 5;
        let train = n_ids - test;
        prop_assume!(train >= folds);
        let m = make_splits(&ids, SplitSizes { train, test, rt: test.min(3) }, folds, seed).unwrap();
        let sizes: Vec<usize> = m.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<String> = m.folds.concat();
        all.sort();
        let mut train_ids = m.train.clone();
        train_ids.sort();
        prop_assert_eq!(all, train_ids);
        prop_assert!(m.rt.iter().all(|id| m.test.contains(id)));
    }

    #[test]
    fn sigmoid_threshold_is_monotone(
        logits in prop::collection::vec(-5.0f32..5.0, 30),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p = PredictionVolume::new(geom([5, 3, 2]), 1, logits).unwrap();
        let a = to_mask(&p, Decision::SigmoidThreshold { threshold: lo }).unwrap();
        let b = to_mask(&p, Decision::SigmoidThreshold { threshold: hi }).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(x >= y);
        }
    }

    #[test]
    fn agreement_summary_matches_oracle(values in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let pairs: Vec<(String, DiceResult)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("s{i}"), DiceResult { value: v, n_a: 1, n_b: 1, n_intersection: 1 }))
            .collect();
        let r = agreement_from_scores(pairs, vec![]).unwrap();
        let oracle_median = Data::new(values.clone()).median();
        let oracle_mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((r.median - oracle_median).abs() <= 1e-12);
        prop_assert!((r.mean - oracle_mean).abs() <= 1e-12);
    }

    #[test]
    fn histogram_conserves_counts(values in prop::collection::vec(0.0f64..200.0, 0..300), width in 0.1f64..20.0) {
        let bins = histogram(&values, width).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), values.len() as u64);
        for v in &values {
            let holding = bins.iter().filter(|b| b.bin_left <= *v && *v < b.bin_right).count();
            prop_assert_eq!(holding, 1);
        }
    }

    #[test]
    fn summary_is_affine_covariant(
        values in prop::collection::vec(1.0f64..100.0, 3..60),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let reports = |vs: &[f64]| -> Vec<testvol::metrics::VolumeReport> {
            vs.iter()
                .enumerate()
                .map(|(i, &v)| testvol::metrics::VolumeReport {
                    subject_id: format!("s{i}"),
                    volume_ml: v,
                    voxel_count: 0,
                    voxel_volume_mm3: 1.0,
                    margin_flagged: false,
                    model_id: String::new(),
                })
                .collect()
        };
        let base = summarize(&reports(&values), SummaryOptions::default()).unwrap();
        let moved: Vec<f64> = values.iter().map(|v| v * scale + shift).collect();
        let s = summarize(&reports(&moved), SummaryOptions::default()).unwrap();
        let tol = 1e-9 * (1.0 + base.mean_ml.abs() * scale + shift.abs());
        prop_assert!((s.mean_ml - (base.mean_ml * scale + shift)).abs() <= tol);
        prop_assert!((s.sd_ml - base.sd_ml * scale).abs() <= 1e-9 * (1.0 + base.sd_ml * scale));
        // fractions may only differ for values sitting on a bound to rounding precision
        let near_bound = values.iter().any(|v| {
            let z = (v - base.mean_ml).abs() / base.sd_ml.max(f64::MIN_POSITIVE);
            (z - 2.0).abs() < 1e-9
        });
        if !near_bound {
            prop_assert_eq!(s.frac_outside_2sd, base.frac_outside_2sd);
        }
    }
}
