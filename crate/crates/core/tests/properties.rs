use disentangle_core::aggregation::{aggregate, class_probability, local_logits};
use disentangle_core::data_io::{decode_shard, encode_shard};
use disentangle_core::diffmath::{l2_normalize, softmax, DenseArray};
use disentangle_core::evaluation::{
    average_precision, mfi_statistic, miou, segment_scores, SegmentOptions, SegmentationMask,
    BACKGROUND,
};
use disentangle_core::losses::{asl_loss, mfi_loss, similarity_matrix, AslParams, GramAxis};
use disentangle_core::projectors::{init_projectors, project_image, FeatureGrid};
use disentangle_core::trainer::{cosine_lr, epoch_order};
use proptest::prelude::*;

fn matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = DenseArray<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |v| DenseArray::new(vec![r, c], v).unwrap())
    })
}

/// Rows bounded away from zero so normalization is well conditioned.
fn unit_rows(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = DenseArray<f64>> {
    matrix(rows, cols)
        .prop_filter("row norm too small", |m| {
            let (r, _) = m.dims2().unwrap();
            (0..r).all(|i| m.row(i).iter().map(|x| x * x).sum::<f64>() > 0.01)
        })
        .prop_map(|m| l2_normalize(&m, 1).unwrap())
}

fn permuted_rows(m: &DenseArray<f64>, perm: &[usize]) -> DenseArray<f64> {
    let (_, c) = m.dims2().unwrap();
    let v = perm.iter().flat_map(|&i| m.row(i).to_vec()).collect();
    DenseArray::new(vec![perm.len(), c], v).unwrap()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(m in matrix(1..6, 1..8), shift in -50.0f64..50.0) {
        let s = softmax(&m, 1).unwrap();
        let (r, c) = m.dims2().unwrap();
        for i in 0..r {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = DenseArray::new(vec![r, c], m.values().iter().map(|v| v + shift).collect()).unwrap();
        let t = softmax(&shifted, 1).unwrap();
        for (a, b) in s.values().iter().zip(t.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_idempotent(m in unit_rows(1..6, 1..8)) {
        let again = l2_normalize(&m, 1).unwrap();
        for (a, b) in m.values().iter().zip(again.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mfi_is_nonnegative_and_permutation_invariant(
        (t, perm) in unit_rows(2..8, 2..6).prop_flat_map(|t| {
            let r = t.shape()[0];
            (Just(t), permutation(r))
        }),
        lambda in 0.01f64..1.0,
    ) {
        let s = similarity_matrix(&t, GramAxis::Classes, false).unwrap();
        let base = mfi_loss(&s, lambda);
        prop_assert!(base >= 0.0);
        let sp = similarity_matrix(&permuted_rows(&t, &perm), GramAxis::Classes, false).unwrap();
        prop_assert!(close(base, mfi_loss(&sp, lambda), 1e-10));
        let sf = similarity_matrix(&t, GramAxis::Features, false).unwrap();
        prop_assert!(mfi_loss(&sf, lambda) >= 0.0);
    }

    #[test]
    fn aggregate_lies_within_map_bounds(map in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let a = aggregate(&map);
        let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn class_probability_is_antisymmetric(pos in -40.0f64..40.0, neg in -40.0f64..40.0) {
        let p = class_probability(pos, neg);
        prop_assert!(p > 0.0 && p < 1.0 || (pos - neg).abs() > 30.0);
        prop_assert!((p + class_probability(neg, pos) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asl_is_monotone_in_the_probability(p in 0.06f64..0.9, dp in 0.001f64..0.09) {
        let asl = AslParams::default();
        let (pos_lo, _) = asl_loss(&[p], &[1], &asl).unwrap();
        let (pos_hi, _) = asl_loss(&[p + dp], &[1], &asl).unwrap();
        prop_assert!(pos_hi < pos_lo);
        let (neg_lo, _) = asl_loss(&[p], &[0], &asl).unwrap();
        let (neg_hi, _) = asl_loss(&[p + dp], &[0], &asl).unwrap();
        prop_assert!(neg_hi > neg_lo);
    }

    #[test]
    fn image_projection_commutes_with_spatial_permutation(
        (vals, perm) in (prop::collection::vec(-2.0f32..2.0, 6 * 5), permutation(6)),
        seed in 0u64..1000,
    ) {
        let params = init_projectors(5, 4, 3, seed).unwrap();
        prop_assume!(vals.chunks(5).all(|c| c.iter().any(|v| v.abs() > 0.05)));
        let grid = FeatureGrid::new("g", 2, 3, 5, vals.clone(), vec![0, 1]).unwrap();
        let moved: Vec<f32> = perm.iter().flat_map(|&l| vals[l * 5..(l + 1) * 5].to_vec()).collect();
        let moved_grid = FeatureGrid::new("g", 2, 3, 5, moved, vec![0, 1]).unwrap();
        let a = project_image(&grid, &params).unwrap();
        let b = project_image(&moved_grid, &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&b.values()[dst * 3..dst * 3 + 3], &a.values()[src * 3..src * 3 + 3]);
        }
        let text = l2_normalize(&DenseArray::new(vec![4, 3], vec![1.0f32, 0.2, 0.0, 0.0, 1.0, 0.5, 0.3, 0.3, 1.0, -1.0, 0.1, 0.0]).unwrap(), 1).unwrap();
        let la = local_logits(&a, &text, 5.0).unwrap();
        let lb = local_logits(&b, &text, 5.0).unwrap();
        for j in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(lb.pos_map(j)[dst], la.pos_map(j)[src]);
                prop_assert_eq!(lb.neg_map(j)[dst], la.neg_map(j)[src]);
            }
        }
    }

    #[test]
    fn ap_ignores_strictly_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..30),
        seed in any::<u64>(),
    ) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let base = average_precision(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert_eq!(base, average_precision(&warped, &labels).unwrap());
    }

    #[test]
    fn mfi_statistic_ignores_order_and_sign(
        (t, perm, flips) in matrix(2..7, 2..5).prop_filter("zero row", |m| {
            let (r, _) = m.dims2().unwrap();
            (0..r).all(|i| m.row(i).iter().any(|v| v.abs() > 0.1))
        }).prop_flat_map(|t| {
            let r = t.shape()[0];
            (Just(t), permutation(r), prop::collection::vec(any::<bool>(), r))
        })
    ) {
        let base = mfi_statistic(&t).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        prop_assert!(close(base, mfi_statistic(&permuted_rows(&t, &perm)).unwrap(), 1e-12));
        let (r, c) = t.dims2().unwrap();
        let flipped: Vec<f64> = (0..r)
            .flat_map(|i| t.row(i).iter().map(|&v| if flips[i] { -v } else { v }).collect::<Vec<_>>())
            .collect();
        let flipped = DenseArray::new(vec![r, c], flipped).unwrap();
        prop_assert!(close(base, mfi_statistic(&flipped).unwrap(), 1e-12));
    }

    #[test]
    fn miou_is_symmetric(
        a in prop::collection::vec(0u16..4, 16),
        b in prop::collection::vec(0u16..4, 16),
        include_background in any::<bool>(),
    ) {
        let to_mask = |v: &Vec<u16>| {
            let ids = v.iter().map(|&c| if c == 3 { BACKGROUND } else { c }).collect();
            SegmentationMask::new(4, 4, 3, ids).unwrap()
        };
        let (pa, pb) = (to_mask(&a), to_mask(&b));
        prop_assert_eq!(miou(&pa, &pb, include_background).unwrap(), miou(&pb, &pa, include_background).unwrap());
    }

    #[test]
    fn segmentation_decisions_ignore_per_pixel_shifts(
        scores in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 4),
        shifts in prop::collection::vec(-5.0f64..5.0, 6),
        threshold in 0.0f64..1.0,
    ) {
        let grid = DenseArray::new(vec![3, 2, 4], scores.clone()).unwrap();
        let shifted: Vec<f64> = scores.iter().enumerate().map(|(i, v)| v + shifts[i / 4]).collect();
        let shifted = DenseArray::new(vec![3, 2, 4], shifted).unwrap();
        let argmax_only = SegmentOptions { out_size: (3, 2), bg_threshold: 0.0, softmax_scale: 10.0 };
        prop_assert_eq!(
            segment_scores(&grid, &argmax_only).unwrap(),
            segment_scores(&shifted, &argmax_only).unwrap()
        );
        // The softmax removes the shift, so the background decision is unchanged too.
        let opts = SegmentOptions { bg_threshold: threshold, ..argmax_only };
        prop_assert_eq!(segment_scores(&grid, &opts).unwrap(), segment_scores(&shifted, &opts).unwrap());
    }

    #[test]
    fn schedule_is_bounded_and_non_increasing(total in 1usize..500, lr0 in 0.0f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, lr0).unwrap();
            prop_assert!(lr >= -1e-18 && lr <= lr0 && lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..200, seed in any::<u64>(), epoch in 0usize..100) {
        let mut order = epoch_order(n, seed, epoch, true);
        prop_assert_eq!(&order, &epoch_order(n, seed, epoch, true));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn init_is_a_function_of_the_seed(seed in any::<u64>()) {
        prop_assert_eq!(init_projectors(7, 5, 3, seed).unwrap(), init_projectors(7, 5, 3, seed).unwrap());
    }

    #[test]
    fn shards_round_trip(
        recs in prop::collection::vec(
            (1usize..4, 1usize..4, "[a-z0-9_]{0,12}", any::<u64>()),
            0..5,
        )
    ) {
        let grids: Vec<FeatureGrid> = recs
            .iter()
            .map(|(h, w, id, bits)| {
                let vals = (0..h * w * 3).map(|i| f32::from_bits((*bits as u32).wrapping_mul(i as u32 + 1) & 0x7f7f_ffff)).collect();
                let labels = (0..4).map(|j| ((bits >> j) & 1) as u8).collect();
                FeatureGrid::new(id.clone(), *h, *w, 3, vals, labels).unwrap()
            })
            .collect();
        let bytes = encode_shard(&grids).unwrap();
        prop_assert_eq!(decode_shard(&bytes).unwrap(), grids);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn asl_without_focusing_is_binary_cross_entropy(
        draws in prop::collection::vec((0.001f64..0.999, any::<bool>()), 1..10)
    ) {
        let probs: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let labels: Vec<u8> = draws.iter().map(|d| d.1 as u8).collect();
        let (loss, grad) = asl_loss(&probs, &labels, &AslParams::bce()).unwrap();
        let n = probs.len() as f64;
        let bce: f64 = probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>() / n;
        prop_assert!(close(loss, bce, 1e-12));
        for ((&p, &y), &g) in probs.iter().zip(&labels).zip(&grad) {
            let want = if y == 1 { -1.0 / p } else { 1.0 / (1.0 - p) } / n;
            prop_assert!(close(g, want, 1e-9));
        }
    }
}

#[test]
fn temperature_changes_background_but_not_argmax() {
    let s = DenseArray::new(vec![1, 1, 3], vec![0.30, 0.25, 0.10]).unwrap();
    let cold = SegmentOptions {
        out_size: (1, 1),
        bg_threshold: 0.85,
        softmax_scale: 100.0,
    };
    let warm = SegmentOptions {
        softmax_scale: 5.0,
        ..cold
    };
    assert_eq!(segment_scores(&s, &cold).unwrap().class_ids, vec![0]);
    assert_eq!(
        segment_scores(&s, &warm).unwrap().class_ids,
        vec![BACKGROUND]
    );
    let zero = SegmentOptions {
        bg_threshold: 0.0,
        ..warm
    };
    assert_eq!(segment_scores(&s, &zero).unwrap().class_ids, vec![0]);
}
