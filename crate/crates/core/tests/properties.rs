mod common;

use common::{rng, uniform};
use evodhm::alignment_pipeline::{yaw_bin, YAW_BIN_EDGES};
use evodhm::diffusion_heatmap::{rasterize_heatmap, window_radius};
use evodhm::evaluation::*;
use evodhm::morphable_model::Landmarks2D;
use evodhm::tensor_nn::{conv2d_forward, cost_of_rect, reference, ConvSpec};
use proptest::prelude::*;

fn spec_for(mode: u8, k: usize, cin: usize, cout: usize, stride: usize) -> ConvSpec {
    match mode {
        0 => ConvSpec::standard(k, cin, cout, stride),
        1 => ConvSpec::depthwise(k, cin, stride),
        _ => ConvSpec::pointwise(cin, cout),
    }
}

fn points(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(lo..hi), n)
}

fn spread(pts: &[[f64; 2]]) -> bool {
    let span = |a: usize| {
        let v = pts.iter().map(|p| p[a]);
        v.clone().fold(f64::MIN, f64::max) - v.fold(f64::MAX, f64::min)
    };
    span(0) > 1e-3 && span(1) > 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum(
        mode in 0u8..3, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2,
        cin in 1usize..5, cout in 1usize..5, h in 1usize..8, w in 1usize..8, seed in any::<u64>(),
    ) {
        let spec = spec_for(mode, k, cin, cout, stride);
        let mut r = rng(seed);
        let x = uniform(&[h, w, cin], &mut r);
        let wt = uniform(&spec.weight_shape(), &mut r);
        let fast = conv2d_forward(&x, &spec, &wt).unwrap();
        let slow = reference::conv2d(&x, &spec, &wt).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn cost_formula_counts_every_mult_add(
        mode in 0u8..3, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2,
        cin in 1usize..6, cout in 1usize..6, h in 1usize..10, w in 1usize..10, seed in any::<u64>(),
    ) {
        let spec = spec_for(mode, k, cin, cout, stride);
        let mut r = rng(seed);
        let x = uniform(&[h, w, cin], &mut r);
        let wt = uniform(&spec.weight_shape(), &mut r);
        let (y, macs) = reference::conv2d_counting(&x, &spec, &wt).unwrap();
        let cost = cost_of_rect(&spec, y.shape()[0], y.shape()[1]);
        prop_assert_eq!(cost.mult_adds, macs);
        prop_assert_eq!(cost.parameters, wt.len() as u64);
    }

    #[test]
    fn heatmap_is_bounded_and_local(
        pts in points(6, -4.0, 24.0),
        vals in prop::collection::vec(0.0f64..=1.0, 18),
        sigma in 0.3f64..3.0,
    ) {
        let lm = Landmarks2D::from_points(&pts);
        let map = rasterize_heatmap(&lm, &vals, (20, 20), sigma).unwrap();
        let reach = window_radius(sigma) as f64 + 0.5f64.hypot(0.5);
        for (i, px) in map.data.data().chunks_exact(3).enumerate() {
            prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            if px.iter().any(|&v| v > 0.0) {
                let (x, y) = ((i % 20) as f64, (i / 20) as f64);
                prop_assert!(pts.iter().any(|p| (p[0] - x).hypot(p[1] - y) <= reach));
            }
        }
    }

    #[test]
    fn nme_is_scale_and_order_invariant(
        gt in points(8, 0.0, 100.0), pred in points(8, 0.0, 100.0),
        s in 0.01f64..50.0, rot in 0usize..8,
    ) {
        prop_assume!(spread(&gt));
        let base = nme_gt_box(&Landmarks2D::from_points(&pred), &Landmarks2D::from_points(&gt)).unwrap();
        let scaled = |v: &[[f64; 2]]| Landmarks2D::from_points(&v.iter().map(|p| [p[0] * s, p[1] * s]).collect::<Vec<_>>());
        let e = nme_gt_box(&scaled(&pred), &scaled(&gt)).unwrap();
        prop_assert!((e - base).abs() <= 1e-12 * base.max(1e-3));
        let (mut g2, mut p2) = (gt.clone(), pred.clone());
        g2.rotate_left(rot);
        p2.rotate_left(rot);
        let e = nme_gt_box(&Landmarks2D::from_points(&p2), &Landmarks2D::from_points(&g2)).unwrap();
        prop_assert!((e - base).abs() <= 1e-12 * base.max(1e-3));
    }

    #[test]
    fn nme_ignores_common_translation(
        gt in points(8, 0.0, 100.0), pred in points(8, 0.0, 100.0),
        dx in -500.0f64..500.0, dy in -500.0f64..500.0,
    ) {
        prop_assume!(spread(&gt));
        let base = nme_gt_box(&Landmarks2D::from_points(&pred), &Landmarks2D::from_points(&gt)).unwrap();
        let moved = |v: &[[f64; 2]]| Landmarks2D::from_points(&v.iter().map(|p| [p[0] + dx, p[1] + dy]).collect::<Vec<_>>());
        let e = nme_gt_box(&moved(&pred), &moved(&gt)).unwrap();
        prop_assert!((e - base).abs() <= 1e-9 * base.max(1e-3));
    }

    #[test]
    fn ced_is_monotone_and_bounded(errs in prop::collection::vec(0.0f64..0.2, 1..40)) {
        let grid = default_ced_grid();
        let curve = ced_curve(&errs, &grid).unwrap();
        prop_assert_eq!(curve.len(), grid.len());
        prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
        prop_assert!(curve.iter().all(|&(_, f)| (0.0..=1.0).contains(&f)));
        let n = errs.len();
        let at = curve[60].1;
        let fail = failure_rate(&errs, FAILURE_THRESHOLD);
        prop_assert_eq!((at * n as f64).round() as usize + (fail * n as f64).round() as usize, n);
    }

    #[test]
    fn report_mean_is_weighted_mean_of_bins(
        rows in prop::collection::vec((0.0f64..0.2, -90.0f64..=90.0), 1..50),
    ) {
        let (errs, yaws): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
        let r = pose_binned_report(&errs, &yaws).unwrap();
        let counts: usize = r.pose_bin_counts.iter().sum();
        prop_assert_eq!(counts, errs.len());
        let weighted: f64 = r
            .pose_bin_means
            .iter()
            .zip(r.pose_bin_counts)
            .map(|(m, c)| m.map_or(0.0, |m| m * c as f64))
            .sum::<f64>() / counts as f64;
        prop_assert!((weighted - r.mean_nme).abs() <= 1e-12);
        for (m, c) in r.pose_bin_means.iter().zip(r.pose_bin_counts) {
            prop_assert_eq!(m.is_some(), c > 0);
        }
    }

    #[test]
    fn yaw_bins_partition_the_range(yaw in -90.0f64..=90.0) {
        let b = yaw_bin(yaw);
        let lo = if b == 0 { 0.0 } else { YAW_BIN_EDGES[b - 1] };
        prop_assert!(yaw.abs() >= lo);
        prop_assert!(yaw.abs() < YAW_BIN_EDGES[b] || (b == 2 && yaw.abs() <= 90.0));
        prop_assert_eq!(yaw_bin(-yaw), b);
    }
}
