//! Geometry oracles and property tests: IoU against rasterized counting,
//! encode/decode roundtrips, matching invariants.

mod common;

use bpn_core::boxes::{decode_box, encode_box, iou_matrix, BBox};
use bpn_core::matching::{match_anchors, sample_hard_negatives, AnchorStatus};
use bpn_core::rng::RngState;
use common::rasterized_iou;
use proptest::prelude::*;

fn int_box(rng: &mut RngState, extent: u64) -> BBox {
    let x0 = rng.below(extent - 1);
    let y0 = rng.below(extent - 1);
    let w = 1 + rng.below(extent - 1 - x0.min(extent - 2));
    let h = 1 + rng.below(extent - 1 - y0.min(extent - 2));
    BBox::new(
        x0 as f64,
        y0 as f64,
        (x0 + w).min(extent) as f64,
        (y0 + h).min(extent) as f64,
    )
}

#[test]
fn iou_matches_rasterized_counting_on_1000_pairs() {
    let mut rng = RngState::new(42);
    for _ in 0..1000 {
        let a = int_box(&mut rng, 400);
        let b = int_box(&mut rng, 400);
        let analytic = a.iou(&b);
        let counted = rasterized_iou(&a, &b, 400);
        assert!(
            (analytic - counted).abs() < 1e-3,
            "{a:?} vs {b:?}: {analytic} vs {counted}"
        );
    }
}

#[test]
fn encode_decode_roundtrip_10k_pairs() {
    let mut rng = RngState::new(7);
    for _ in 0..10_000 {
        let (iw, ih) = (400.0, 300.0);
        let mk = |rng: &mut RngState| {
            let w = rng.range(4.0, 120.0);
            let h = rng.range(4.0, 120.0);
            let cx = rng.range(w / 2.0, iw - w / 2.0);
            let cy = rng.range(h / 2.0, ih - h / 2.0);
            BBox::from_center(cx, cy, w, h)
        };
        let gt = mk(&mut rng);
        let anchor = mk(&mut rng);
        let t = encode_box(&gt, &anchor).unwrap();
        let d = decode_box(&t, &anchor, iw, ih);
        for (a, b) in [
            (d.xmin, gt.xmin),
            (d.ymin, gt.ymin),
            (d.xmax, gt.xmax),
            (d.ymax, gt.ymax),
        ] {
            assert!((a - b).abs() < 1e-9, "{d:?} vs {gt:?}");
        }
    }
}

#[test]
fn matching_monotone_in_threshold_over_random_scenes() {
    // Brute-force enumeration over 50 random scenes: positive counts are
    // nonincreasing across rising thresholds.
    let root = RngState::new(99);
    for scene in 0..50u64 {
        let mut rng = root.split(scene);
        let anchors: Vec<BBox> = (0..60)
            .map(|_| {
                let s = rng.range(8.0, 40.0);
                BBox::from_center(rng.range(10.0, 120.0), rng.range(10.0, 120.0), s, s)
            })
            .collect();
        let n_gts = 1 + rng.below(4) as usize;
        let gts: Vec<BBox> = (0..n_gts)
            .map(|_| {
                let w = rng.range(8.0, 50.0);
                let h = rng.range(8.0, 50.0);
                BBox::from_center(rng.range(20.0, 110.0), rng.range(20.0, 110.0), w, h)
            })
            .collect();
        let labels = vec![1u32; n_gts];
        let mut prev = usize::MAX;
        for thr in [0.5, 0.6, 0.7] {
            let count = match_anchors(&anchors, &gts, &labels, thr)
                .unwrap()
                .positive_count();
            assert!(count <= prev, "scene {scene}: rose at {thr}");
            prev = count;
        }
    }
}

#[test]
fn every_gt_gets_a_positive_with_grid_anchors() {
    let root = RngState::new(3);
    // Anchor grid covering a 128 image at stride 8, scale 32.
    let grid = bpn_core::anchors::generate_anchors(1, 16, 16, 8);
    for scene in 0..30u64 {
        let mut rng = root.split(scene);
        let n = 1 + rng.below(5) as usize;
        let gts: Vec<BBox> = (0..n)
            .map(|_| {
                let w = rng.range(4.0, 80.0);
                let h = rng.range(4.0, 80.0);
                BBox::from_center(
                    rng.range(w / 2.0, 128.0 - w / 2.0),
                    rng.range(h / 2.0, 128.0 - h / 2.0),
                    w,
                    h,
                )
            })
            .collect();
        let labels: Vec<u32> = (0..n).map(|i| 1 + (i % 3) as u32).collect();
        let m = match_anchors(&grid.boxes, &gts, &labels, 0.5).unwrap();
        let mut claimed = vec![false; n];
        for gi in m.matched_gt.iter().flatten() {
            claimed[*gi] = true;
        }
        assert!(claimed.iter().all(|c| *c), "scene {scene}: unclaimed gt");
    }
}

#[test]
fn matching_gt_order_invariant_on_generic_scenes() {
    let root = RngState::new(17);
    let grid = bpn_core::anchors::generate_anchors(1, 16, 16, 8);
    for scene in 0..20u64 {
        let mut rng = root.split(scene);
        let n = 2 + rng.below(3) as usize;
        let gts: Vec<BBox> = (0..n)
            .map(|_| {
                let w = rng.range(16.0, 60.0);
                let h = rng.range(16.0, 60.0);
                BBox::from_center(
                    rng.range(w / 2.0, 128.0 - w / 2.0),
                    rng.range(h / 2.0, 128.0 - h / 2.0),
                    w,
                    h,
                )
            })
            .collect();
        let labels: Vec<u32> = (1..=n as u32).collect();
        let fwd = match_anchors(&grid.boxes, &gts, &labels, 0.5).unwrap();

        let rev_gts: Vec<BBox> = gts.iter().rev().cloned().collect();
        let rev_labels: Vec<u32> = labels.iter().rev().cloned().collect();
        let rev = match_anchors(&grid.boxes, &rev_gts, &rev_labels, 0.5).unwrap();

        // Same positive anchor set with the same class labels.
        for i in 0..grid.boxes.len() {
            assert_eq!(fwd.status[i], rev.status[i], "scene {scene} anchor {i}");
            assert_eq!(fwd.labels[i], rev.labels[i], "scene {scene} anchor {i}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_symmetric_bounded(
        ax in 0.0f64..100.0, ay in 0.0f64..100.0, aw in 0.0f64..50.0, ah in 0.0f64..50.0,
        bx in 0.0f64..100.0, by in 0.0f64..100.0, bw in 0.0f64..50.0, bh in 0.0f64..50.0,
    ) {
        let a = BBox::new(ax, ay, ax + aw, ay + ah);
        let b = BBox::new(bx, by, bx + bw, by + bh);
        let ab = a.iou(&b);
        let ba = b.iou(&a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        if aw > 0.0 && ah > 0.0 {
            prop_assert_eq!(a.iou(&a), 1.0);
        }
    }

    #[test]
    fn iou_is_one_only_for_identical_boxes(
        ax in 0.0f64..100.0, ay in 0.0f64..100.0, aw in 1.0f64..50.0, ah in 1.0f64..50.0,
        dx in -5.0f64..5.0,
    ) {
        let a = BBox::new(ax, ay, ax + aw, ay + ah);
        let b = BBox::new(ax + dx, ay, ax + aw + dx, ay + ah);
        if dx != 0.0 {
            prop_assert!(a.iou(&b) < 1.0);
        }
    }

    #[test]
    fn iou_matrix_matches_pairwise(
        seed in 0u64..1000,
    ) {
        let mut rng = RngState::new(seed);
        let anchors: Vec<BBox> = (0..5).map(|_| int_box(&mut rng, 100)).collect();
        let gts: Vec<BBox> = (0..3).map(|_| int_box(&mut rng, 100)).collect();
        let m = iou_matrix(&anchors, &gts);
        for (i, a) in anchors.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                prop_assert_eq!(m[i][j], a.iou(g));
            }
        }
    }

    #[test]
    fn hard_negative_sampling_counts(
        seed in 0u64..500,
        n_anchors in 8usize..60,
    ) {
        let mut rng = RngState::new(seed);
        let anchors: Vec<BBox> = (0..n_anchors)
            .map(|i| BBox::from_center(10.0 + 18.0 * (i % 10) as f64, 10.0 + 18.0 * (i / 10) as f64, 12.0, 12.0))
            .collect();
        let gts = vec![BBox::from_center(10.0, 10.0, 12.0, 12.0)];
        let m = match_anchors(&anchors, &gts, &[1], 0.5).unwrap();
        let losses: Vec<f64> = (0..n_anchors).map(|_| rng.uniform()).collect();
        let s = sample_hard_negatives(&m, &losses);
        let p = s.positive_count();
        let kept = s.status.iter().filter(|st| **st == AnchorStatus::Negative).count();
        let available = m.status.iter().filter(|st| **st == AnchorStatus::Negative).count();
        let expect = if p == 0 { 1 } else { 3 * p };
        prop_assert_eq!(kept, expect.min(available));
        // Determinism: same inputs, same outcome.
        let s2 = sample_hard_negatives(&m, &losses);
        prop_assert_eq!(format!("{:?}", s.status), format!("{:?}", s2.status));
    }

    #[test]
    fn decode_always_inside_image(
        seed in 0u64..500,
    ) {
        let mut rng = RngState::new(seed);
        let anchor = BBox::from_center(
            rng.range(0.0, 128.0),
            rng.range(0.0, 128.0),
            rng.range(1.0, 64.0),
            rng.range(1.0, 64.0),
        );
        let t = bpn_core::boxes::EncodedOffsets {
            tx: rng.range(-30.0, 30.0),
            ty: rng.range(-30.0, 30.0),
            tw: rng.range(-80.0, 80.0),
            th: rng.range(-80.0, 80.0),
        };
        let d = decode_box(&t, &anchor, 128.0, 128.0);
        prop_assert!(d.xmin >= 0.0 && d.ymin >= 0.0);
        prop_assert!(d.xmax <= 128.0 && d.ymax <= 128.0);
        prop_assert!(d.is_valid());
    }
}
