use proptest::prelude::*;
use sdetr_core::eval::{average_precision, average_recall_at_k, GroundTruth, MetricReport};
use sdetr_core::geometry::{box_giou, box_iou, map_box, BoxXYXY, FrameTransform};
use sdetr_core::losses::hungarian;
use sdetr_core::objective::Detection;
use sdetr_core::{Tape, Tensor};

fn boxes() -> impl Strategy<Value = BoxXYXY> {
    (0.0f32..60.0, 0.0f32..60.0, 0.5f32..40.0, 0.5f32..40.0)
        .prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h).unwrap())
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost[0].len()])
}

fn cost_matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(a, b)| {
        let (m, n) = (a.min(b), a.max(b));
        prop::collection::vec(prop::collection::vec(-20i32..20, n), m)
            .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
    })
}

fn scene() -> impl Strategy<Value = (Vec<GroundTruth>, Vec<Detection>)> {
    let gt = prop::collection::vec(prop::collection::vec((boxes(), 0usize..3), 0..4), 1..4);
    gt.prop_flat_map(|gt| {
        let images = gt.len();
        let dets = prop::collection::vec((0..images, boxes(), 0usize..3), 0..12);
        (Just(gt), dets)
    })
    .prop_map(|(gt, dets)| {
        let gt = gt
            .into_iter()
            .map(|objs| GroundTruth {
                boxes: objs.iter().map(|o| o.0).collect(),
                labels: objs.iter().map(|o| o.1).collect(),
            })
            .collect();
        // Distinct confidences, so input order cannot act as a tie-break.
        let n = dets.len().max(1) as f32;
        let dets = dets
            .into_iter()
            .enumerate()
            .map(|(i, (image, bbox, class))| Detection {
                image,
                bbox,
                class,
                score: ((i * 7919) % 1009) as f32 / 1009.0 * 0.5 + 0.5 * i as f32 / n,
            })
            .collect();
        (gt, dets)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..5,
        vals in prop::collection::vec(-480i32..480, 1..24),
        shift in -50i32..50,
    ) {
        // Inputs on a 1/16 grid and integer shifts keep `x + shift` exact.
        let shift = shift as f32;
        let cols = vals.len().div_ceil(rows);
        let data: Vec<f32> = (0..rows * cols).map(|i| vals[i % vals.len()] as f32 / 16.0).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([rows, cols], data.clone()).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let y = tape.constant(Tensor::new([rows, cols], data.iter().map(|v| v + shift).collect()).unwrap());
        let t = tape.softmax(y, 1).unwrap();
        let (a, b) = (tape.value(s).data().to_vec(), tape.value(t).data().to_vec());
        for r in 0..rows {
            let sum: f32 = a[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn iou_and_giou_symmetric_and_ordered(a in boxes(), b in boxes()) {
        prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        prop_assert_eq!(box_giou(&a, &b), box_giou(&b, &a));
        prop_assert!(box_giou(&a, &b) <= box_iou(&a, &b) + 1e-6);
        prop_assert!((0.0..=1.0).contains(&box_iou(&a, &b)));
        prop_assert!(box_giou(&a, &b) >= -1.0);
    }

    #[test]
    fn map_box_inverse_is_identity(
        b in (1.0f32..30.0, 1.0f32..30.0, 1.0f32..20.0, 1.0f32..20.0),
        rect in (0.0f32..10.0, 0.0f32..10.0, 50.0f32..60.0, 50.0f32..60.0),
        size in (16.0f32..128.0, 16.0f32..128.0),
        flip in any::<bool>(),
    ) {
        let bx = BoxXYXY::new(b.0 + rect.0, b.1 + rect.1, b.0 + rect.0 + b.2, b.1 + rect.1 + b.3).unwrap();
        let r = BoxXYXY::new(rect.0, rect.1, rect.0 + rect.2, rect.1 + rect.3).unwrap();
        let mut t = FrameTransform::crop_resize(&r, size.0, size.1);
        t.flip = flip;
        let m = map_box(&bx, &t).unwrap();
        let back = t.invert_box(&m);
        for (x, y) in back.to_array().iter().zip(bx.to_array()) {
            prop_assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn hungarian_is_optimal_and_repeatable(cost in cost_matrix(5)) {
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.len(), cost.len());
        let mut seen = a.pred.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), a.len());
        prop_assert_eq!(a.cost(&cost), brute_force(&cost));
        prop_assert_eq!(hungarian(&cost).unwrap(), a);
    }

    #[test]
    fn hungarian_ignores_row_constants(cost in cost_matrix(5), row in 0usize..5, k in -50i32..50) {
        let mut shifted = cost.clone();
        let r = row % cost.len();
        for v in &mut shifted[r] {
            *v += f64::from(k);
        }
        prop_assert_eq!(hungarian(&cost).unwrap(), hungarian(&shifted).unwrap());
    }

    #[test]
    fn ap_falls_with_the_threshold((gt, dets) in scene()) {
        let mut prev = f32::INFINITY;
        for i in 0..10 {
            let ap = average_precision(&dets, &gt, 0.5 + 0.05 * i as f32);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= prev + 1e-6);
            prev = ap;
        }
    }

    #[test]
    fn ar_grows_with_k((gt, dets) in scene()) {
        let mut prev = 0.0f32;
        for k in [0, 1, 2, 5, 10, 100] {
            let ar = average_recall_at_k(&dets, &gt, k);
            prop_assert!(ar + 1e-6 >= prev);
            prev = ar;
        }
    }

    #[test]
    fn metrics_ignore_input_order((gt, dets) in scene(), seed in any::<u64>()) {
        let r = MetricReport::compute(&dets, &gt);
        prop_assert!(r.ap <= r.ap50 + 1e-6);
        let mut shuffled = dets.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(MetricReport::compute(&shuffled, &gt), r);
    }
}
