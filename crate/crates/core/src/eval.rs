//! Evaluation: VOC-style average precision at multiple IoU thresholds and
//! the matched-anchor statistics table.

use crate::anchors::AnchorSet;
use crate::boxes::BBox;
use crate::cascade::{car_refine, infer, stage_reg_rows, Detection, InferConfig};
use crate::data::Scene;
use crate::error::Result;
use crate::matching::match_anchors;
use crate::network::Bpn;
use crate::scalar::Scalar;
use crate::tensor::Graph;
use std::collections::HashMap;

/// One labeled object for evaluation.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: u32,
    pub bbox: BBox,
}

/// Monotone precision/recall envelope points and the area under it.
#[derive(Clone, Debug)]
pub struct PRCurve {
    /// `(recall, precision)` after each detection, recall nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision for one class: detections are ranked by descending
/// score (ties to the lowest index); each greedily claims the
/// highest-IoU unclaimed ground truth in its image at or above the
/// threshold (TP) or counts as a false positive. AP is the all-point
/// interpolated area `sum (r_i - r_{i-1}) * max_{r' >= r_i} p(r')`.
pub fn voc_ap(detections: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> PRCurve {
    let total_gts = gts.len();
    if total_gts == 0 {
        // All detections are false positives; AP is 0 by convention.
        let points = (1..=detections.len()).map(|_| (0.0, 0.0)).collect();
        return PRCurve { points, ap: 0.0 };
    }

    let mut per_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        per_image.entry(gt.image_id.as_str()).or_default().push(i);
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|a, b| {
        detections[*b]
            .score
            .partial_cmp(&detections[*a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });

    let mut claimed = vec![false; total_gts];
    let mut points = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &d in &order {
        let det = &detections[d];
        let mut best: Option<(f64, usize)> = None;
        if let Some(cands) = per_image.get(det.image_id.as_str()) {
            for &gi in cands {
                if claimed[gi] {
                    continue;
                }
                let iou = det.bbox.iou(&gts[gi].bbox);
                if iou >= iou_threshold && best.map_or(true, |(bv, _)| iou > bv) {
                    best = Some((iou, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                claimed[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((
            tp as f64 / total_gts as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    // Area under the max-interpolated envelope.
    let mut ap = 0.0;
    let mut max_prec = 0.0;
    let mut prev_recall = f64::NAN;
    for &(r, p) in points.iter().rev() {
        if prev_recall.is_nan() {
            prev_recall = r;
            max_prec = p;
            continue;
        }
        if r < prev_recall {
            ap += (prev_recall - r) * max_prec;
            prev_recall = r;
        }
        max_prec = max_prec.max(p);
    }
    if !prev_recall.is_nan() {
        ap += prev_recall * max_prec;
    }
    PRCurve { points, ap }
}

/// Per-class AP and the mean at one threshold. Classes enter the mean only
/// if they have ground truths.
#[derive(Clone, Debug)]
pub struct ThresholdEval {
    pub iou_threshold: f64,
    pub map: f64,
    /// `(class id, ap)` for every class with ground truths, ascending id.
    pub per_class: Vec<(u32, f64)>,
    pub curves: Vec<(u32, PRCurve)>,
}

/// mAP at several IoU thresholds.
pub fn map_at_iou(
    detections: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Vec<ThresholdEval> {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    thresholds
        .iter()
        .map(|t| {
            let mut per_class = Vec::new();
            let mut curves = Vec::new();
            for &class in &classes {
                let dets: Vec<Detection> = detections
                    .iter()
                    .filter(|d| d.class == class)
                    .cloned()
                    .collect();
                let class_gts: Vec<GroundTruth> =
                    gts.iter().filter(|g| g.class == class).cloned().collect();
                let curve = voc_ap(&dets, &class_gts, *t);
                per_class.push((class, curve.ap));
                curves.push((class, curve));
            }
            let map = if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
            };
            ThresholdEval {
                iou_threshold: *t,
                map,
                per_class,
                curves,
            }
        })
        .collect()
}

/// Runs inference over a scene list and collects detections plus ground
/// truths in evaluation form.
pub fn detect_scenes<F: Scalar>(
    net: &Bpn<F>,
    scenes: &[Scene],
    cfg: &InferConfig,
) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    for scene in scenes {
        let image = scene.to_tensor::<F>();
        detections.extend(infer(net, &image, &scene.image_id, cfg)?);
        for (bbox, class) in &scene.objects {
            gts.push(GroundTruth {
                image_id: scene.image_id.clone(),
                class: *class,
                bbox: *bbox,
            });
        }
    }
    Ok((detections, gts))
}

/// The matched-anchor statistics table: rows are measuring IoU thresholds,
/// columns are anchor stages (predefined, once-refined, twice-refined),
/// cells are mean matched-anchor counts per image.
#[derive(Clone, Debug)]
pub struct MatchStats {
    pub thresholds: Vec<f64>,
    /// Column names in refinement order.
    pub columns: Vec<String>,
    /// `rows[t][col]` indexed like `thresholds` x `columns`.
    pub rows: Vec<Vec<f64>>,
}

pub const STAT_COLUMN_NAMES: [&str; 3] = ["predefined", "once_refined", "twice_refined"];

impl MatchStats {
    /// Renders the table with a header line, thresholds at 2 decimals.
    pub fn render(&self) -> String {
        let mut out = String::from("iou");
        for c in &self.columns {
            out.push(' ');
            out.push_str(c);
        }
        out.push('\n');
        for (t, row) in self.thresholds.iter().zip(&self.rows) {
            out.push_str(&format!("{t:.2}"));
            for v in row {
                out.push_str(&format!(" {v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Counts anchors whose best IoU against any object reaches each threshold,
/// averaged per image, for every refinement stage the model provides.
/// Without a model only the predefined column is produced.
pub fn match_statistics<F: Scalar>(
    net: Option<&Bpn<F>>,
    scenes: &[Scene],
    thresholds: &[f64],
) -> Result<MatchStats> {
    let stages = net.map_or(1, |n| n.cfg.stages.min(3));
    let mut sums = vec![vec![0.0f64; stages]; thresholds.len()];

    for scene in scenes {
        // Per-stage anchor sets for this scene.
        let mut stage_anchors: Vec<Vec<BBox>> = Vec::new();
        match net {
            Some(net) => {
                let image = scene.to_tensor::<F>();
                let mut g = Graph::new();
                let fwd = net.forward(&mut g, image)?;
                let anchors0 = AnchorSet::for_feature_sizes(&fwd.feature_sizes);
                let (w, h) = (scene.width as f64, scene.height as f64);
                let mut current = anchors0.boxes.clone();
                stage_anchors.push(current.clone());
                for qi in 0..stages - 1 {
                    let reg = stage_reg_rows(&g, &fwd, qi, 0);
                    current = car_refine(&current, &reg, w, h)?;
                    stage_anchors.push(current.clone());
                }
            }
            None => {
                let sizes: Vec<(usize, usize)> = crate::anchors::LEVEL_STRIDES
                    .iter()
                    .map(|s| (scene.height / s, scene.width / s))
                    .collect();
                stage_anchors.push(AnchorSet::for_feature_sizes(&sizes).boxes);
            }
        }

        let gt_boxes: Vec<BBox> = scene.objects.iter().map(|(b, _)| *b).collect();
        for (col, anchors) in stage_anchors.iter().enumerate() {
            for anchor in anchors {
                let best = gt_boxes
                    .iter()
                    .map(|g| anchor.iou(g))
                    .fold(0.0f64, f64::max);
                for (row, t) in thresholds.iter().enumerate() {
                    if best >= *t {
                        sums[row][col] += 1.0;
                    }
                }
            }
        }
    }

    let n = scenes.len().max(1) as f64;
    Ok(MatchStats {
        thresholds: thresholds.to_vec(),
        columns: STAT_COLUMN_NAMES[..stages].iter().map(|s| s.to_string()).collect(),
        rows: sums
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / n).collect())
            .collect(),
    })
}

/// Per-stage matched-positive counts (the training-side statistic): how
/// many anchors of each refinement stage a matching pass at `threshold`
/// would mark positive for this scene.
pub fn matched_positive_counts(
    stage_anchors: &[Vec<BBox>],
    scene: &Scene,
    threshold: f64,
) -> Result<Vec<usize>> {
    let gts: Vec<BBox> = scene.objects.iter().map(|(b, _)| *b).collect();
    let labels: Vec<u32> = scene.objects.iter().map(|(_, l)| *l).collect();
    stage_anchors
        .iter()
        .map(|anchors| {
            Ok(match_anchors(anchors, &gts, &labels, threshold)?.positive_count())
        })
        .collect()
}

/// Formats the metrics report: `mAP@t` lines first, then per-class AP
/// lines, all as `metric value` pairs.
pub fn render_metrics(evals: &[ThresholdEval], class_names: &[String]) -> String {
    let mut out = String::new();
    for e in evals {
        out.push_str(&format!("mAP@{:.2} {:.6}\n", e.iou_threshold, e.map));
    }
    for e in evals {
        for (class, ap) in &e.per_class {
            let name = class_names
                .get(*class as usize - 1)
                .cloned()
                .unwrap_or_else(|| format!("class{class}"));
            out.push_str(&format!("AP@{:.2}/{} {:.6}\n", e.iou_threshold, name, ap));
        }
    }
    out
}

/// PR curve as CSV (`recall,precision` rows).
pub fn pr_curve_csv(curve: &PRCurve) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &curve.points {
        out.push_str(&format!("{r:.6},{p:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(id: &str, class: u32, score: f64, b: BBox) -> Detection {
        Detection {
            image_id: id.into(),
            class,
            score,
            bbox: b,
            quality: 1,
        }
    }

    fn gt(id: &str, class: u32, b: BBox) -> GroundTruth {
        GroundTruth {
            image_id: id.into(),
            class,
            bbox: b,
        }
    }

    fn unit_box(i: f64) -> BBox {
        BBox::new(i * 20.0, 0.0, i * 20.0 + 10.0, 10.0)
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let gts = vec![gt("a", 1, unit_box(0.0)), gt("a", 1, unit_box(1.0))];
        let dets = vec![
            det("a", 1, 0.3, unit_box(0.0)),
            det("a", 1, 0.9, unit_box(1.0)),
        ];
        let curve = voc_ap(&dets, &gts, 0.5);
        assert_eq!(curve.ap, 1.0);
    }

    #[test]
    fn no_detections_give_ap_zero() {
        let gts = vec![gt("a", 1, unit_box(0.0))];
        let curve = voc_ap(&[], &gts, 0.5);
        assert_eq!(curve.ap, 0.0);
        assert!(curve.points.is_empty());
    }

    #[test]
    fn fixture_two_gts_three_detections() {
        // TP(0.9), FP(0.8), TP(0.7):
        // points (0.5, 1), (0.5, 0.5), (1, 2/3); AP = 0.5 + 0.5 * 2/3.
        let gts = vec![gt("a", 1, unit_box(0.0)), gt("a", 1, unit_box(1.0))];
        let dets = vec![
            det("a", 1, 0.9, unit_box(0.0)),
            det("a", 1, 0.8, unit_box(5.0)),
            det("a", 1, 0.7, unit_box(1.0)),
        ];
        let curve = voc_ap(&dets, &gts, 0.5);
        let expected = [(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)];
        for (got, want) in curve.points.iter().zip(expected) {
            assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12);
        }
        assert!((curve.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn detection_claims_highest_iou_gt() {
        // One detection overlapping two gts; it must claim the larger-IoU
        // one, leaving the other unclaimed.
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(2.0, 0.0, 12.0, 10.0);
        let d = BBox::new(2.0, 0.0, 11.0, 10.0);
        assert!(d.iou(&g2) > d.iou(&g1));
        let gts = vec![gt("a", 1, g1), gt("a", 1, g2)];
        let dets = vec![det("a", 1, 0.9, d), det("a", 1, 0.8, d)];
        let curve = voc_ap(&dets, &gts, 0.3);
        // Second detection must not reuse the claimed gt (it falls back to
        // g1 which it also overlaps at >= 0.3).
        assert_eq!(curve.points[0].0, 0.5);
        assert!((curve.points[1].0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gts_used_at_most_once() {
        let gts = vec![gt("a", 1, unit_box(0.0))];
        let dets = vec![
            det("a", 1, 0.9, unit_box(0.0)),
            det("a", 1, 0.8, unit_box(0.0)),
        ];
        let curve = voc_ap(&dets, &gts, 0.5);
        assert_eq!(curve.points[1], (1.0, 0.5));
    }

    #[test]
    fn map_monotone_and_class_scoped() {
        let gts = vec![
            gt("a", 1, unit_box(0.0)),
            gt("a", 2, unit_box(1.0)),
            gt("b", 1, unit_box(0.0)),
        ];
        // Detection at IoU 0.65 against its gt: TP at 0.5/0.6, FP at 0.7.
        let shifted = BBox::new(0.0, 0.0, 10.0, 6.5);
        assert!(shifted.iou(&unit_box(0.0)) >= 0.6);
        assert!(shifted.iou(&unit_box(0.0)) < 0.7);
        let dets = vec![
            det("a", 1, 0.9, shifted),
            det("a", 2, 0.8, unit_box(1.0)),
            det("b", 1, 0.7, unit_box(0.0)),
        ];
        let evals = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
        assert_eq!(evals[0].map, evals[1].map);
        assert!(evals[1].map > evals[2].map);
        for w in evals.windows(2) {
            assert!(w[0].map >= w[1].map);
        }
        // Class 3 absent from gts: not part of the mean.
        assert_eq!(evals[0].per_class.len(), 2);
    }

    #[test]
    fn stats_columns_monotone_in_threshold() {
        let mut rng = crate::rng::RngState::new(3);
        let scenes: Vec<Scene> = (0..5)
            .map(|i| {
                crate::data::generate_synthetic_scene(
                    &mut rng,
                    &crate::data::SynthConfig::new(128, 3),
                    format!("s{i}"),
                )
            })
            .collect();
        let stats =
            match_statistics::<f32>(None, &scenes, &[0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        assert_eq!(stats.columns, vec!["predefined"]);
        for col in 0..stats.columns.len() {
            for w in stats.rows.windows(2) {
                assert!(w[0][col] >= w[1][col]);
            }
        }
    }

    #[test]
    fn metrics_report_format() {
        let gts = vec![gt("a", 1, unit_box(0.0))];
        let dets = vec![det("a", 1, 0.9, unit_box(0.0))];
        let evals = map_at_iou(&dets, &gts, &[0.5, 0.7]);
        let report = render_metrics(&evals, &["disk".to_string()]);
        assert!(report.contains("mAP@0.50 1.000000"));
        assert!(report.contains("AP@0.70/disk 1.000000"));
    }
}
