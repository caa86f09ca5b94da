//! Cascaded anchor refinement: per-stage matching and losses, the training
//! step, and multi-quality inference with NMS.
//!
//! Stage q consumes the anchors produced by stage q-1 (stage 1 consumes the
//! predefined grid), matches them against ground truth at its own IoU
//! threshold, and its regressor's decoded outputs become stage q+1's
//! anchors. Refined anchor coordinates are constants between stages:
//! matching and target encoding are selections, and no gradient flows
//! through box coordinates across stages.
//!
//! The step is split into two phases. `plan_cascade` reads head values and
//! performs every non-differentiable selection (refinement, matching,
//! hard-negative sampling); `build_loss` then extends the graph with the
//! purely differentiable loss of that frozen plan. Gradient checks rely on
//! this split: perturbing a weight re-runs only the differentiable phase.

use crate::anchors::AnchorSet;
use crate::boxes::{decode_box, BBox, EncodedOffsets};
use crate::error::{Error, Result};
use crate::matching::{match_anchors, sample_hard_negatives, AnchorStatus, MatchAssignment};
use crate::network::{head_rows, Bpn, ForwardPass, LEVELS};
use crate::scalar::Scalar;
use crate::tensor::{sgd_step, Graph, NodeId, SgdConfig, Tensor};

/// One cascade stage: its 1-based index, training IoU threshold, and the
/// regression loss weight.
#[derive(Clone, Copy, Debug)]
pub struct QualityLevel {
    pub q: usize,
    pub iou_threshold: f64,
    pub lambda: f64,
}

/// The default quality thresholds: low 0.5, mid 0.6, high 0.7.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

#[derive(Clone, Debug)]
pub struct CascadeConfig {
    pub qualities: Vec<QualityLevel>,
}

impl CascadeConfig {
    /// The standard cascade truncated to `stages` levels.
    pub fn standard(stages: usize) -> Self {
        CascadeConfig::with_thresholds(&DEFAULT_THRESHOLDS[..stages])
    }

    pub fn with_thresholds(thresholds: &[f64]) -> Self {
        CascadeConfig {
            qualities: thresholds
                .iter()
                .enumerate()
                .map(|(i, t)| QualityLevel {
                    q: i + 1,
                    iou_threshold: *t,
                    lambda: 1.0,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qualities.is_empty() || self.qualities.len() > 3 {
            return Err(Error::invalid("cascade needs 1..=3 quality levels"));
        }
        for q in &self.qualities {
            if !(0.0 < q.iou_threshold && q.iou_threshold < 1.0) {
                return Err(Error::invalid(format!(
                    "quality {} threshold {} outside (0, 1)",
                    q.q, q.iou_threshold
                )));
            }
        }
        for w in self.qualities.windows(2) {
            if w[1].iou_threshold <= w[0].iou_threshold {
                return Err(Error::invalid(
                    "quality thresholds must be strictly increasing",
                ));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.qualities.len()
    }
}

/// Decodes one regression output per anchor into the refined anchor set.
/// `reg_rows` holds 4 values per anchor in flat anchor order.
pub fn car_refine(
    prev_anchors: &[BBox],
    reg_rows: &[f64],
    image_w: f64,
    image_h: f64,
) -> Result<Vec<BBox>> {
    if reg_rows.len() != prev_anchors.len() * 4 {
        return Err(Error::ShapeMismatch {
            op: "car_refine",
            lhs: format!("{} anchors", prev_anchors.len()),
            rhs: format!("{} regression values", reg_rows.len()),
        });
    }
    Ok(prev_anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let t = EncodedOffsets::from_array([
                reg_rows[4 * i],
                reg_rows[4 * i + 1],
                reg_rows[4 * i + 2],
                reg_rows[4 * i + 3],
            ]);
            decode_box(&t, a, image_w, image_h)
        })
        .collect())
}

/// Frozen selections for one image at one stage.
#[derive(Clone, Debug)]
pub struct ImagePlan {
    pub input_anchors: Vec<BBox>,
    pub assignment: MatchAssignment,
}

/// Frozen selections for one stage across the batch.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub quality: QualityLevel,
    pub per_image: Vec<ImagePlan>,
    pub n_pos: usize,
    pub matched_qualified: usize,
}

#[derive(Clone, Debug)]
pub struct CascadePlan {
    pub stages: Vec<StagePlan>,
}

/// Per-anchor values of one stage's classification heads for one image, in
/// flat anchor order across levels.
pub fn stage_cls_rows<F: Scalar>(
    g: &Graph<F>,
    fwd: &ForwardPass,
    stage: usize,
    image: usize,
    classes: usize,
) -> Vec<f64> {
    let mut rows = Vec::new();
    for l in 0..LEVELS {
        rows.extend(head_rows(g.value(fwd.heads[stage][l].cls), image, classes));
    }
    rows
}

/// Per-anchor regression outputs of one stage for one image.
pub fn stage_reg_rows<F: Scalar>(
    g: &Graph<F>,
    fwd: &ForwardPass,
    stage: usize,
    image: usize,
) -> Vec<f64> {
    let mut rows = Vec::new();
    for l in 0..LEVELS {
        rows.extend(head_rows(g.value(fwd.heads[stage][l].reg), image, 4));
    }
    rows
}

/// Background cross-entropy of every anchor row: the mining criterion.
pub fn background_ce(cls_rows: &[f64], classes: usize) -> Vec<f64> {
    cls_rows
        .chunks(classes)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            z.ln() + max - row[0]
        })
        .collect()
}

/// Runs every non-differentiable selection of the training step: chains
/// anchor refinement through the stages, matches each stage's input anchors
/// at that stage's threshold, and subsamples negatives by mining loss.
pub fn plan_cascade<F: Scalar>(
    g: &Graph<F>,
    net: &Bpn<F>,
    fwd: &ForwardPass,
    anchors0: &AnchorSet,
    annotations: &[Vec<(BBox, u32)>],
    cascade: &CascadeConfig,
    image_w: f64,
    image_h: f64,
) -> Result<CascadePlan> {
    cascade.validate()?;
    if cascade.stages() != net.cfg.stages {
        return Err(Error::invalid(format!(
            "cascade has {} stages but the network was built with {}",
            cascade.stages(),
            net.cfg.stages
        )));
    }
    let classes = net.cfg.classes_with_background();
    let batch = annotations.len();
    let mut inputs: Vec<Vec<BBox>> = vec![anchors0.boxes.clone(); batch];
    let mut stages = Vec::new();

    for (qi, quality) in cascade.qualities.iter().enumerate() {
        let mut per_image = Vec::with_capacity(batch);
        let mut n_pos = 0;
        let mut qualified = 0;
        for (b, objects) in annotations.iter().enumerate() {
            let gts: Vec<BBox> = objects.iter().map(|(bx, _)| *bx).collect();
            let labels: Vec<u32> = objects.iter().map(|(_, l)| *l).collect();
            let matched = match_anchors(&inputs[b], &gts, &labels, quality.iou_threshold)?;
            let mining = background_ce(&stage_cls_rows(g, fwd, qi, b, classes), classes);
            let assignment = sample_hard_negatives(&matched, &mining);
            n_pos += assignment.positive_count();
            qualified += assignment.threshold_qualified_count();
            per_image.push(ImagePlan {
                input_anchors: std::mem::take(&mut inputs[b]),
                assignment,
            });
        }
        if qi + 1 < cascade.stages() {
            for (b, plan) in per_image.iter().enumerate() {
                let reg = stage_reg_rows(g, fwd, qi, b);
                inputs[b] = car_refine(&plan.input_anchors, &reg, image_w, image_h)?;
            }
        }
        stages.push(StagePlan {
            quality: *quality,
            per_image,
            n_pos,
            matched_qualified: qualified,
        });
    }
    Ok(CascadePlan { stages })
}

/// Handles to one stage's loss nodes.
pub struct StageLossNodes {
    pub ce: NodeId,
    pub l1: NodeId,
    pub scaled: NodeId,
    pub n_pos: usize,
}

pub struct LossNodes {
    pub total: NodeId,
    pub stages: Vec<StageLossNodes>,
}

/// Combines gathered per-row logits and regression outputs into one stage's
/// loss: `(cls + lambda * reg) / max(n_pos, 1)`.
fn combine_stage_loss<F: Scalar>(
    g: &mut Graph<F>,
    cls: NodeId,
    labels: &[usize],
    reg: Option<(NodeId, Vec<F>)>,
    lambda: f64,
    n_pos: usize,
) -> Result<StageLossNodes> {
    let mask = vec![true; labels.len()];
    let ce = g.softmax_cross_entropy(cls, labels, &mask)?;
    let l1 = match reg {
        Some((pred, targets)) => {
            let rows = g.shape(pred).n;
            g.smooth_l1(pred, &targets, &vec![true; rows])?
        }
        None => g.input(Tensor::scalar(F::zero())),
    };
    let weighted = g.mul_const(l1, F::from_f64(lambda));
    let sum = g.add(ce, weighted)?;
    let scaled = g.mul_const(sum, F::from_f64(1.0 / n_pos.max(1) as f64));
    Ok(StageLossNodes {
        ce,
        l1,
        scaled,
        n_pos,
    })
}

/// Extends the graph with the differentiable loss of a frozen plan.
/// Row order everywhere is (level, image, flat-anchor) ascending.
pub fn build_loss<F: Scalar>(
    g: &mut Graph<F>,
    net: &Bpn<F>,
    fwd: &ForwardPass,
    anchors0: &AnchorSet,
    plan: &CascadePlan,
) -> Result<LossNodes> {
    let classes = net.cfg.classes_with_background();
    let mut stage_nodes = Vec::new();

    for (qi, splan) in plan.stages.iter().enumerate() {
        let mut cls_parts = Vec::new();
        let mut labels = Vec::new();
        let mut reg_parts = Vec::new();
        let mut targets: Vec<F> = Vec::new();

        for l in 0..LEVELS {
            let mut cls_rows = Vec::new();
            let mut reg_rows = Vec::new();
            for (b, iplan) in splan.per_image.iter().enumerate() {
                let a = &iplan.assignment;
                for flat in anchors0.level_range(l) {
                    let (_, row) = anchors0.locate(flat, b);
                    match a.status[flat] {
                        AnchorStatus::Positive => {
                            cls_rows.push(row);
                            labels.push(a.labels[flat] as usize);
                            reg_rows.push(row);
                            for t in a.targets[flat]
                                .expect("positive anchor carries a target")
                                .to_array()
                            {
                                targets.push(F::from_f64(t));
                            }
                        }
                        AnchorStatus::Negative => {
                            cls_rows.push(row);
                            labels.push(0);
                        }
                        AnchorStatus::Discarded => {}
                    }
                }
            }
            if !cls_rows.is_empty() {
                cls_parts.push(g.gather_rows(fwd.heads[qi][l].cls, cls_rows, classes)?);
            }
            if !reg_rows.is_empty() {
                reg_parts.push(g.gather_rows(fwd.heads[qi][l].reg, reg_rows, 4)?);
            }
        }

        if cls_parts.is_empty() {
            return Err(Error::invalid(
                "stage loss has no sampled anchors; at least one negative is always kept",
            ));
        }
        let cls = g.concat_rows(&cls_parts)?;
        let reg = if reg_parts.is_empty() {
            None
        } else {
            Some((g.concat_rows(&reg_parts)?, targets))
        };
        let nodes = combine_stage_loss(
            g,
            cls,
            &labels,
            reg,
            splan.quality.lambda,
            splan.n_pos,
        )?;
        stage_nodes.push(nodes);
    }

    let mut total = stage_nodes[0].scaled;
    for s in &stage_nodes[1..] {
        total = g.add(total, s.scaled)?;
    }
    Ok(LossNodes {
        total,
        stages: stage_nodes,
    })
}

/// Loss components of one stage, already normalized by `max(n_pos, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct StageOutcome {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub stage_loss: f64,
    pub n_pos: usize,
    /// Positives that cleared the stage threshold (forced matches excluded).
    pub matched_qualified: usize,
}

/// One training step's losses and matching statistics.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub stages: Vec<StageOutcome>,
}

impl LossReport {
    /// The training log line: `iter total L1 L2 L3 N1 N2 N3`.
    pub fn log_line(&self, iter: usize) -> String {
        let mut line = format!("{} {:.6}", iter, self.total);
        for s in &self.stages {
            line.push_str(&format!(" {:.6}", s.stage_loss));
        }
        for s in &self.stages {
            line.push_str(&format!(" {}", s.n_pos));
        }
        line
    }
}

fn make_report<F: Scalar>(g: &Graph<F>, loss: &LossNodes, plan: &CascadePlan) -> LossReport {
    let stages = loss
        .stages
        .iter()
        .zip(&plan.stages)
        .map(|(nodes, splan)| {
            let norm = nodes.n_pos.max(1) as f64;
            StageOutcome {
                cls_loss: g.value(nodes.ce).item().as_f64() / norm,
                reg_loss: g.value(nodes.l1).item().as_f64() / norm,
                stage_loss: g.value(nodes.scaled).item().as_f64(),
                n_pos: nodes.n_pos,
                matched_qualified: splan.matched_qualified,
            }
        })
        .collect();
    LossReport {
        total: g.value(loss.total).item().as_f64(),
        stages,
    }
}

/// One end-to-end training step: forward, plan, loss, backward, SGD update.
/// Fails with the first offending tensor's name if the loss goes non-finite.
pub fn train_step<F: Scalar>(
    net: &mut Bpn<F>,
    images: &Tensor<F>,
    annotations: &[Vec<(BBox, u32)>],
    cascade: &CascadeConfig,
    sgd: &SgdConfig,
) -> Result<LossReport> {
    if images.shape.n != annotations.len() {
        return Err(Error::ShapeMismatch {
            op: "train_step",
            lhs: images.shape.to_string(),
            rhs: format!("{} annotation lists", annotations.len()),
        });
    }
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, images.clone())?;
    let anchors0 = AnchorSet::for_feature_sizes(&fwd.feature_sizes);
    let plan = plan_cascade(
        &g,
        net,
        &fwd,
        &anchors0,
        annotations,
        cascade,
        images.shape.w as f64,
        images.shape.h as f64,
    )?;
    let loss = build_loss(&mut g, net, &fwd, &anchors0, &plan)?;
    let total = g.value(loss.total).item().as_f64();
    if !total.is_finite() {
        return Err(Error::NonFinite(
            g.first_non_finite().unwrap_or_else(|| "total loss".to_string()),
        ));
    }
    let report = make_report(&g, &loss, &plan);
    g.backward(loss.total, &mut net.store)?;
    sgd_step(&mut net.store, sgd);
    Ok(report)
}

// ---- inference ----

/// A scored box, the unit of evaluation. `quality` names the cascade stage
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: u32,
    pub score: f64,
    pub bbox: BBox,
    pub quality: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct InferConfig {
    /// Candidates below this score are dropped before NMS.
    pub score_floor: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_floor: 0.01,
            nms_iou: 0.45,
            top_k: 200,
        }
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (score ties break to the lowest index); a candidate is dropped
/// when its IoU with any kept box exceeds the threshold; at most `top_k`
/// survive.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() >= top_k {
            break;
        }
        for &j in &order {
            if !suppressed[j] && j != i && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Full-image inference: every stage decodes boxes from its input anchors
/// with its own regression output and scores them with its own classifier;
/// detections from all stages are pooled through one per-class NMS pass.
pub fn infer<F: Scalar>(
    net: &Bpn<F>,
    image: &Tensor<F>,
    image_id: &str,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, image.clone())?;
    let anchors0 = AnchorSet::for_feature_sizes(&fwd.feature_sizes);
    let classes = net.cfg.classes_with_background();
    let (w, h) = (image.shape.w as f64, image.shape.h as f64);

    let mut anchors = anchors0.boxes.clone();
    let mut candidates: Vec<Detection> = Vec::new();
    for qi in 0..net.cfg.stages {
        let reg = stage_reg_rows(&g, &fwd, qi, 0);
        let refined = car_refine(&anchors, &reg, w, h)?;
        let cls = stage_cls_rows(&g, &fwd, qi, 0, classes);
        for (i, bbox) in refined.iter().enumerate() {
            let row = &cls[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, logit) in row.iter().enumerate().skip(1) {
                let score = (logit - max).exp() / z;
                if score >= cfg.score_floor {
                    candidates.push(Detection {
                        image_id: image_id.to_string(),
                        class: c as u32,
                        score,
                        bbox: *bbox,
                        quality: qi + 1,
                    });
                }
            }
        }
        anchors = refined;
    }

    let mut out = Vec::new();
    for class in 1..classes as u32 {
        let idx: Vec<usize> = (0..candidates.len())
            .filter(|i| candidates[*i].class == class)
            .collect();
        let boxes: Vec<BBox> = idx.iter().map(|i| candidates[*i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|i| candidates[*i].score).collect();
        for k in nms(&boxes, &scores, cfg.nms_iou, cfg.top_k) {
            out.push(candidates[idx[k]].clone());
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.class.cmp(&b.class))
    });
    Ok(out)
}

// ---- detection records ----

/// Formats a detection as the line-delimited record
/// `image_id class score xmin ymin xmax ymax quality` (floats with 6
/// decimals).
pub fn format_detection_record(d: &Detection) -> String {
    format!(
        "{} {} {:.6} {:.6} {:.6} {:.6} {:.6} {}",
        d.image_id, d.class, d.score, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax, d.quality
    )
}

pub fn parse_detection_record(line: &str, lineno: usize) -> Result<Detection> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(Error::Parse {
            file: "detections".into(),
            line: lineno,
            msg: format!("expected 8 fields, got {}", fields.len()),
        });
    }
    let parse_f = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse {
            file: "detections".into(),
            line: lineno,
            msg: format!("bad {what}: {s}"),
        })
    };
    Ok(Detection {
        image_id: fields[0].to_string(),
        class: fields[1].parse().map_err(|_| Error::Parse {
            file: "detections".into(),
            line: lineno,
            msg: format!("bad class: {}", fields[1]),
        })?,
        score: parse_f(fields[2], "score")?,
        bbox: BBox::new(
            parse_f(fields[3], "xmin")?,
            parse_f(fields[4], "ymin")?,
            parse_f(fields[5], "xmax")?,
            parse_f(fields[6], "ymax")?,
        ),
        quality: fields[7].parse().map_err(|_| Error::Parse {
            file: "detections".into(),
            line: lineno,
            msg: format!("bad quality: {}", fields[7]),
        })?,
    })
}
