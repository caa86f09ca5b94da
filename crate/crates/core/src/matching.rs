//! Anchor-to-object matching and hard-negative sampling.
//!
//! Matching is the two-step rule used by SSD-style detectors: a bipartite
//! phase first guarantees every object its best anchor regardless of
//! overlap, then a threshold phase turns every remaining anchor whose best
//! overlap clears the stage's IoU threshold into a positive. Negatives are
//! subsampled at 1:3 against positives, hardest (highest background loss)
//! first.

use crate::boxes::{encode_box, iou_matrix, BBox, EncodedOffsets};
use crate::error::{Error, Result};

/// Ratio of kept negatives to positives.
pub const NEGATIVES_PER_POSITIVE: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AnchorStatus {
    Positive,
    Negative,
    /// Negative dropped by hard-negative sampling.
    Discarded,
}

/// Per-anchor outcome of matching one scene at one quality stage.
#[derive(Clone, Debug)]
pub struct MatchAssignment {
    pub status: Vec<AnchorStatus>,
    /// Index of the claimed ground truth, for positives.
    pub matched_gt: Vec<Option<usize>>,
    /// Class label per anchor; 0 is background.
    pub labels: Vec<u32>,
    /// Regression target (gt encoded against the anchor), for positives.
    pub targets: Vec<Option<EncodedOffsets>>,
    /// Marks step-1 positives, which are exempt from the IoU threshold.
    pub forced: Vec<bool>,
}

impl MatchAssignment {
    fn all_negative(n: usize) -> Self {
        MatchAssignment {
            status: vec![AnchorStatus::Negative; n],
            matched_gt: vec![None; n],
            labels: vec![0; n],
            targets: vec![None; n],
            forced: vec![false; n],
        }
    }

    pub fn positive_count(&self) -> usize {
        self.status
            .iter()
            .filter(|s| **s == AnchorStatus::Positive)
            .count()
    }

    /// Positives that actually clear the threshold (forced best matches may
    /// sit below it).
    pub fn threshold_qualified_count(&self) -> usize {
        self.status
            .iter()
            .zip(&self.forced)
            .filter(|(s, f)| **s == AnchorStatus::Positive && !**f)
            .count()
    }
}

/// Matches anchors against ground truths at one IoU threshold.
///
/// Step 1 (bipartite): repeatedly claim the globally best unclaimed
/// (gt, anchor) pair by IoU, ties broken by lowest anchor index then lowest
/// gt index. These positives are kept even below the threshold, so every
/// object with positive area gets at least one anchor. Step 2: every
/// remaining anchor whose best IoU over ground truths reaches the threshold
/// becomes positive for its argmax gt (ties to the lowest gt index).
///
/// Zero-area anchors (possible once refined boxes are clipped to the image
/// border) never become positive.
///
/// `labels` are foreground classes and must be >= 1.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[BBox],
    labels: &[u32],
    iou_threshold: f64,
) -> Result<MatchAssignment> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "iou_threshold {iou_threshold} outside (0, 1)"
        )));
    }
    if gts.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} ground truths but {} labels",
            gts.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|l| *l == 0) {
        return Err(Error::invalid("class labels must be >= 1 (0 is background)"));
    }

    let mut out = MatchAssignment::all_negative(anchors.len());
    if gts.is_empty() {
        return Ok(out);
    }

    let iou = iou_matrix(anchors, gts);
    let eligible: Vec<bool> = anchors.iter().map(|a| a.area() > 0.0).collect();

    // Step 1: bipartite best matches.
    let mut gt_claimed = vec![false; gts.len()];
    let mut anchor_claimed = vec![false; anchors.len()];
    for _ in 0..gts.len() {
        let mut best: Option<(f64, usize, usize)> = None; // (iou, anchor, gt)
        for (a, row) in iou.iter().enumerate() {
            if anchor_claimed[a] || !eligible[a] {
                continue;
            }
            for (g, v) in row.iter().enumerate() {
                if gt_claimed[g] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bv, ba, bg)) => {
                        *v > bv || (*v == bv && (a < ba || (a == ba && g < bg)))
                    }
                };
                if better {
                    best = Some((*v, a, g));
                }
            }
        }
        let Some((_, a, g)) = best else { break };
        gt_claimed[g] = true;
        anchor_claimed[a] = true;
        out.status[a] = AnchorStatus::Positive;
        out.matched_gt[a] = Some(g);
        out.labels[a] = labels[g];
        out.targets[a] = Some(encode_box(&gts[g], &anchors[a])?);
        out.forced[a] = true;
    }

    // Step 2: threshold matches for the rest.
    for (a, row) in iou.iter().enumerate() {
        if anchor_claimed[a] || !eligible[a] {
            continue;
        }
        let mut best_g = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (g, v) in row.iter().enumerate() {
            if *v > best_v {
                best_v = *v;
                best_g = g;
            }
        }
        if best_v >= iou_threshold {
            out.status[a] = AnchorStatus::Positive;
            out.matched_gt[a] = Some(best_g);
            out.labels[a] = labels[best_g];
            out.targets[a] = Some(encode_box(&gts[best_g], &anchors[a])?);
        }
    }

    Ok(out)
}

/// Keeps the hardest negatives at a 3:1 negative:positive ratio; the rest
/// become [`AnchorStatus::Discarded`]. With zero positives a single hardest
/// negative is kept so the classification loss never goes empty.
/// `per_anchor_cls_loss` is the background cross-entropy of each anchor
/// under the current classifier; ties break to the lowest anchor index.
pub fn sample_hard_negatives(
    assignment: &MatchAssignment,
    per_anchor_cls_loss: &[f64],
) -> MatchAssignment {
    assert_eq!(per_anchor_cls_loss.len(), assignment.status.len());
    let mut out = assignment.clone();
    let positives = assignment.positive_count();
    let budget = if positives == 0 {
        1
    } else {
        NEGATIVES_PER_POSITIVE * positives
    };

    let mut negatives: Vec<usize> = assignment
        .status
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == AnchorStatus::Negative)
        .map(|(i, _)| i)
        .collect();
    negatives.sort_by(|a, b| {
        per_anchor_cls_loss[*b]
            .partial_cmp(&per_anchor_cls_loss[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    for idx in negatives.iter().skip(budget) {
        out.status[*idx] = AnchorStatus::Discarded;
    }
    out
}
