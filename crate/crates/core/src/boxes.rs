//! Axis-aligned box algebra: IoU, the SSD-style offset encoding with
//! center/size variances, and its clipped inverse.

use crate::error::{Error, Result};

/// Encoding variance for box centers.
pub const CENTER_VARIANCE: f64 = 0.1;
/// Encoding variance for box sizes.
pub const SIZE_VARIANCE: f64 = 0.2;
/// Cap on the exp argument in [`decode_box`], guarding against overflow from
/// an untrained regressor.
pub const DECODE_EXP_CAP: f64 = 10.0;

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.xmin + self.xmax) / 2.0,
            (self.ymin + self.ymax) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.xmax >= self.xmin && self.ymax >= self.ymin
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let h = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        w * h
    }

    /// Jaccard overlap in `[0, 1]`. Boxes with an empty union (two zero-area
    /// boxes) give 0 by convention.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Clamps both corners into `[0, w] x [0, h]`. The result may be
    /// degenerate (zero area) when the box lies entirely outside.
    pub fn clip(&self, image_w: f64, image_h: f64) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, image_w),
            ymin: self.ymin.clamp(0.0, image_h),
            xmax: self.xmax.clamp(0.0, image_w),
            ymax: self.ymax.clamp(0.0, image_h),
        }
    }
}

/// IoU of every anchor against every ground truth: `m[i][j]` is
/// `iou(anchors[i], gts[j])`.
pub fn iou_matrix(anchors: &[BBox], gts: &[BBox]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(g)).collect())
        .collect()
}

/// Offsets of a target box relative to an anchor, in the variance-scaled
/// `(tx, ty, tw, th)` parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodedOffsets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl EncodedOffsets {
    pub const ZERO: EncodedOffsets = EncodedOffsets {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(t: [f64; 4]) -> Self {
        EncodedOffsets {
            tx: t[0],
            ty: t[1],
            tw: t[2],
            th: t[3],
        }
    }
}

/// Encodes `gt` relative to `anchor`:
/// `tx = (gcx - acx) / (aw * 0.1)`, `tw = ln(gw / aw) / 0.2`, y/h alike.
/// Fails on zero-area anchors.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<EncodedOffsets> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::ZeroAreaAnchor(format!("{anchor:?}")));
    }
    let (gcx, gcy) = gt.center();
    Ok(EncodedOffsets {
        tx: (gcx - acx) / (aw * CENTER_VARIANCE),
        ty: (gcy - acy) / (ah * CENTER_VARIANCE),
        tw: (gt.width() / aw).ln() / SIZE_VARIANCE,
        th: (gt.height() / ah).ln() / SIZE_VARIANCE,
    })
}

/// Exact inverse of [`encode_box`], then clipped to the image. The exp
/// argument is capped at ±10 so wild regressor outputs stay finite.
pub fn decode_box(t: &EncodedOffsets, anchor: &BBox, image_w: f64, image_h: f64) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = t.tx * CENTER_VARIANCE * aw + acx;
    let cy = t.ty * CENTER_VARIANCE * ah + acy;
    let w = aw * (t.tw * SIZE_VARIANCE).clamp(-DECODE_EXP_CAP, DECODE_EXP_CAP).exp();
    let h = ah * (t.th * SIZE_VARIANCE).clamp(-DECODE_EXP_CAP, DECODE_EXP_CAP).exp();
    BBox::from_center(cx, cy, w, h).clip(image_w, image_h)
}
