//! Anchor generation: one scale-specific set of three aspect-ratio boxes per
//! feature-map cell, at four pyramid levels.

use crate::boxes::BBox;
use crate::tensor::RowRef;

/// Aspect ratios attached to every anchor cell.
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
/// Anchor scale is four times the feature-map stride.
pub const SCALE_PER_STRIDE: f64 = 4.0;
/// Feature-map strides of the four prediction levels.
pub const LEVEL_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// All anchors of one pyramid level, in `(row, col, ratio)` order. Centers
/// sit at `((col + 0.5) * stride, (row + 0.5) * stride)`; every ratio
/// preserves the `scale²` area (`w = scale * sqrt(r)`, `h = scale / sqrt(r)`).
/// Anchors are not clipped to the image.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub level: usize,
    pub stride: usize,
    pub feature_h: usize,
    pub feature_w: usize,
    pub boxes: Vec<BBox>,
}

pub fn generate_anchors(level: usize, feature_h: usize, feature_w: usize, stride: usize) -> AnchorGrid {
    let scale = SCALE_PER_STRIDE * stride as f64;
    let mut boxes = Vec::with_capacity(feature_h * feature_w * ASPECT_RATIOS.len());
    for row in 0..feature_h {
        for col in 0..feature_w {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for ratio in ASPECT_RATIOS {
                let w = scale * ratio.sqrt();
                let h = scale / ratio.sqrt();
                boxes.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    AnchorGrid {
        level,
        stride,
        feature_h,
        feature_w,
        boxes,
    }
}

/// The four per-level grids flattened into one array, with the index
/// arithmetic to map a flat anchor index back to its head-output cell.
/// Flat order: level ascending, then `(row, col, ratio)` within a level —
/// the same order the heads emit.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub grids: Vec<AnchorGrid>,
    pub boxes: Vec<BBox>,
    offsets: Vec<usize>,
}

impl AnchorSet {
    /// Builds the anchor set for the given per-level feature sizes.
    pub fn for_feature_sizes(sizes: &[(usize, usize)]) -> AnchorSet {
        let mut grids = Vec::new();
        let mut boxes = Vec::new();
        let mut offsets = Vec::new();
        for (level, (h, w)) in sizes.iter().enumerate() {
            let grid = generate_anchors(level + 1, *h, *w, LEVEL_STRIDES[level]);
            offsets.push(boxes.len());
            boxes.extend_from_slice(&grid.boxes);
            grids.push(grid);
        }
        AnchorSet {
            grids,
            boxes,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Maps a flat anchor index to `(level index, head-output cell)`.
    pub fn locate(&self, flat: usize, image: usize) -> (usize, RowRef) {
        let level = match self.offsets.binary_search(&flat) {
            Ok(l) => l,
            Err(ins) => ins - 1,
        };
        let grid = &self.grids[level];
        let within = flat - self.offsets[level];
        let ratio = within % ASPECT_RATIOS.len();
        let cell = within / ASPECT_RATIOS.len();
        (
            level,
            RowRef {
                image,
                ratio,
                row: cell / grid.feature_w,
                col: cell % grid.feature_w,
            },
        )
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.offsets[level];
        let end = if level + 1 < self.offsets.len() {
            self.offsets[level + 1]
        } else {
            self.boxes.len()
        };
        start..end
    }
}
