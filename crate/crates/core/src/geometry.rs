//! Axis-aligned boxes, IoU and per-class greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned rectangle in continuous scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and non-positive extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite()) {
            return invalid(format!("non-finite box coordinates {self:?}"));
        }
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return invalid(format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// A box with a detection score for one foreground class (0-based id).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Intersection over union. Errors on degenerate or non-finite boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU for boxes already known to be valid.
///
/// The union is formed symmetrically so that `iou_unchecked(a, b) == iou_unchecked(b, a)` bitwise.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = (a.area() + b.area()) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy per-class NMS.
///
/// Candidates are visited by descending score (ties: lower input index first); a candidate is
/// dropped when its IoU with an already kept box of the same class exceeds `iou_threshold`.
/// The result is ordered by descending score with the same tie rule.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let cand = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let other = &dets[k];
            other.class_id == cand.class_id && iou_unchecked(&other.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}
