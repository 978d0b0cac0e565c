//! VOC-style evaluation: branch-averaged detections, per-class average precision with greedy
//! one-to-one matching at IoU > 0.5, mean AP and CorLoc.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{OpisError, Result};
use crate::geometry::{iou_unchecked, nms, BBox, ScoredBox};
use crate::harness::model::{forward, ToyModel};
use crate::harness::pipeline::branch_mean_scores;
use crate::harness::scene::Scene;

pub const DEFAULT_NMS_IOU: f64 = 0.3;
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-3;
pub const MATCH_IOU: f64 = 0.5;

/// A detection tagged with the scene it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneDetection {
    pub scene_id: u64,
    #[serde(flatten)]
    pub det: ScoredBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub bbox: BBox,
    pub class: usize,
}

pub fn ground_truths(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| s.gt.iter().map(|g| GroundTruth { scene_id: s.id, bbox: g.bbox, class: g.class }))
        .collect()
}

/// Class-wise NMS over branch-averaged refinement scores.
pub fn detect(model: &ToyModel, scene: &Scene, nms_iou: f64, score_floor: f64) -> Result<Vec<ScoredBox>> {
    let scores = forward(model, scene)?;
    let mean = branch_mean_scores(&scores);
    let mut out = Vec::new();
    for (class, row) in mean.rows().into_iter().enumerate() {
        let cands: Vec<ScoredBox> = row
            .iter()
            .zip(&scene.proposals)
            .filter(|(&s, _)| s >= score_floor)
            .map(|(&score, &bbox)| ScoredBox { bbox, score, class_id: class })
            .collect();
        out.extend(nms(&cands, nms_iou));
    }
    Ok(out)
}

pub fn detect_all(model: &ToyModel, scenes: &[Scene], nms_iou: f64, score_floor: f64) -> Result<Vec<SceneDetection>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(
            detect(model, s, nms_iou, score_floor)?
                .into_iter()
                .map(|det| SceneDetection { scene_id: s.id, det }),
        );
    }
    Ok(out)
}

/// All-points interpolated average precision for one class.
pub fn voc_ap(dets: &[SceneDetection], gts: &[GroundTruth], class: usize, iou_thresh: f64) -> Result<f64> {
    let mut gt_by_scene: BTreeMap<u64, Vec<(BBox, bool)>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for g in gts.iter().filter(|g| g.class == class) {
        gt_by_scene.entry(g.scene_id).or_default().push((g.bbox, false));
        n_gt += 1;
    }
    if n_gt == 0 {
        return Err(OpisError::UndefinedAp(class));
    }

    let mut ranked: Vec<&SceneDetection> = dets.iter().filter(|d| d.det.class_id == class).collect();
    // stable: equal scores keep input order
    ranked.sort_by(|a, b| b.det.score.total_cmp(&a.det.score));

    let mut tp = Vec::with_capacity(ranked.len());
    for d in ranked {
        let hit = gt_by_scene.get_mut(&d.scene_id).and_then(|cands| {
            let (best, overlap) = cands
                .iter()
                .enumerate()
                .map(|(i, (b, _))| (i, iou_unchecked(&d.det.bbox, b)))
                .fold((None, 0.0), |acc, (i, v)| if v > acc.1 { (Some(i), v) } else { acc });
            let best = best?;
            if overlap > iou_thresh && !cands[best].1 {
                cands[best].1 = true;
                Some(())
            } else {
                None
            }
        });
        tp.push(hit.is_some());
    }

    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &is_tp in &tp {
        if is_tp {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Ok((1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum())
}

/// Per-class AP for every class with ground truth, keyed by class.
pub fn per_class_ap(
    dets: &[SceneDetection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for c in 0..num_classes {
        match voc_ap(dets, gts, c, iou_thresh) {
            Ok(ap) => {
                out.insert(c, ap);
            }
            Err(OpisError::UndefinedAp(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Mean AP over classes present in `gts`.
pub fn mean_ap(dets: &[SceneDetection], gts: &[GroundTruth], num_classes: usize) -> Result<f64> {
    let aps = per_class_ap(dets, gts, num_classes, MATCH_IOU)?;
    if aps.is_empty() {
        return Err(OpisError::InvalidInput("no ground truth for any class".into()));
    }
    Ok(aps.values().sum::<f64>() / aps.len() as f64)
}

/// Fraction of (scene, present class) pairs whose top box overlaps a ground truth of the class
/// by more than `iou_thresh`. `top` holds the top box per pair (`None` counts as a miss).
pub fn corloc_from_top_boxes(pairs: &[(Option<BBox>, Vec<BBox>)], iou_thresh: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(OpisError::InvalidInput("no (scene, class) pairs".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(top, gts)| top.is_some_and(|t| gts.iter().any(|g| iou_unchecked(&t, g) > iou_thresh)))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// CorLoc of a model over scenes, using the top branch-averaged proposal per present class.
pub fn corloc(model: &ToyModel, scenes: &[Scene], iou_thresh: f64) -> Result<f64> {
    let mut pairs = Vec::new();
    for s in scenes {
        let mean = branch_mean_scores(&forward(model, s)?);
        for c in s.label.present() {
            let row = mean.row(c);
            let mut best = 0;
            for (r, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = r;
                }
            }
            let gts = s.gt.iter().filter(|g| g.class == c).map(|g| g.bbox).collect();
            pairs.push((Some(s.proposals[best]), gts));
        }
    }
    corloc_from_top_boxes(&pairs, iou_thresh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CorLoc")]
    pub corloc: f64,
    pub num_scenes: usize,
    pub num_detections: usize,
}

/// Detection plus metrics over a scene set, with the detections that produced them.
pub fn evaluate(
    model: &ToyModel,
    scenes: &[Scene],
    nms_iou: f64,
    score_floor: f64,
) -> Result<(MetricsReport, Vec<SceneDetection>)> {
    let dets = detect_all(model, scenes, nms_iou, score_floor)?;
    let gts = ground_truths(scenes);
    let per_class_ap = per_class_ap(&dets, &gts, model.num_classes(), MATCH_IOU)?;
    if per_class_ap.is_empty() {
        return Err(OpisError::InvalidInput("no ground truth in evaluation scenes".into()));
    }
    let map = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    let corloc = corloc(model, scenes, MATCH_IOU)?;
    let report = MetricsReport {
        per_class_ap,
        map,
        corloc,
        num_scenes: scenes.len(),
        num_detections: dets.len(),
    };
    Ok((report, dets))
}

/// One JSON object per line: scene_id, class_id, score, x1, y1, x2, y2.
pub fn write_detections<W: Write>(dets: &[SceneDetection], mut w: W) -> io::Result<()> {
    for d in dets {
        let rec = serde_json::json!({
            "scene_id": d.scene_id,
            "class_id": d.det.class_id,
            "score": d.det.score,
            "x1": d.det.bbox.x1,
            "y1": d.det.bbox.y1,
            "x2": d.det.bbox.x2,
            "y2": d.det.bbox.y2,
        });
        writeln!(w, "{rec}")?;
    }
    Ok(())
}
