//! Synthetic weakly labeled scenes.
//!
//! A scene holds 1 to `max_objects` ground-truth objects. Proposals are jittered copies of the
//! objects (so their overlaps spread over `[0, 1]`), sub-boxes (parts) of the objects, and
//! uniform clutter. A proposal's feature is its class prototype scaled by its best overlap with
//! a ground truth, plus a part direction scaled by how much of the proposal lies inside an
//! object, plus isotropic noise, normalized to unit length. The part cue makes small
//! discriminative sub-boxes score well, which is what pulls weak supervision toward parts.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::midn::ImageLabel;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_proposals: usize,
    /// Fraction of proposals drawn uniformly instead of around an object.
    pub clutter_rate: f64,
    /// Fraction of object-anchored proposals that are sub-boxes (parts) of the object.
    pub part_rate: f64,
    /// Upper bound of the relative jitter applied to object boxes.
    pub jitter: f64,
    /// Per-dimension std of the feature noise.
    pub noise: f64,
    /// Strength of the part cue: a second class direction scaled by the fraction of the
    /// proposal that lies inside an object. Sub-boxes of an object carry it fully.
    pub part_signal: f64,
    pub max_objects: usize,
    pub extent: f64,
    /// Seed of the class prototypes, shared by every scene of one world.
    pub world_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 4,
            feature_dim: 16,
            num_proposals: 300,
            clutter_rate: 0.2,
            part_rate: 0.7,
            jitter: 2.0,
            noise: 0.25,
            part_signal: 0.3,
            max_objects: 3,
            extent: 100.0,
            world_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 || self.num_proposals == 0 {
            return invalid("num_classes, feature_dim and num_proposals must be positive");
        }
        if !(0.0..1.0).contains(&self.clutter_rate) || !(0.0..1.0).contains(&self.part_rate) {
            return invalid("clutter_rate and part_rate must lie in [0, 1)");
        }
        if !(self.jitter >= 0.0) || !(self.noise >= 0.0) || !(self.part_signal >= 0.0) || !(self.extent > 20.0) {
            return invalid("jitter, noise and part_signal must be >= 0, extent > 20");
        }
        if self.max_objects == 0 {
            return invalid("max_objects must be positive");
        }
        Ok(())
    }

    /// Unit-norm prototypes: rows `0..C` are the object directions, rows `C..2C` the part
    /// directions.
    pub fn prototypes(&self) -> Array2<f64> {
        let mut rng = stream(self.world_seed, Purpose::Scene, &[u64::MAX]);
        let mut protos = Array2::zeros((2 * self.num_classes, self.feature_dim));
        for mut row in protos.rows_mut() {
            row.mapv_inplace(|_| -> f64 { StandardNormal.sample(&mut rng) });
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        protos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub proposals: Vec<BBox>,
    /// One unit-norm row per proposal.
    pub features: Array2<f64>,
    pub label: ImageLabel,
    /// Hidden from training; used by evaluation only.
    pub gt: Vec<GtObject>,
}

impl Scene {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    /// Best IoU of each proposal to any ground truth, with that ground truth's class.
    pub fn best_overlaps(&self) -> Vec<(f64, usize)> {
        self.proposals
            .iter()
            .map(|p| best_overlap(p, &self.gt))
            .collect()
    }
}

fn best_overlap(p: &BBox, gt: &[GtObject]) -> (f64, usize) {
    let mut best = (0.0, gt[0].class);
    for g in gt {
        let v = iou_unchecked(p, &g.bbox);
        if v > best.0 {
            best = (v, g.class);
        }
    }
    best
}

/// Largest fraction of the proposal's area inside one object, with that object's class.
fn best_purity(p: &BBox, gt: &[GtObject]) -> (f64, usize) {
    let mut best = (0.0, gt[0].class);
    for g in gt {
        let v = p.intersection_area(&g.bbox) / p.area();
        if v > best.0 {
            best = (v, g.class);
        }
    }
    best
}

fn clip_box(extent: f64, cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let w = w.clamp(1.0, extent);
    let h = h.clamp(1.0, extent);
    let x1 = (cx - w / 2.0).clamp(0.0, extent - w);
    let y1 = (cy - h / 2.0).clamp(0.0, extent - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn sample_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<GtObject> {
    let n = rng.random_range(1..=cfg.max_objects);
    let e = cfg.extent;
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..cfg.num_classes);
            let w = rng.random_range(0.15 * e..0.5 * e);
            let h = rng.random_range(0.15 * e..0.5 * e);
            let x1 = rng.random_range(0.0..e - w);
            let y1 = rng.random_range(0.0..e - h);
            GtObject { bbox: BBox { x1, y1, x2: x1 + w, y2: y1 + h }, class }
        })
        .collect()
}

fn jittered(cfg: &SceneConfig, g: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    if cfg.jitter == 0.0 {
        return *g;
    }
    let s = rng.random_range(0.0..cfg.jitter);
    let n = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let (w, h) = (g.width(), g.height());
    let cx = (g.x1 + g.x2) / 2.0 + s * w * n(rng) * 0.5;
    let cy = (g.y1 + g.y2) / 2.0 + s * h * n(rng) * 0.5;
    let nw = w * (s * n(rng)).exp();
    let nh = h * (s * n(rng)).exp();
    clip_box(cfg.extent, cx, cy, nw, nh)
}

/// Random sub-box covering 15% to 70% of the object's width and height.
fn part(g: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let w = g.width() * rng.random_range(0.15..0.7);
    let h = g.height() * rng.random_range(0.15..0.7);
    let x1 = g.x1 + rng.random_range(0.0..g.width() - w);
    let y1 = g.y1 + rng.random_range(0.0..g.height() - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn clutter(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> BBox {
    let e = cfg.extent;
    let w = rng.random_range(0.05 * e..0.6 * e);
    let h = rng.random_range(0.05 * e..0.6 * e);
    let cx = rng.random_range(0.0..e);
    let cy = rng.random_range(0.0..e);
    clip_box(e, cx, cy, w, h)
}

fn covered(gt: &[GtObject], proposals: &[BBox]) -> bool {
    gt.iter()
        .all(|g| proposals.iter().any(|p| iou_unchecked(p, &g.bbox) >= 0.5))
}

const MAX_REDRAWS: usize = 10_000;

/// Draws one scene from `rng`. Scenes in which some object has no proposal at IoU >= 0.5 are
/// redrawn from the continuing stream; a config that keeps failing is rejected.
pub fn generate_scene(cfg: &SceneConfig, protos: &Array2<f64>, id: u64, rng: &mut ChaCha8Rng) -> Result<Scene> {
    cfg.validate()?;
    if protos.dim() != (2 * cfg.num_classes, cfg.feature_dim) {
        return invalid("prototype matrix does not match the scene config");
    }
    let mut attempts = 0;
    let (gt, proposals) = loop {
        attempts += 1;
        if attempts > MAX_REDRAWS {
            return invalid(format!("no covering proposal set after {MAX_REDRAWS} draws; lower clutter_rate or part_rate"));
        }
        let gt = sample_objects(cfg, rng);
        let proposals: Vec<BBox> = (0..cfg.num_proposals)
            .map(|_| {
                if rng.random::<f64>() < cfg.clutter_rate {
                    clutter(cfg, rng)
                } else {
                    let g = &gt[rng.random_range(0..gt.len())];
                    if cfg.part_rate > 0.0 && rng.random::<f64>() < cfg.part_rate {
                        part(&g.bbox, rng)
                    } else {
                        jittered(cfg, &g.bbox, rng)
                    }
                }
            })
            .collect();
        if covered(&gt, &proposals) {
            break (gt, proposals);
        }
    };

    let mut features = Array2::zeros((proposals.len(), cfg.feature_dim));
    for (p, mut row) in proposals.iter().zip(features.rows_mut()) {
        let (overlap, class) = best_overlap(p, &gt);
        let noise: Array1<f64> = (0..cfg.feature_dim)
            .map(|_| cfg.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let mut f = &protos.row(class) * overlap + noise;
        if cfg.part_signal > 0.0 {
            let (purity, part_class) = best_purity(p, &gt);
            f.scaled_add(cfg.part_signal * purity, &protos.row(cfg.num_classes + part_class));
        }
        let norm = f.dot(&f).sqrt();
        if norm > 0.0 {
            row.assign(&(f / norm));
        }
    }
    let mut label = vec![false; cfg.num_classes];
    for g in &gt {
        label[g.class] = true;
    }
    Ok(Scene { id, proposals, features, label: ImageLabel(label), gt })
}

/// Scene `i` of the dataset keyed by `dataset_seed`.
pub fn generate_dataset(cfg: &SceneConfig, dataset_seed: u64, count: usize) -> Result<Vec<Scene>> {
    let protos = cfg.prototypes();
    (0..count as u64)
        .map(|i| {
            let mut rng = stream(dataset_seed, Purpose::Scene, &[i]);
            generate_scene(cfg, &protos, i, &mut rng)
        })
        .collect()
}
