//! Two-stream multiple instance detection scoring: class softmax times instance softmax,
//! summed over proposals into image-level scores, trained with per-class binary cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Clamp applied to image-level scores before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Binary image-level label over the `C` foreground classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLabel(pub Vec<bool>);

impl ImageLabel {
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn has(&self, class_idx: usize) -> bool {
        self.0[class_idx]
    }

    /// Zero-based indices of the classes present.
    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &y)| y).map(|(c, _)| c)
    }

    pub fn as_f64(&self) -> Array1<f64> {
        self.0.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
    }
}

/// All per-branch scores for one scene.
///
/// Rows index classes, columns proposals. `phi0` and each `phi[k]` have `C + 1` rows, the last
/// one being background.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub x_cls: Array2<f64>,
    pub x_det: Array2<f64>,
    pub sigma_cls: Array2<f64>,
    pub sigma_det: Array2<f64>,
    pub x_r: Array2<f64>,
    pub image_scores: Array1<f64>,
    pub phi0: Array2<f64>,
    /// Pre-softmax refinement logits, one matrix per branch.
    pub ref_logits: Vec<Array2<f64>>,
    pub phi: Vec<Array2<f64>>,
}

impl ScoreSet {
    /// Scores that supervise branch `k` (1-based): `phi0` for the first branch, else `phi[k-2]`.
    pub fn supervision_source(&self, k: usize) -> &Array2<f64> {
        if k <= 1 {
            &self.phi0
        } else {
            &self.phi[k - 2]
        }
    }

    pub fn num_proposals(&self) -> usize {
        self.x_cls.ncols()
    }
}

fn check_finite(m: &ArrayView2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite logits");
    }
    Ok(())
}

fn softmax_lane(lane: ArrayView1<f64>) -> Array1<f64> {
    let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = lane.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

fn softmax_along(x: &ArrayView2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        dst.assign(&softmax_lane(src));
    }
    out
}

/// Softmax down each column (over classes).
pub fn softmax_over_classes(x_cls: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_finite(&x_cls)?;
    Ok(softmax_along(&x_cls, Axis(0)))
}

/// Softmax along each row (over proposals).
pub fn softmax_over_instances(x_det: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_finite(&x_det)?;
    Ok(softmax_along(&x_det, Axis(1)))
}

pub fn compose_instance_scores(sc: ArrayView2<f64>, sd: ArrayView2<f64>) -> Result<Array2<f64>> {
    if sc.dim() != sd.dim() {
        return invalid(format!("shape mismatch {:?} vs {:?}", sc.dim(), sd.dim()));
    }
    Ok(&sc * &sd)
}

/// Image-level score per class: the row sums of the composed scores.
pub fn image_scores(x_r: ArrayView2<f64>) -> Array1<f64> {
    x_r.sum_axis(Axis(1))
}

/// Supervision matrix for the first refinement branch: foreground rows copied from the composed
/// scores, zero background row, no renormalization.
pub fn phi0_from_midn(x_r: ArrayView2<f64>) -> Array2<f64> {
    let (c, n) = x_r.dim();
    let mut phi0 = Array2::zeros((c + 1, n));
    phi0.slice_mut(ndarray::s![..c, ..]).assign(&x_r);
    phi0
}

fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn check_lengths(y_pred: &ArrayView1<f64>, y_true: &ImageLabel) -> Result<()> {
    if y_pred.len() != y_true.num_classes() {
        return invalid(format!(
            "prediction has {} classes, label has {}",
            y_pred.len(),
            y_true.num_classes()
        ));
    }
    Ok(())
}

/// Multi-label binary cross-entropy of the image-level scores.
pub fn midn_loss(y_pred: ArrayView1<f64>, y_true: &ImageLabel) -> Result<f64> {
    check_lengths(&y_pred, y_true)?;
    let loss = y_pred
        .iter()
        .zip(&y_true.0)
        .map(|(&p, &y)| {
            let p = clamp_score(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(loss)
}

/// dL/dy' evaluated at the clamped prediction.
pub fn midn_loss_grad(y_pred: ArrayView1<f64>, y_true: &ImageLabel) -> Result<Array1<f64>> {
    check_lengths(&y_pred, y_true)?;
    Ok(y_pred
        .iter()
        .zip(&y_true.0)
        .map(|(&p, &y)| {
            let p = clamp_score(p);
            let y = if y { 1.0 } else { 0.0 };
            (p - y) / (p * (1.0 - p))
        })
        .collect())
}

/// Backpropagates dL/dy' through the composition down to both logit streams.
///
/// Returns `(dL/dx_cls, dL/dx_det)`.
pub fn backprop_image_scores(
    grad_y: ArrayView1<f64>,
    sigma_cls: ArrayView2<f64>,
    sigma_det: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let g = grad_y.insert_axis(Axis(1));
    // dL/dx_R[c, r] = g_c for every proposal r
    let d_sc = &sigma_det * &g;
    let d_sd = &sigma_cls * &g;

    // column-wise softmax backward
    let col_dot = (&d_sc * &sigma_cls).sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_cls = &sigma_cls * &(&d_sc - &col_dot);

    // row-wise softmax backward
    let row_dot = (&d_sd * &sigma_det).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_det = &sigma_det * &(&d_sd - &row_dot);

    (d_cls, d_det)
}
