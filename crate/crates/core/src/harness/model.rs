//! Linear stand-in for the detector heads: two MIDN streams and `K` refinement classifiers, each
//! an affine map of the fixed proposal features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::midn::{self, ScoreSet};
use crate::rng::{stream, Purpose};

use super::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }

    /// `weight · featuresᵀ + bias`, one column per proposal.
    pub fn apply(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.weight.dot(&features.t()) + &self.bias.view().insert_axis(Axis(1))
    }

    /// Accumulates the parameter gradient for upstream gradient `d_out` (same shape as `apply`).
    fn accumulate(&mut self, d_out: &Array2<f64>, features: ArrayView2<f64>, scale: f64) {
        self.weight.scaled_add(scale, &d_out.dot(&features));
        self.bias.scaled_add(scale, &d_out.sum_axis(Axis(1)));
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub cls: Linear,
    pub det: Linear,
    pub refine: Vec<Linear>,
}

impl ToyModel {
    pub fn zeros(num_classes: usize, feature_dim: usize, branches: usize) -> Self {
        ToyModel {
            cls: Linear::zeros(num_classes, feature_dim),
            det: Linear::zeros(num_classes, feature_dim),
            refine: (0..branches).map(|_| Linear::zeros(num_classes + 1, feature_dim)).collect(),
        }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init(num_classes: usize, feature_dim: usize, branches: usize, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| crate::OpisError::InvalidInput(e.to_string()))?;
        let mut model = Self::zeros(num_classes, feature_dim, branches);
        for (i, head) in model.heads_mut().enumerate() {
            let mut rng = stream(seed, Purpose::ModelInit, &[i as u64]);
            head.weight.mapv_inplace(|_| normal.sample(&mut rng));
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.cls.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.cls.weight.ncols()
    }

    pub fn num_branches(&self) -> usize {
        self.refine.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_classes(), self.feature_dim(), self.num_branches())
    }

    pub fn heads(&self) -> impl Iterator<Item = &Linear> {
        [&self.cls, &self.det].into_iter().chain(self.refine.iter())
    }

    pub fn heads_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        [&mut self.cls, &mut self.det].into_iter().chain(self.refine.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.heads().map(Linear::len).sum()
    }

    /// All parameters in a fixed order (per head: weight row-major, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for h in self.heads() {
            out.extend(h.weight.iter());
            out.extend(h.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return invalid(format!("expected {} parameters, got {}", self.num_params(), params.len()));
        }
        let mut it = params.iter();
        for h in self.heads_mut() {
            h.weight.iter_mut().chain(h.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.heads()
            .all(|h| h.weight.iter().chain(h.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self += scale * other`
    pub fn scaled_add(&mut self, scale: f64, other: &ToyModel) {
        for (a, b) in self.heads_mut().zip(other.heads()) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for h in self.heads_mut() {
            h.weight *= factor;
            h.bias *= factor;
        }
    }
}

/// Full forward pass for one scene.
pub fn forward(model: &ToyModel, scene: &Scene) -> Result<ScoreSet> {
    if scene.features.ncols() != model.feature_dim() {
        return invalid(format!(
            "scene features have {} dims, model expects {}",
            scene.features.ncols(),
            model.feature_dim()
        ));
    }
    if scene.label.num_classes() != model.num_classes() {
        return invalid("scene label and model disagree on the number of classes");
    }
    let f = scene.features.view();
    let x_cls = model.cls.apply(f);
    let x_det = model.det.apply(f);
    let sigma_cls = midn::softmax_over_classes(x_cls.view())?;
    let sigma_det = midn::softmax_over_instances(x_det.view())?;
    let x_r = midn::compose_instance_scores(sigma_cls.view(), sigma_det.view())?;
    let image_scores = midn::image_scores(x_r.view());
    let phi0 = midn::phi0_from_midn(x_r.view());
    let ref_logits: Vec<Array2<f64>> = model.refine.iter().map(|h| h.apply(f)).collect();
    let phi = ref_logits
        .iter()
        .map(|l| midn::softmax_over_classes(l.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { x_cls, x_det, sigma_cls, sigma_det, x_r, image_scores, phi0, ref_logits, phi })
}

/// Upstream gradients of one scene's loss with respect to every head's output logits.
#[derive(Debug, Clone)]
pub struct LogitGrads {
    pub cls: Array2<f64>,
    pub det: Array2<f64>,
    pub refine: Vec<Array2<f64>>,
}

/// Adds `scale * dL/dθ` for one scene into `grad`.
pub fn accumulate_param_grads(grad: &mut ToyModel, logits: &LogitGrads, scene: &Scene, scale: f64) {
    let f = scene.features.view();
    grad.cls.accumulate(&logits.cls, f, scale);
    grad.det.accumulate(&logits.det, f, scale);
    for (head, d) in grad.refine.iter_mut().zip(&logits.refine) {
        head.accumulate(d, f, scale);
    }
}
