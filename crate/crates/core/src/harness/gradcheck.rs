//! Central finite-difference check of the analytic parameter gradient.

use rand::Rng;

use crate::error::Result;
use crate::rng::{derive_seed, stream, Purpose};
use crate::sampler::{Hyperparams, ScheduleState};

use super::model::{accumulate_param_grads, forward, ToyModel};
use super::pipeline::{build_supervision, scene_logit_grads, scene_loss, Method, SupervisionContext};
use super::scene::{generate_scene, Scene, SceneConfig};

/// Perturbation used for central differences.
pub const STEP: f64 = 1e-6;

/// Denominator floor of [`relative_error`]. Below it the comparison is effectively absolute,
/// since central differences carry roughly `1e-9` of roundoff on O(1) losses.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// How supervision is treated while parameters are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionMode {
    /// Built once at the unperturbed parameters.
    Frozen,
    /// Rebuilt at every perturbed point, so weight changes leak into the difference quotient.
    Live,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat parameter index with the largest error.
    pub worst_param: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn analytic_gradient(model: &ToyModel, scene: &Scene, ctx: &SupervisionContext) -> Result<Vec<f64>> {
    let scores = forward(model, scene)?;
    let sup = build_supervision(scene, &scores, ctx)?;
    let logits = scene_logit_grads(scene, &scores, &sup)?;
    let mut grad = model.zeros_like();
    accumulate_param_grads(&mut grad, &logits, scene, 1.0);
    Ok(grad.flat_params())
}

pub fn finite_diff_check(
    model: &ToyModel,
    scene: &Scene,
    ctx: &SupervisionContext,
    mode: SupervisionMode,
) -> Result<GradCheckReport> {
    let scores = forward(model, scene)?;
    let frozen = build_supervision(scene, &scores, ctx)?;
    let analytic = analytic_gradient(model, scene, ctx)?;

    let base = model.flat_params();
    let mut probe = model.clone();
    let mut loss_at = |params: &[f64]| -> Result<f64> {
        probe.set_flat_params(params)?;
        let scores = forward(&probe, scene)?;
        let sup = match mode {
            SupervisionMode::Frozen => frozen.clone(),
            SupervisionMode::Live => build_supervision(scene, &scores, ctx)?,
        };
        Ok(scene_loss(scene, &scores, &sup)?.total)
    };

    let mut numeric = Vec::with_capacity(base.len());
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + STEP;
        let plus = loss_at(&params)?;
        params[i] = base[i] - STEP;
        let minus = loss_at(&params)?;
        params[i] = base[i];
        numeric.push((plus - minus) / (2.0 * STEP));
    }

    let (worst_param, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport { max_rel_error, worst_param, analytic, numeric })
}

/// A random model, scene and supervision context for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub model: ToyModel,
    pub scene: Scene,
    pub ctx: SupervisionContext,
}

/// Draws a small case: 1-4 classes, 2-8 feature dims, 5-40 proposals, 1-3 branches, a random
/// method and an iteration in either phase of a 100-iteration schedule.
pub fn random_case(seed: u64) -> Result<GradCheckCase> {
    let mut rng = stream(seed, Purpose::Gradcheck, &[]);
    let num_classes = rng.random_range(1..=4);
    let feature_dim = rng.random_range(2..=8);
    let branches = rng.random_range(1..=3);
    let cfg = SceneConfig {
        num_classes,
        feature_dim,
        num_proposals: rng.random_range(5..=40),
        world_seed: seed,
        ..Default::default()
    };
    let scene = generate_scene(&cfg, &cfg.prototypes(), seed, &mut rng)?;
    let model = ToyModel::init(num_classes, feature_dim, branches, 0.5, derive_seed(seed, Purpose::Gradcheck, &[1]))?;
    let method = Method::ALL[rng.random_range(0..Method::ALL.len())];
    let schedule = ScheduleState {
        iteration: rng.random_range(0..100),
        finetune_start: 78,
        final_iteration: 99,
        hyper: Hyperparams::default(),
    };
    Ok(GradCheckCase { model, scene, ctx: SupervisionContext { method, schedule, seed } })
}
