//! Per-scene supervision and objective: labels each refinement branch from the previous one,
//! applies instance balancing and reweighting as the method and phase dictate, and produces the
//! total loss with its gradient with respect to every head's logits.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OpisError, Result};
use crate::loss;
use crate::midn::{self, ScoreSet};
use crate::reweight::{self, PirMode};
use crate::rng::SamplerRng;
use crate::sampler::{self, Candidate, Phase, ScheduleState};
use crate::supervision::{self, Center, SupervisionTargets};

use super::model::LogitGrads;
use super::scene::Scene;

/// Which supervision components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cluster-center supervision.
    Baseline,
    /// Instance balancing during fine-tuning only.
    PibOnly,
    /// Non-attenuated reweighting throughout, no balancing.
    PirOnly,
    /// Balancing during fine-tuning, reweighting throughout, attenuated while fine-tuning.
    Opis,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::PibOnly, Method::PirOnly, Method::Opis];

    pub fn uses_pib(self) -> bool {
        matches!(self, Method::PibOnly | Method::Opis)
    }

    pub fn uses_pir(self) -> bool {
        matches!(self, Method::PirOnly | Method::Opis)
    }

    pub fn attenuates(self) -> bool {
        self == Method::Opis
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PibOnly => "pib_only",
            Method::PirOnly => "pir_only",
            Method::Opis => "opis",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = OpisError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| OpisError::Config(format!("unknown method '{s}'")))
    }
}

/// Everything besides scores that supervision construction depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionContext {
    pub method: Method,
    pub schedule: ScheduleState,
    pub seed: u64,
}

/// Sampling trace of one class in one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTrace {
    pub class: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub mu: f64,
    pub target: usize,
    pub bin_population: Vec<usize>,
    pub bin_selected: Vec<usize>,
    pub random_fill: usize,
    pub kept_neg: usize,
    pub kept_pos: usize,
    /// True when positives were reselected against the neglect threshold.
    pub neglect_checked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSupervision {
    pub targets: SupervisionTargets,
    pub centers: Vec<Center>,
    pub zeta: f64,
    pub negatives_before: usize,
    pub traces: Vec<ClassTrace>,
    pub pib_applied: bool,
    pub pir_applied: bool,
}

/// Supervision for branch `k` (1-based) of one scene.
pub fn build_branch_supervision(
    scene: &Scene,
    scores: &ScoreSet,
    k: usize,
    ctx: &SupervisionContext,
) -> Result<BranchSupervision> {
    let num_classes = scene.label.num_classes();
    let hyper = &ctx.schedule.hyper;
    let phi_prev = scores.supervision_source(k).view();
    let centers = supervision::select_cluster_centers(phi_prev, &scene.label)?;
    let (mut targets, assignment) = supervision::assign_labels(
        &centers,
        &scene.proposals,
        phi_prev,
        num_classes,
        hyper.lambda_ig,
        hyper.lambda_ng,
    )?;
    let negatives_before = targets.negative_count();
    let phase = ctx.schedule.phase();
    let mut traces = Vec::new();
    let mut zeta = 1.0;

    let pib_applied = phase == Phase::Finetune && ctx.method.uses_pib();
    if pib_applied {
        let mu = ctx.schedule.ratio()?.expect("fine-tune phase has a ratio");
        let edges = sampler::iou_bin_edges(hyper.lambda_ig, hyper.lambda_ng, hyper.n_bins)?;
        let neglect = ctx.schedule.neglect_threshold()?;
        let mut keep_pos = BTreeSet::new();
        let mut keep_neg = BTreeSet::new();
        for center in &centers {
            let c = center.class;
            let positives = assignment.positives.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let negatives = assignment.negatives.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            if positives.is_empty() {
                // center claimed by a lower class id at equal overlap
                continue;
            }
            let mut trace = ClassTrace {
                class: c,
                n_pos: positives.len(),
                n_neg: negatives.len(),
                mu,
                target: 0,
                bin_population: vec![0; hyper.n_bins],
                bin_selected: vec![0; hyper.n_bins],
                random_fill: 0,
                kept_neg: 0,
                kept_pos: 0,
                neglect_checked: false,
            };
            if negatives.is_empty() {
                let kept = sampler::reselect_positives(positives, phi_prev, c, center.index, neglect)?;
                trace.neglect_checked = true;
                trace.kept_pos = kept.len();
                keep_pos.extend(kept);
            } else {
                let candidates: Vec<Candidate> = negatives
                    .iter()
                    .map(|&r| Candidate { index: r, iou: targets.proposals[r].max_iou })
                    .collect();
                let rng = SamplerRng {
                    seed: ctx.seed,
                    scene: scene.id,
                    iteration: ctx.schedule.iteration as u64,
                    branch: k as u64,
                    class: c as u64,
                };
                let sample = sampler::sample_negatives(&candidates, positives.len(), mu, &edges, &rng)?;
                trace.target = sample.target;
                trace.bin_population = sample.bin_population;
                trace.bin_selected = sample.bin_selected;
                trace.random_fill = sample.random_fill;
                trace.kept_neg = sample.selected.len();
                trace.kept_pos = positives.len();
                keep_neg.extend(sample.selected);
                keep_pos.extend(positives.iter().copied());
            }
            traces.push(trace);
        }
        targets = sampler::apply_selection_mask(&targets, &keep_pos, &keep_neg)?;
        zeta = loss::zeta(Phase::Finetune, targets.len(), keep_pos.len() + keep_neg.len())?;
    }

    let pir_applied = ctx.method.uses_pir();
    if pir_applied {
        let mode = match ctx.schedule.progress()? {
            Some(progress) if ctx.method.attenuates() => {
                PirMode::Attenuated { gamma: hyper.gamma, progress }
            }
            _ => PirMode::Normal,
        };
        let phi_k = scores.phi[k - 1].view();
        targets = reweight::reweight_branch(&targets, phi_k, &centers, hyper.beta, mode)?;
    }

    Ok(BranchSupervision {
        targets,
        centers,
        zeta,
        negatives_before,
        traces,
        pib_applied,
        pir_applied,
    })
}

pub fn build_supervision(scene: &Scene, scores: &ScoreSet, ctx: &SupervisionContext) -> Result<Vec<BranchSupervision>> {
    (1..=scores.phi.len())
        .map(|k| build_branch_supervision(scene, scores, k, ctx))
        .collect()
}

/// Loss components of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLoss {
    pub midn: f64,
    pub refinement: Vec<f64>,
    pub total: f64,
}

/// Objective value under fixed supervision.
pub fn scene_loss(scene: &Scene, scores: &ScoreSet, sup: &[BranchSupervision]) -> Result<SceneLoss> {
    let midn = midn::midn_loss(scores.image_scores.view(), &scene.label)?;
    let refinement = sup
        .iter()
        .zip(&scores.phi)
        .map(|(s, phi)| loss::refinement_loss(&s.targets, phi.view(), s.zeta))
        .collect::<Result<Vec<_>>>()?;
    let total = loss::total_loss(midn, &refinement)?;
    Ok(SceneLoss { midn, refinement, total })
}

/// Gradient of [`scene_loss`] with respect to every head's logits; supervision is constant.
pub fn scene_logit_grads(scene: &Scene, scores: &ScoreSet, sup: &[BranchSupervision]) -> Result<LogitGrads> {
    let g = midn::midn_loss_grad(scores.image_scores.view(), &scene.label)?;
    let (cls, det) = midn::backprop_image_scores(g.view(), scores.sigma_cls.view(), scores.sigma_det.view());
    let refine = sup
        .iter()
        .zip(&scores.ref_logits)
        .map(|(s, logits)| loss::refinement_loss_grad(&s.targets, logits.view(), s.zeta))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitGrads { cls, det, refine })
}

/// Mean over the `K` refinement branches of the foreground scores (`C x |R|`).
pub fn branch_mean_scores(scores: &ScoreSet) -> ndarray::Array2<f64> {
    let c = scores.x_cls.nrows();
    let k = scores.phi.len() as f64;
    let mut acc = ndarray::Array2::<f64>::zeros((c, scores.num_proposals()));
    for phi in &scores.phi {
        acc += &phi.slice(ndarray::s![..c, ..]);
    }
    acc / k
}

