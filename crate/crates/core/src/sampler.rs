//! Progressive instance balance.
//!
//! During fine-tuning the negative-to-positive ratio shrinks linearly from `mu_s` to 4. For each
//! class, `n_P` negatives are drawn from each of four equal-width IoU bins over
//! `(lambda_ig, lambda_ng)`, and the rest of the `floor(mu * n_P)` budget is filled uniformly
//! from whatever is left. Classes without negatives drop low-evidence positives instead.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OpisError, Result};
use crate::rng::SamplerRng;
use crate::supervision::{Status, SupervisionTargets};

/// Smallest admissible negative-to-positive ratio, reached at the end of training.
pub const MIN_RATIO: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Finetune => "finetune",
        }
    }
}

/// Sampling and reweighting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub mu_s: f64,
    pub alpha: f64,
    pub neglect_base: f64,
    pub lambda_ig: f64,
    pub lambda_ng: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n_bins: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            mu_s: 20.0,
            alpha: 0.85,
            neglect_base: 0.05,
            lambda_ig: 0.1,
            lambda_ng: 0.5,
            beta: 0.5,
            gamma: 0.9,
            n_bins: 4,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        crate::supervision::validate_thresholds(self.lambda_ig, self.lambda_ng)?;
        if !(self.mu_s >= MIN_RATIO) {
            return invalid(format!("mu_s must be >= 4, got {}", self.mu_s));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return invalid(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.gamma >= 0.0) || !self.alpha.is_finite() || !self.neglect_base.is_finite() {
            return invalid("gamma must be >= 0 and alpha, neglect_base finite");
        }
        if self.n_bins == 0 {
            return invalid("n_bins must be positive");
        }
        Ok(())
    }
}

/// Iteration counters plus hyperparameters. Iterations are zero-based; fine-tuning covers
/// `finetune_start..=final_iteration`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub iteration: usize,
    pub finetune_start: usize,
    pub final_iteration: usize,
    pub hyper: Hyperparams,
}

impl ScheduleState {
    pub fn phase(&self) -> Phase {
        if self.iteration >= self.finetune_start {
            Phase::Finetune
        } else {
            Phase::Normal
        }
    }

    /// Progress through fine-tuning; `None` during normal training.
    pub fn progress(&self) -> Result<Option<f64>> {
        match self.phase() {
            Phase::Normal => Ok(None),
            Phase::Finetune => {
                progressive_t(self.iteration, self.finetune_start, self.final_iteration).map(Some)
            }
        }
    }

    pub fn ratio(&self) -> Result<Option<f64>> {
        self.progress()?.map(|t| ratio_mu(self.hyper.mu_s, t)).transpose()
    }

    pub fn neglect_threshold(&self) -> Result<f64> {
        neglect_threshold(
            self.hyper.neglect_base,
            self.hyper.alpha,
            self.iteration,
            self.final_iteration,
        )
    }
}

pub fn progressive_t(t_n: usize, t_0: usize, t_1: usize) -> Result<f64> {
    if t_0 >= t_1 || t_n < t_0 || t_n > t_1 {
        return invalid(format!("need T0 <= Tn <= T1 and T0 < T1, got {t_0}, {t_n}, {t_1}"));
    }
    Ok((t_n - t_0) as f64 / (t_1 - t_0) as f64)
}

pub fn ratio_mu(mu_s: f64, t: f64) -> Result<f64> {
    if !(mu_s >= MIN_RATIO) || !(0.0..=1.0).contains(&t) {
        return invalid(format!("need mu_s >= 4 and T in [0, 1], got {mu_s}, {t}"));
    }
    Ok(mu_s - (mu_s - MIN_RATIO) * t)
}

pub fn neglect_threshold(base: f64, alpha: f64, t_n: usize, t_1: usize) -> Result<f64> {
    if t_1 == 0 || t_n > t_1 {
        return invalid(format!("need 0 < T1 and Tn <= T1, got {t_n}, {t_1}"));
    }
    Ok(base + alpha * t_n as f64 / t_1 as f64)
}

/// `n_bins + 1` equally spaced edges from `lambda_ig` to `lambda_ng`.
pub fn iou_bin_edges(lambda_ig: f64, lambda_ng: f64, n_bins: usize) -> Result<Vec<f64>> {
    if !(lambda_ig < lambda_ng) || n_bins == 0 {
        return invalid(format!("bad bin range ({lambda_ig}, {lambda_ng}) x {n_bins}"));
    }
    let width = lambda_ng - lambda_ig;
    let mut edges: Vec<f64> = (0..=n_bins)
        .map(|j| lambda_ig + width * j as f64 / n_bins as f64)
        .collect();
    edges[n_bins] = lambda_ng;
    Ok(edges)
}

/// Bin holding `iou`: `[e_j, e_{j+1})`, with the top edge folded into the last bin.
pub fn bin_index(iou: f64, edges: &[f64]) -> Option<usize> {
    let n = edges.len().checked_sub(1)?;
    if n == 0 || iou < edges[0] || iou > edges[n] {
        return None;
    }
    Some(edges[1..n].iter().take_while(|&&e| iou >= e).count())
}

/// A negative candidate: proposal index and its highest IoU to a center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub iou: f64,
}

/// Outcome of one per-class negative reselection, with the bookkeeping needed to trace it.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    /// Selected proposal indices, ascending.
    pub selected: Vec<usize>,
    /// `floor(mu * n_P)` before capping at the supply.
    pub target: usize,
    pub bin_population: Vec<usize>,
    pub bin_selected: Vec<usize>,
    pub random_fill: usize,
    /// True when the target met or exceeded the supply and every negative was kept.
    pub capped: bool,
}

/// Two-stage reselection of one class's negatives.
pub fn sample_negatives(
    negatives: &[Candidate],
    n_pos: usize,
    mu: f64,
    edges: &[f64],
    rng: &SamplerRng,
) -> Result<NegativeSample> {
    if n_pos == 0 {
        return invalid("class has no positives");
    }
    if negatives.is_empty() {
        return invalid("class has no negatives to sample");
    }
    if !(mu >= MIN_RATIO) || !mu.is_finite() {
        return invalid(format!("ratio must be >= 4, got {mu}"));
    }
    let n_bins = edges.len().saturating_sub(1);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (pos, cand) in negatives.iter().enumerate() {
        let j = bin_index(cand.iou, edges).ok_or_else(|| {
            OpisError::InvalidInput(format!("negative IoU {} outside bin range", cand.iou))
        })?;
        bins[j].push(pos);
    }
    let bin_population: Vec<usize> = bins.iter().map(Vec::len).collect();
    let target = (mu * n_pos as f64).floor() as usize;

    if target >= negatives.len() {
        let mut selected: Vec<usize> = negatives.iter().map(|c| c.index).collect();
        selected.sort_unstable();
        return Ok(NegativeSample {
            selected,
            target,
            bin_selected: bin_population.clone(),
            bin_population,
            random_fill: 0,
            capped: true,
        });
    }

    let mut rng = rng.rng();
    let mut taken = vec![false; negatives.len()];
    let mut bin_selected = Vec::with_capacity(n_bins);
    for bin in &bins {
        let k = n_pos.min(bin.len());
        for i in index::sample(&mut rng, bin.len(), k) {
            taken[bin[i]] = true;
        }
        bin_selected.push(k);
    }
    let stage_one: usize = bin_selected.iter().sum();
    let rest: Vec<usize> = (0..negatives.len()).filter(|&p| !taken[p]).collect();
    let random_fill = target.saturating_sub(stage_one).min(rest.len());
    for i in index::sample(&mut rng, rest.len(), random_fill) {
        taken[rest[i]] = true;
    }

    let mut selected: Vec<usize> = taken
        .iter()
        .zip(negatives)
        .filter(|(&t, _)| t)
        .map(|(_, c)| c.index)
        .collect();
    selected.sort_unstable();
    Ok(NegativeSample {
        selected,
        target,
        bin_population,
        bin_selected,
        random_fill,
        capped: false,
    })
}

/// Positive reselection for a class without negatives: keep only the center when the summed
/// previous-branch score of the positives (center included) is below `threshold`.
pub fn reselect_positives(
    positives: &[usize],
    phi_prev: ArrayView2<f64>,
    class: usize,
    center: usize,
    threshold: f64,
) -> Result<Vec<usize>> {
    if !positives.contains(&center) {
        return Err(OpisError::Consistency(format!(
            "center {center} of class {class} is not among its positives"
        )));
    }
    let total: f64 = positives.iter().map(|&r| phi_prev[[class, r]]).sum();
    if total < threshold {
        Ok(vec![center])
    } else {
        Ok(positives.to_vec())
    }
}

/// Zeroes the weight of every labeled proposal outside the selected sets.
pub fn apply_selection_mask(
    targets: &SupervisionTargets,
    selected_pos: &BTreeSet<usize>,
    selected_neg: &BTreeSet<usize>,
) -> Result<SupervisionTargets> {
    let n = targets.len();
    for &r in selected_pos {
        if r >= n || !matches!(targets.proposals[r].status, Status::Positive(_)) {
            return invalid(format!("proposal {r} selected as positive but not labeled positive"));
        }
    }
    for &r in selected_neg {
        if r >= n || targets.proposals[r].status != Status::Negative {
            return invalid(format!("proposal {r} selected as negative but not labeled negative"));
        }
    }
    let mut out = targets.clone();
    for (r, t) in out.proposals.iter_mut().enumerate() {
        if !(selected_pos.contains(&r) || selected_neg.contains(&r)) {
            t.weight = 0.0;
            t.selected = false;
        }
    }
    Ok(out)
}
