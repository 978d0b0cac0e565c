//! Progressive reweighting of positive instances from the current branch's own score and
//! the overlap with the cluster center.

use ndarray::ArrayView2;

use crate::error::{invalid, Result};
use crate::supervision::{Center, Status, SupervisionTargets};

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return invalid(format!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

/// `(beta * e^score + (1 - beta) * e^iou) * center_score`
pub fn reweight_normal(score: f64, iou: f64, beta: f64, center_score: f64) -> Result<f64> {
    unit("score", score)?;
    unit("iou", iou)?;
    unit("beta", beta)?;
    unit("center score", center_score)?;
    Ok((beta * score.exp() + (1.0 - beta) * iou.exp()) * center_score)
}

/// The normal weight scaled by `e^(-gamma * progress)`.
pub fn reweight_attenuated(
    score: f64,
    iou: f64,
    beta: f64,
    center_score: f64,
    gamma: f64,
    progress: f64,
) -> Result<f64> {
    unit("progress", progress)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return invalid(format!("gamma must be finite and >= 0, got {gamma}"));
    }
    Ok((-gamma * progress).exp() * reweight_normal(score, iou, beta, center_score)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PirMode {
    Normal,
    Attenuated { gamma: f64, progress: f64 },
}

/// Reweights every selected positive of a branch using the branch's live scores `phi_k`.
pub fn reweight_branch(
    targets: &SupervisionTargets,
    phi_k: ArrayView2<f64>,
    centers: &[Center],
    beta: f64,
    mode: PirMode,
) -> Result<SupervisionTargets> {
    if phi_k.ncols() != targets.len() || phi_k.nrows() != targets.num_classes + 1 {
        return invalid(format!(
            "scores {:?} do not match {} proposals x {} classes",
            phi_k.dim(),
            targets.len(),
            targets.num_classes + 1
        ));
    }
    let mut out = targets.clone();
    for (r, t) in out.proposals.iter_mut().enumerate() {
        let Status::Positive(class) = t.status else { continue };
        if !t.selected {
            continue;
        }
        let Some(center) = centers.iter().find(|c| c.class == class) else {
            return invalid(format!("no center for positive class {class}"));
        };
        let score = phi_k[[class, r]];
        t.weight = match mode {
            PirMode::Normal => reweight_normal(score, t.max_iou, beta, center.score)?,
            PirMode::Attenuated { gamma, progress } => {
                reweight_attenuated(score, t.max_iou, beta, center.score, gamma, progress)?
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::ProposalTarget;
    use ndarray::array;
    use std::f64::consts::E;

    #[test]
    fn scalar_values() {
        assert_eq!(reweight_normal(0.0, 0.0, 0.5, 1.0).unwrap(), 1.0);
        for beta in [0.0, 0.3, 1.0] {
            assert!((reweight_normal(1.0, 1.0, beta, 0.5).unwrap() - 1.359_140_914_229_522_5).abs() < 1e-12);
        }
        assert!((reweight_normal(0.0, 1.0, 0.5, 1.0).unwrap() - 1.859_140_914_229_522_5).abs() < 1e-12);
        let a = reweight_attenuated(1.0, 1.0, 0.5, 0.5, 0.9, 1.0).unwrap();
        assert!((a - 0.5 * 0.1f64.exp()).abs() < 1e-12);
        assert!((a - 0.552_585_459_037_823_3).abs() < 1e-9);
        assert!(reweight_normal(1.2, 0.0, 0.5, 1.0).is_err());
        assert!(reweight_normal(0.2, -0.1, 0.5, 1.0).is_err());
        assert!(reweight_attenuated(0.2, 0.1, 0.5, 1.0, -1.0, 0.5).is_err());
    }

    #[test]
    fn attenuation_off_and_monotone() {
        let n = reweight_normal(0.3, 0.7, 0.4, 0.6).unwrap();
        assert_eq!(reweight_attenuated(0.3, 0.7, 0.4, 0.6, 0.9, 0.0).unwrap().to_bits(), n.to_bits());
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let w = reweight_attenuated(0.3, 0.7, 0.4, 0.6, 0.9, i as f64 / 10.0).unwrap();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn beta_endpoints() {
        let (s, i, c) = (0.35, 0.8, 0.7);
        assert!((reweight_normal(s, i, 1.0, c).unwrap() - s.exp() * c).abs() < 1e-15);
        assert!((reweight_normal(s, i, 0.0, c).unwrap() - i.exp() * c).abs() < 1e-15);
        assert!(reweight_normal(s, i, 0.5, c).unwrap() <= E * c);
    }

    #[test]
    fn branch_touches_only_selected_positives() {
        let mk = |status, iou, weight, selected| ProposalTarget {
            status,
            max_iou: iou,
            source_class: 0,
            weight,
            selected,
        };
        let targets = SupervisionTargets {
            num_classes: 1,
            proposals: vec![
                mk(Status::Positive(0), 1.0, 0.6, true),
                mk(Status::Negative, 0.3, 0.6, true),
                mk(Status::Positive(0), 0.7, 0.0, false),
                mk(Status::Ignored, 0.0, 0.0, false),
            ],
        };
        let phi = array![[0.8, 0.1, 0.5, 0.2], [0.2, 0.9, 0.5, 0.8]];
        let centers = [Center { class: 0, index: 0, score: 0.6 }];
        let out = reweight_branch(&targets, phi.view(), &centers, 0.5, PirMode::Normal).unwrap();
        assert_eq!(out.proposals[0].weight, reweight_normal(0.8, 1.0, 0.5, 0.6).unwrap());
        assert_eq!(out.proposals[1..], targets.proposals[1..]);

        let none = SupervisionTargets { num_classes: 1, proposals: targets.proposals[1..2].to_vec() };
        let same = reweight_branch(&none, phi.slice(ndarray::s![.., 1..2]), &centers, 0.5, PirMode::Normal).unwrap();
        assert_eq!(same, none);
        assert!(reweight_branch(&targets, phi.slice(ndarray::s![.., ..2]), &centers, 0.5, PirMode::Normal).is_err());
    }
}
