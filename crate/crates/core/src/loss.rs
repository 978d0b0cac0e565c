//! Weighted cross-entropy for the refinement branches and the total objective.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{invalid, Result};
use crate::sampler::Phase;
use crate::supervision::SupervisionTargets;

/// Lower clamp for probabilities inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss rescale: 1 in normal training, `|R| / |R_s|` during fine-tuning.
pub fn zeta(phase: Phase, n_total: usize, n_selected: usize) -> Result<f64> {
    match phase {
        Phase::Normal => Ok(1.0),
        Phase::Finetune => {
            if n_selected == 0 {
                return invalid("no selected proposals during fine-tuning");
            }
            Ok(n_total as f64 / n_selected as f64)
        }
    }
}

fn check_shape(targets: &SupervisionTargets, m: &ArrayView2<f64>) -> Result<()> {
    if m.dim() != (targets.num_classes + 1, targets.len()) {
        return invalid(format!(
            "score matrix {:?} does not match {} classes x {} proposals",
            m.dim(),
            targets.num_classes + 1,
            targets.len()
        ));
    }
    Ok(())
}

/// `-(1/|R|) * sum_r zeta * w_r * log phi[label_r, r]`
pub fn refinement_loss(targets: &SupervisionTargets, phi_k: ArrayView2<f64>, zeta: f64) -> Result<f64> {
    check_shape(targets, &phi_k)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for r in 0..targets.len() {
        let w = targets.proposals[r].weight;
        if w == 0.0 {
            continue;
        }
        if let Some(c) = targets.assigned_class(r) {
            acc += zeta * w * phi_k[[c, r]].max(LOG_FLOOR).ln();
        }
    }
    Ok(-acc / targets.len() as f64)
}

/// Gradient of [`refinement_loss`] with respect to the pre-softmax logits; weights are constants.
pub fn refinement_loss_grad(
    targets: &SupervisionTargets,
    logits: ArrayView2<f64>,
    zeta: f64,
) -> Result<Array2<f64>> {
    check_shape(targets, &logits)?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let n = targets.len() as f64;
    for (r, mut col) in grad.axis_iter_mut(Axis(1)).enumerate() {
        let w = targets.proposals[r].weight;
        let Some(c) = targets.assigned_class(r) else { continue };
        if w == 0.0 {
            continue;
        }
        let lane = logits.column(r);
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp = lane.mapv(|v| (v - max).exp());
        let probs = &exp / exp.sum();
        let scale = zeta * w / n;
        col.assign(&(probs * scale));
        col[c] -= scale;
    }
    Ok(grad)
}

/// MIDN loss plus the sum of the refinement losses.
pub fn total_loss(midn: f64, refinement: &[f64]) -> Result<f64> {
    if refinement.is_empty() {
        return invalid("at least one refinement branch is required");
    }
    Ok(refinement.iter().fold(midn, |acc, l| acc + l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midn::softmax_over_classes;
    use crate::supervision::{ProposalTarget, Status};
    use ndarray::array;
    use proptest::prelude::*;

    fn target(status: Status, weight: f64) -> ProposalTarget {
        ProposalTarget { status, max_iou: 0.6, source_class: 0, weight, selected: weight > 0.0 }
    }

    #[test]
    fn zeta_cases() {
        assert_eq!(zeta(Phase::Normal, 2000, 0).unwrap(), 1.0);
        assert_eq!(zeta(Phase::Finetune, 2000, 100).unwrap(), 20.0);
        assert_eq!(zeta(Phase::Finetune, 2000, 2000).unwrap(), 1.0);
        assert!(zeta(Phase::Finetune, 2000, 0).is_err());
    }

    #[test]
    fn loss_values() {
        let t = SupervisionTargets { num_classes: 1, proposals: vec![target(Status::Positive(0), 1.0)] };
        let phi = array![[0.5], [0.5]];
        let l = refinement_loss(&t, phi.view(), 1.0).unwrap();
        assert!((l - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert_eq!(refinement_loss(&t, phi.view(), 2.0).unwrap(), 2.0 * l);

        let zero = SupervisionTargets {
            num_classes: 1,
            proposals: vec![target(Status::Positive(0), 0.0), target(Status::Negative, 0.0)],
        };
        let phi = array![[0.5, 0.2], [0.5, 0.8]];
        assert_eq!(refinement_loss(&zero, phi.view(), 1.0).unwrap(), 0.0);
        assert!(refinement_loss(&zero, array![[0.5], [0.5]].view(), 1.0).is_err());
    }

    #[test]
    fn grad_hand_values() {
        let t = SupervisionTargets { num_classes: 2, proposals: vec![target(Status::Positive(0), 1.0)] };
        let g = refinement_loss_grad(&t, Array2::zeros((3, 1)).view(), 1.0).unwrap();
        let expect = [1.0 / 3.0 - 1.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let t = SupervisionTargets { num_classes: 2, proposals: vec![target(Status::Negative, 0.0)] };
        let g = refinement_loss_grad(&t, array![[0.3], [1.0], [-2.0]].view(), 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total() {
        assert!((total_loss(0.5, &[0.1, 0.2, 0.3]).unwrap() - 1.1).abs() < 1e-15);
        assert!(total_loss(0.5, &[]).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (usize, Vec<(u8, f64)>, Vec<f64>, f64)> {
        (1usize..=5, 1usize..=30).prop_flat_map(|(c, n)| {
            (
                Just(c),
                proptest::collection::vec((0u8..=(c as u8 + 1), 0.0f64..2.0), n),
                proptest::collection::vec(-4.0f64..4.0, (c + 1) * n),
                0.5f64..5.0,
            )
        })
    }

    fn build(c: usize, labels: &[(u8, f64)]) -> SupervisionTargets {
        let proposals = labels
            .iter()
            .map(|&(l, w)| {
                let l = l as usize;
                if l < c {
                    target(Status::Positive(l), w)
                } else if l == c {
                    target(Status::Negative, w)
                } else {
                    target(Status::Ignored, 0.0)
                }
            })
            .collect();
        SupervisionTargets { num_classes: c, proposals }
    }

    proptest! {
        #[test]
        fn grad_matches_central_differences((c, labels, logits, z) in arb_case()) {
            let t = build(c, &labels);
            let x = Array2::from_shape_vec((c + 1, labels.len()), logits).unwrap();
            let g = refinement_loss_grad(&t, x.view(), z).unwrap();
            let f = |x: &Array2<f64>| refinement_loss(&t, softmax_over_classes(x.view()).unwrap().view(), z).unwrap();
            let h = 1e-6;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let mut p = x.clone();
                    p[[i, j]] += h;
                    let mut m = x.clone();
                    m[[i, j]] -= h;
                    let num = (f(&p) - f(&m)) / (2.0 * h);
                    let a = g[[i, j]];
                    let rel = crate::harness::gradcheck::relative_error(a, num);
                    prop_assert!(rel <= 1e-5, "analytic {a} numeric {num}");
                }
            }
        }

        #[test]
        fn loss_nonnegative_and_permutation_invariant((c, labels, logits, z) in arb_case()) {
            let t = build(c, &labels);
            let x = Array2::from_shape_vec((c + 1, labels.len()), logits).unwrap();
            let phi = softmax_over_classes(x.view()).unwrap();
            let l = refinement_loss(&t, phi.view(), z).unwrap();
            prop_assert!(l >= 0.0);
            let n = labels.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let tp = SupervisionTargets { num_classes: c, proposals: perm.iter().map(|&i| t.proposals[i]).collect() };
            let lp = refinement_loss(&tp, phi.select(Axis(1), &perm).view(), z).unwrap();
            prop_assert!((l - lp).abs() <= 1e-12 * l.max(1.0));
        }

        #[test]
        fn phase_boundary_consistency((c, labels, logits, _z) in arb_case()) {
            let t = build(c, &labels);
            let x = Array2::from_shape_vec((c + 1, labels.len()), logits).unwrap();
            let phi = softmax_over_classes(x.view()).unwrap();
            let normal = refinement_loss(&t, phi.view(), zeta(Phase::Normal, t.len(), t.len()).unwrap()).unwrap();
            let fine = refinement_loss(&t, phi.view(), zeta(Phase::Finetune, t.len(), t.len()).unwrap()).unwrap();
            prop_assert_eq!(normal.to_bits(), fine.to_bits());
        }
    }
}
