//! Pseudo-label construction for one refinement branch.
//!
//! Each present class gets a cluster center (the top-scoring proposal under the previous
//! branch). Every proposal is then labeled by its highest IoU to any center: positive for the
//! center's class at `>= lambda_ng`, ignored at `<= lambda_ig`, background in between. Labeled
//! proposals inherit the center's score as their loss weight.
//!
//! Classes are zero-based here; the background class has index `C`.

use std::collections::BTreeMap;

use ndarray::ArrayView2;

use crate::error::{invalid, OpisError, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::midn::ImageLabel;

/// The top-scoring proposal of one present class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub class: usize,
    pub index: usize,
    /// Score of the center under the previous branch for its own class.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalTarget {
    pub status: Status,
    /// Highest IoU to any cluster center.
    pub max_iou: f64,
    /// Class of the center attaining `max_iou`.
    pub source_class: usize,
    pub weight: f64,
    pub selected: bool,
}

/// Per-proposal labels and weights for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    pub num_classes: usize,
    pub proposals: Vec<ProposalTarget>,
}

impl SupervisionTargets {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }

    /// Label row in `[0, C]`, or `None` for ignored proposals.
    pub fn assigned_class(&self, r: usize) -> Option<usize> {
        match self.proposals[r].status {
            Status::Positive(c) => Some(c),
            Status::Negative => Some(self.num_classes),
            Status::Ignored => None,
        }
    }

    /// One-hot label over `C + 1` classes (all zeros when ignored).
    pub fn one_hot(&self, r: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes + 1];
        if let Some(c) = self.assigned_class(r) {
            y[c] = 1.0;
        }
        y
    }

    pub fn count(&self, pred: impl Fn(&ProposalTarget) -> bool) -> usize {
        self.proposals.iter().filter(|t| pred(t)).count()
    }

    pub fn positive_count(&self) -> usize {
        self.count(|t| matches!(t.status, Status::Positive(_)))
    }

    pub fn negative_count(&self) -> usize {
        self.count(|t| t.status == Status::Negative)
    }

    pub fn selected_count(&self) -> usize {
        self.count(|t| t.selected)
    }
}

/// Per-class positive and negative partitions plus the centers they were built from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterAssignment {
    pub centers: Vec<Center>,
    pub positives: BTreeMap<usize, Vec<usize>>,
    pub negatives: BTreeMap<usize, Vec<usize>>,
}

impl ClusterAssignment {
    pub fn center(&self, class: usize) -> Option<&Center> {
        self.centers.iter().find(|c| c.class == class)
    }

    pub fn positive_count(&self, class: usize) -> usize {
        self.positives.get(&class).map_or(0, Vec::len)
    }

    pub fn negative_count(&self, class: usize) -> usize {
        self.negatives.get(&class).map_or(0, Vec::len)
    }
}

/// Argmax proposal per present class, lowest index on ties.
pub fn select_cluster_centers(phi_prev: ArrayView2<f64>, label: &ImageLabel) -> Result<Vec<Center>> {
    if phi_prev.ncols() == 0 {
        return invalid("no proposals");
    }
    if phi_prev.nrows() < label.num_classes() {
        return invalid(format!(
            "score matrix has {} rows for {} classes",
            phi_prev.nrows(),
            label.num_classes()
        ));
    }
    if label.present().next().is_none() {
        return invalid("image label has no positive class");
    }
    Ok(label
        .present()
        .map(|class| {
            let row = phi_prev.row(class);
            let mut best = 0;
            for (r, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = r;
                }
            }
            Center { class, index: best, score: row[best] }
        })
        .collect())
}

/// Highest IoU from `proposal` to any center box; ties go to the lower class id.
pub fn max_iou_source(proposal: &BBox, centers: &[(usize, BBox)]) -> Result<(f64, usize)> {
    proposal.validate()?;
    let mut sorted: Vec<&(usize, BBox)> = centers.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    let mut best: Option<(f64, usize)> = None;
    for (class, bbox) in sorted {
        bbox.validate()?;
        let v = iou_unchecked(proposal, bbox);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, *class));
        }
    }
    best.ok_or_else(|| OpisError::InvalidInput("no cluster centers".into()))
}

pub fn validate_thresholds(lambda_ig: f64, lambda_ng: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_ig) || !(0.0..=1.0).contains(&lambda_ng) || lambda_ig >= lambda_ng
    {
        return invalid(format!(
            "need 0 <= lambda_ig < lambda_ng <= 1, got {lambda_ig}, {lambda_ng}"
        ));
    }
    Ok(())
}

/// Labels every proposal against the cluster centers.
///
/// A proposal of a class whose center coincides with another class's center box can end up
/// claimed by the lower class id; such a class then has no positives in the assignment.
pub fn assign_labels(
    centers: &[Center],
    proposals: &[BBox],
    phi_prev: ArrayView2<f64>,
    num_classes: usize,
    lambda_ig: f64,
    lambda_ng: f64,
) -> Result<(SupervisionTargets, ClusterAssignment)> {
    validate_thresholds(lambda_ig, lambda_ng)?;
    if centers.is_empty() {
        return invalid("no cluster centers");
    }
    if phi_prev.ncols() != proposals.len() {
        return invalid(format!(
            "{} proposals but {} score columns",
            proposals.len(),
            phi_prev.ncols()
        ));
    }
    let mut center_boxes = Vec::with_capacity(centers.len());
    for c in centers {
        if c.class >= num_classes || c.index >= proposals.len() {
            return invalid(format!("center {c:?} out of range"));
        }
        center_boxes.push((c.class, proposals[c.index]));
    }
    let weight_of = |class: usize| phi_prev[[class, centers.iter().find(|c| c.class == class).unwrap().index]];

    let mut assignment = ClusterAssignment {
        centers: centers.to_vec(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(proposals.len());
    for (r, bbox) in proposals.iter().enumerate() {
        let (max_iou, source_class) = max_iou_source(bbox, &center_boxes)?;
        let (status, weight) = if max_iou >= lambda_ng {
            assignment.positives.entry(source_class).or_default().push(r);
            (Status::Positive(source_class), weight_of(source_class))
        } else if max_iou <= lambda_ig {
            (Status::Ignored, 0.0)
        } else {
            assignment.negatives.entry(source_class).or_default().push(r);
            (Status::Negative, weight_of(source_class))
        };
        out.push(ProposalTarget {
            status,
            max_iou,
            source_class,
            weight,
            selected: status != Status::Ignored,
        });
    }
    Ok((SupervisionTargets { num_classes, proposals: out }, assignment))
}
