//! Online progressive instance-balanced supervision for weakly supervised object detection.
//!
//! The crate covers the whole supervision path of a multiple-instance detector with `K`
//! refinement branches: two-stream MIDN scoring ([`midn`]), cluster-center pseudo labels
//! ([`supervision`]), progressive IoU-binned negative sampling ([`sampler`]), positive
//! reweighting ([`reweight`]) and the weighted losses ([`loss`]). A small synthetic world and a
//! linear multi-head model ([`harness`]) run the two-phase training loop end to end, and
//! [`eval`] scores the result with VOC-style AP and CorLoc.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod midn;
pub mod reweight;
pub mod rng;
pub mod sampler;
pub mod supervision;

pub use config::ExperimentConfig;
pub use error::{OpisError, Result};
pub use geometry::{iou, nms, BBox, ScoredBox};
pub use midn::{ImageLabel, ScoreSet};
pub use sampler::{Hyperparams, Phase, ScheduleState};
pub use supervision::{Center, ClusterAssignment, Status, SupervisionTargets};
