//! Desk-scale end-to-end harness: synthetic scenes, a linear multi-head model, the supervision
//! pipeline, the two-phase trainer and a finite-difference gradient check.

pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod train;

pub use gradcheck::{finite_diff_check, random_case, GradCheckCase, GradCheckReport, SupervisionMode};
pub use model::{forward, ToyModel};
pub use pipeline::{build_branch_supervision, BranchSupervision, Method, SupervisionContext};
pub use scene::{generate_dataset, generate_scene, GtObject, Scene, SceneConfig};
pub use train::{train, IterationLog, TrainConfig, TrainLog};
