//! Optimal assignment between ground truth and prediction slots.

mod costs;
mod hungarian;

pub use costs::{
    box_cost_matrix, inference_keypoint_assignment, keypoint_cost_matrix, JointAssignment,
    PERSON_CLASS,
};
pub use hungarian::{hungarian_solve, CostMatrix, MatchAssignment};
