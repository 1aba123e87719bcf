use super::hungarian::{hungarian_solve, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::{giou_corners, BBox, Keypoint, NUM_JOINTS};
use crate::posemodel::PredictionSet;

/// Person class index in the detector's class table.
pub const PERSON_CLASS: usize = 0;

/// `entry(i,j) = −p̂_j(person) + λ_iou·(1 − GIoU(b_i, b̂_j)) + λ_L1·‖b_i − b̂_j‖₁`.
pub fn box_cost_matrix(
    gt: &[BBox],
    pred: &PredictionSet,
    lambda_iou: f64,
    lambda_l1: f64,
) -> Result<CostMatrix> {
    if pred.geometry.cols() != 4 {
        return Err(Error::Matching(format!(
            "box costs need 4-wide geometry, got {}",
            pred.geometry.cols()
        )));
    }
    let n = pred.num_slots();
    let mut costs = Vec::with_capacity(gt.len() * n);
    for b in gt {
        b.validate()?;
        let gc = b.corners();
        for j in 0..n {
            let pb = pred.bbox(j);
            let g = giou_corners(&gc, &pb.corners())?;
            costs
                .push(-pred.prob(j, PERSON_CLASS) + lambda_iou * (1.0 - g) + lambda_l1 * b.l1(&pb));
        }
    }
    CostMatrix::new(gt.len(), n, costs)
}

/// `entry(i,j) = −p̂_j(c_i) + λ_L1·‖k_i − k̂_j‖₁` over annotated keypoints.
pub fn keypoint_cost_matrix(
    gt: &[Keypoint],
    pred: &PredictionSet,
    lambda_l1: f64,
) -> Result<CostMatrix> {
    if pred.geometry.cols() != 2 {
        return Err(Error::Matching(format!(
            "keypoint costs need 2-wide geometry, got {}",
            pred.geometry.cols()
        )));
    }
    let n = pred.num_slots();
    let mut costs = Vec::with_capacity(gt.len() * n);
    for k in gt {
        if !k.is_annotated() {
            return Err(Error::Matching(format!(
                "keypoint of class {} has visibility 0; filter before matching",
                k.class_id
            )));
        }
        if k.class_id >= pred.background() {
            return Err(Error::Matching(format!(
                "class {} out of range",
                k.class_id
            )));
        }
        for j in 0..n {
            let (x, y) = pred.point(j);
            costs.push(-pred.prob(j, k.class_id) + lambda_l1 * ((k.x - x).abs() + (k.y - y).abs()));
        }
    }
    CostMatrix::new(gt.len(), n, costs)
}

/// Per-joint result of inference-time assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAssignment {
    pub slot: [usize; NUM_JOINTS],
    pub prob: [f64; NUM_JOINTS],
    /// `prob ≥ report_threshold`.
    pub present: [bool; NUM_JOINTS],
}

/// Assigns each of the 17 joint classes a distinct slot by minimizing
/// `−p̂_j(c)`; matches below `report_threshold` are reported absent.
pub fn inference_keypoint_assignment(
    pred: &PredictionSet,
    report_threshold: f64,
) -> Result<JointAssignment> {
    let n = pred.num_slots();
    if n < NUM_JOINTS {
        return Err(Error::Matching(format!(
            "need at least {NUM_JOINTS} slots, got {n}"
        )));
    }
    if pred.num_classes() != NUM_JOINTS + 1 {
        return Err(Error::Matching(format!(
            "expected {} classes, got {}",
            NUM_JOINTS + 1,
            pred.num_classes()
        )));
    }
    let mut costs = Vec::with_capacity(NUM_JOINTS * n);
    for c in 0..NUM_JOINTS {
        for j in 0..n {
            costs.push(-pred.prob(j, c));
        }
    }
    let a = hungarian_solve(&CostMatrix::new(NUM_JOINTS, n, costs)?)?;
    let mut slot = [0; NUM_JOINTS];
    let mut prob = [0.0; NUM_JOINTS];
    let mut present = [false; NUM_JOINTS];
    for &(c, j) in &a.pairs {
        slot[c] = j;
        prob[c] = pred.prob(j, c);
        present[c] = prob[c] >= report_threshold;
    }
    Ok(JointAssignment {
        slot,
        prob,
        present,
    })
}
