use super::set::{box_losses, keypoint_losses};
use super::{weighted_nll, LossWeights, SlotCounts};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geometry::{project_labels, AffineAug, BBox, Keypoint, Labels, Visibility};
use crate::matching::{box_cost_matrix, hungarian_solve, keypoint_cost_matrix, PERSON_CLASS};
use crate::posemodel::{PredictionSet, TapedPrediction};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Boxes,
    Keypoints,
}

/// Unsupervised terms for one unlabeled image.
#[derive(Clone, Debug)]
pub struct UnsupLoss {
    pub reg: Var,
    pub cls: Var,
    /// Teacher slots that cleared the threshold, before projection.
    pub pseudo_labels: usize,
    /// Pseudo-labels lost when projecting into the strong frame.
    pub dropped: usize,
    pub counts: SlotCounts,
}

/// Teacher slots whose argmax is a foreground class with confidence `≥ tau`,
/// in slot order.
pub fn select_pseudo_labels(teacher: &PredictionSet, tau: f64, stage: Stage) -> Labels {
    let keep = (0..teacher.num_slots()).filter(|&j| {
        let (_, p) = teacher.confidence(j);
        teacher.is_foreground(j) && p >= tau
    });
    match stage {
        Stage::Boxes => Labels::Boxes(keep.map(|j| teacher.bbox(j)).collect()),
        Stage::Keypoints => Labels::Keypoints(
            keep.map(|j| {
                let (x, y) = teacher.point(j);
                Keypoint::new(x, y, teacher.confidence(j).0, Visibility::Visible)
            })
            .collect(),
        ),
    }
}

/// Pseudo-label regression and classification terms.
///
/// Positives are teacher slots above `τ`, projected from the weak into the
/// strong frame and Hungarian-matched to the student. Negatives are unmatched
/// student slots whose own background probability is at least `τ`.
pub fn unsup_losses(
    tape: &mut Tape,
    teacher: &PredictionSet,
    student: &TapedPrediction,
    weak: &AffineAug,
    strong: &AffineAug,
    w: &LossWeights,
    stage: Stage,
) -> Result<UnsupLoss> {
    let selected = select_pseudo_labels(teacher, w.tau, stage);
    let pseudo_labels = selected.len();
    let projected = project_labels(&selected, weak, strong)?;
    let detached = student.detach(tape);
    let n = detached.num_slots();
    let bg = detached.background();

    let (assignment, classes) = match &projected.labels {
        Labels::Boxes(b) => (
            hungarian_solve(&box_cost_matrix(b, &detached, w.lambda_iou, w.lambda_l1)?)?,
            vec![PERSON_CLASS; b.len()],
        ),
        Labels::Keypoints(k) => (
            hungarian_solve(&keypoint_cost_matrix(k, &detached, w.lambda_l1)?)?,
            k.iter().map(|k| k.class_id).collect(),
        ),
    };

    let mut targets: Vec<Option<(usize, f64)>> = vec![None; n];
    for &(g, slot) in &assignment.pairs {
        targets[slot] = Some((classes[g], 1.0));
    }
    let mut counts = SlotCounts {
        positive: assignment.pairs.len(),
        ..Default::default()
    };
    for (j, t) in targets.iter_mut().enumerate() {
        if t.is_none() {
            if detached.background_prob(j) >= w.tau {
                *t = Some((bg, w.bg_weight));
                counts.negative += 1;
            } else {
                counts.ignored += 1;
            }
        }
    }
    let cls = weighted_nll(tape, student.class_probs, &targets)?;

    let reg = if assignment.pairs.is_empty() {
        tape.scalar(0.0)
    } else {
        let rows = tape.select_rows(student.geometry, &assignment.matched_slots())?;
        match &projected.labels {
            Labels::Boxes(b) => {
                let ordered: Vec<BBox> = assignment.pairs.iter().map(|&(g, _)| b[g]).collect();
                box_losses(tape, &ordered, rows, w)?
            }
            Labels::Keypoints(k) => {
                let ordered: Vec<(f64, f64)> = assignment
                    .pairs
                    .iter()
                    .map(|&(g, _)| (k[g].x, k[g].y))
                    .collect();
                keypoint_losses(tape, &ordered, rows, w)?
            }
        }
    };
    Ok(UnsupLoss {
        reg,
        cls,
        pseudo_labels,
        dropped: projected.dropped,
        counts,
    })
}
