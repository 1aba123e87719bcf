use super::{weighted_nll, LossWeights, SlotCounts};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint};
use crate::matching::{
    box_cost_matrix, hungarian_solve, keypoint_cost_matrix, MatchAssignment, PERSON_CLASS,
};
use crate::posemodel::TapedPrediction;

/// One supervised set loss together with the assignment that produced it.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub loss: Var,
    pub assignment: MatchAssignment,
    pub counts: SlotCounts,
}

fn col(tape: &mut Tape, x: Var, c: usize) -> Result<Var> {
    tape.slice(x, 1, c, 1)
}

/// `λ_iou·(1 − GIoU) + λ_L1·‖b − b̂‖₁` summed over rows of `pred` (`M × 4`,
/// center form) against `gt`.
///
/// A degenerate predicted box yields a large finite value: the ground-truth
/// box keeps every denominator positive.
pub fn box_losses(tape: &mut Tape, gt: &[BBox], pred: Var, w: &LossWeights) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 4 || shape[0] != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "box_losses",
            lhs: vec![gt.len(), 4],
            rhs: shape,
        });
    }
    if gt.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    for b in gt {
        b.validate()?;
    }
    let m = gt.len();
    let g = tape.constant(Tensor::new(
        vec![m, 4],
        gt.iter().flat_map(|b| b.to_array()).collect(),
    )?);

    let diff = tape.sub(pred, g)?;
    let ad = tape.abs(diff);
    let l1 = tape.sum(ad);

    let corners = |tape: &mut Tape, x: Var| -> Result<[Var; 4]> {
        let cx = col(tape, x, 0)?;
        let cy = col(tape, x, 1)?;
        let w = col(tape, x, 2)?;
        let h = col(tape, x, 3)?;
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    };
    let [px0, py0, px1, py1] = corners(tape, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(tape, g)?;

    let area = |tape: &mut Tape, x0, y0, x1, y1| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        tape.mul(w, h)
    };
    let ix0 = tape.maximum(px0, gx0)?;
    let iy0 = tape.maximum(py0, gy0)?;
    let ix1 = tape.minimum(px1, gx1)?;
    let iy1 = tape.minimum(py1, gy1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let pw = tape.sub(px1, px0)?;
    let pw = tape.relu(pw);
    let ph = tape.sub(py1, py0)?;
    let ph = tape.relu(ph);
    let ap = tape.mul(pw, ph)?;
    let ag = area(tape, gx0, gy0, gx1, gy1)?;
    let union = tape.add(ap, ag)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let cx0 = tape.minimum(px0, gx0)?;
    let cy0 = tape.minimum(py0, gy0)?;
    let cx1 = tape.maximum(px1, gx1)?;
    let cy1 = tape.maximum(py1, gy1)?;
    let hull = area(tape, cx0, cy0, cx1, cy1)?;
    let gap = tape.sub(hull, union)?;
    let gap = tape.div(gap, hull)?;
    let giou = tape.sub(iou, gap)?;

    // Σ (1 − giou) = M − Σ giou
    let sg = tape.sum(giou);
    let one_minus = tape.neg(sg);
    let one_minus = tape.add_scalar(one_minus, m as f64);
    let liou = tape.scale(one_minus, w.lambda_iou);
    let ll1 = tape.scale(l1, w.lambda_l1);
    tape.add(liou, ll1)
}

/// Single-box form of [`box_losses`]; `pred` holds 4 values.
pub fn box_loss(tape: &mut Tape, gt: &BBox, pred: Var, w: &LossWeights) -> Result<Var> {
    let pred = tape.reshape(pred, &[1, 4])?;
    box_losses(tape, std::slice::from_ref(gt), pred, w)
}

/// `λ_L1·‖k − k̂‖₁` summed over rows of `pred` (`M × 2`).
pub fn keypoint_losses(
    tape: &mut Tape,
    gt: &[(f64, f64)],
    pred: Var,
    w: &LossWeights,
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "keypoint_losses",
            lhs: vec![gt.len(), 2],
            rhs: shape,
        });
    }
    if gt.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let g = tape.constant(Tensor::new(
        vec![gt.len(), 2],
        gt.iter().flat_map(|&(x, y)| [x, y]).collect(),
    )?);
    let d = tape.sub(pred, g)?;
    let d = tape.abs(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, w.lambda_l1))
}

/// Cross-entropy over all slots (matched slots towards their class, the rest
/// towards background) plus geometry terms on matched slots.
fn set_loss(
    tape: &mut Tape,
    pred: &TapedPrediction,
    assignment: MatchAssignment,
    classes: &[usize],
    w: &LossWeights,
    geometry: impl FnOnce(&mut Tape, Var, &MatchAssignment) -> Result<Var>,
) -> Result<SetLoss> {
    let shape = tape.shape(pred.class_probs).to_vec();
    let (n, bg) = (shape[0], shape[1] - 1);
    let mut targets: Vec<Option<(usize, f64)>> = vec![Some((bg, w.bg_weight)); n];
    for &(g, slot) in &assignment.pairs {
        targets[slot] = Some((classes[g], 1.0));
    }
    let cls = weighted_nll(tape, pred.class_probs, &targets)?;
    let geo = if assignment.pairs.is_empty() {
        tape.scalar(0.0)
    } else {
        let slots = assignment.matched_slots();
        let rows = tape.select_rows(pred.geometry, &slots)?;
        geometry(tape, rows, &assignment)?
    };
    let loss = tape.add(cls, geo)?;
    let counts = SlotCounts {
        positive: assignment.pairs.len(),
        negative: n - assignment.pairs.len(),
        ignored: 0,
    };
    Ok(SetLoss {
        loss,
        assignment,
        counts,
    })
}

fn check_capacity(op: &str, g: usize, n: usize) -> Result<()> {
    if g > n {
        return Err(Error::Matching(format!(
            "{op}: {g} ground-truth items exceed {n} prediction slots"
        )));
    }
    Ok(())
}

/// Hungarian-matched detection loss.
pub fn hungarian_loss_boxes(
    tape: &mut Tape,
    gt: &[BBox],
    pred: &TapedPrediction,
    w: &LossWeights,
) -> Result<SetLoss> {
    let detached = pred.detach(tape);
    check_capacity("hungarian_loss_boxes", gt.len(), detached.num_slots())?;
    let costs = box_cost_matrix(gt, &detached, w.lambda_iou, w.lambda_l1)?;
    let assignment = hungarian_solve(&costs)?;
    let classes = vec![PERSON_CLASS; gt.len()];
    set_loss(tape, pred, assignment, &classes, w, |tape, rows, a| {
        let ordered: Vec<BBox> = a.pairs.iter().map(|&(g, _)| gt[g]).collect();
        box_losses(tape, &ordered, rows, w)
    })
}

/// Hungarian-matched keypoint loss; `gt` must hold annotated keypoints only.
pub fn hungarian_loss_keypoints(
    tape: &mut Tape,
    gt: &[Keypoint],
    pred: &TapedPrediction,
    w: &LossWeights,
) -> Result<SetLoss> {
    let detached = pred.detach(tape);
    check_capacity("hungarian_loss_keypoints", gt.len(), detached.num_slots())?;
    let costs = keypoint_cost_matrix(gt, &detached, w.lambda_l1)?;
    let assignment = hungarian_solve(&costs)?;
    let classes: Vec<usize> = gt.iter().map(|k| k.class_id).collect();
    set_loss(tape, pred, assignment, &classes, w, |tape, rows, a| {
        let ordered: Vec<(f64, f64)> = a.pairs.iter().map(|&(g, _)| (gt[g].x, gt[g].y)).collect();
        keypoint_losses(tape, &ordered, rows, w)
    })
}
