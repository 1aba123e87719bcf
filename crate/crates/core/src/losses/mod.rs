//! Training objectives for both stages.
//!
//! Assignments are solved on detached values; every loss is then built on
//! the tape so gradients flow into class probabilities and geometry.

mod set;
mod unsup;

pub use set::{
    box_loss, box_losses, hungarian_loss_boxes, hungarian_loss_keypoints, keypoint_losses, SetLoss,
};
pub use unsup::{select_pseudo_labels, unsup_losses, Stage, UnsupLoss};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Lower clip for probabilities inside `log`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_u: f64,
    pub tau: f64,
    /// Multiplier on background cross-entropy terms.
    #[serde(default = "one")]
    pub bg_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            lambda_u: 0.5,
            tau: 0.9,
            bg_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.lambda_iou,
            self.lambda_l1,
            self.lambda_u,
            self.bg_weight,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative: {self:?}"
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Slot tallies for one set loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    /// Slots matched to a (pseudo) label.
    pub positive: usize,
    /// Slots trained towards background.
    pub negative: usize,
    /// Slots that contribute nothing.
    pub ignored: usize,
}

impl SlotCounts {
    pub fn total(&self) -> usize {
        self.positive + self.negative + self.ignored
    }

    pub fn add(&mut self, other: SlotCounts) {
        self.positive += other.positive;
        self.negative += other.negative;
        self.ignored += other.ignored;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub total: f64,
    pub labeled: SlotCounts,
    pub unlabeled: SlotCounts,
}

/// `total = sup + λ_u·(unsup_reg + unsup_cls)`.
pub fn total_loss(
    tape: &mut Tape,
    sup: Var,
    unsup_reg: Var,
    unsup_cls: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    for v in [sup, unsup_reg, unsup_cls] {
        if !tape.value(v).is_scalar() {
            return Err(Error::NonScalarLoss(tape.shape(v).to_vec()));
        }
    }
    let u = tape.add(unsup_reg, unsup_cls)?;
    let u = tape.scale(u, w.lambda_u);
    let total = tape.add(sup, u)?;
    let breakdown = LossBreakdown {
        supervised: tape.item(sup),
        unsup_cls: tape.item(unsup_cls),
        unsup_reg: tape.item(unsup_reg),
        total: tape.item(total),
        ..Default::default()
    };
    Ok((total, breakdown))
}

/// `−Σ_j weight_j · log p̂_j(target_j)` over slots with a target.
pub(crate) fn weighted_nll(
    tape: &mut Tape,
    class_probs: Var,
    targets: &[Option<(usize, f64)>],
) -> Result<Var> {
    let classes = tape.shape(class_probs)[1];
    let mut idx = Vec::new();
    let mut weights = Vec::new();
    for (slot, t) in targets.iter().enumerate() {
        if let Some((c, wgt)) = *t {
            idx.push(slot * classes + c);
            weights.push(wgt);
        }
    }
    if idx.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let p = tape.clamp(class_probs, PROB_FLOOR, 1.0);
    let logp = tape.log(p);
    let picked = tape.gather(logp, &idx)?;
    let wv = tape.constant(crate::autodiff::Tensor::vector(weights));
    let weighted = tape.mul(picked, wv)?;
    let s = tape.sum(weighted);
    Ok(tape.neg(s))
}
