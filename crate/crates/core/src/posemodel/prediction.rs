use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Detached output of one stage: `N` slots, each with a class distribution
/// (background last) and sigmoid-range geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `N × num_classes`, rows sum to one.
    pub class_probs: Tensor,
    /// `N × 4` boxes (cx, cy, w, h) or `N × 2` keypoints (x, y).
    pub geometry: Tensor,
}

/// The same output while still on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapedPrediction {
    pub class_probs: Var,
    pub geometry: Var,
}

impl TapedPrediction {
    pub fn detach(&self, tape: &Tape) -> PredictionSet {
        PredictionSet {
            class_probs: tape.value(self.class_probs).clone(),
            geometry: tape.value(self.geometry).clone(),
        }
    }
}

impl PredictionSet {
    pub fn new(class_probs: Tensor, geometry: Tensor) -> Result<Self> {
        if class_probs.ndim() != 2 || geometry.ndim() != 2 || class_probs.rows() != geometry.rows()
        {
            return Err(Error::ShapeMismatch {
                op: "prediction_set",
                lhs: class_probs.shape().to_vec(),
                rhs: geometry.shape().to_vec(),
            });
        }
        Ok(Self {
            class_probs,
            geometry,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.cols()
    }

    /// Index of the background class.
    pub fn background(&self) -> usize {
        self.num_classes() - 1
    }

    pub fn prob(&self, slot: usize, class: usize) -> f64 {
        self.class_probs.get2(slot, class)
    }

    pub fn background_prob(&self, slot: usize) -> f64 {
        self.prob(slot, self.background())
    }

    /// Highest non-background probability of a slot and its class.
    pub fn confidence(&self, slot: usize) -> (usize, f64) {
        let row = self.class_probs.row(slot);
        row[..row.len() - 1]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| {
                if p > best.1 {
                    (c, p)
                } else {
                    best
                }
            })
    }

    /// True when the argmax over all classes, background included, is a
    /// foreground class.
    pub fn is_foreground(&self, slot: usize) -> bool {
        let (_, p) = self.confidence(slot);
        p > self.background_prob(slot)
    }

    pub fn bbox(&self, slot: usize) -> BBox {
        let g = self.geometry.row(slot);
        BBox::from_array([g[0], g[1], g[2], g[3]])
    }

    pub fn point(&self, slot: usize) -> (f64, f64) {
        let g = self.geometry.row(slot);
        (g[0], g[1])
    }
}
