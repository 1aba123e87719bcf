use crate::error::{Error, Result};
use crate::geometry::{Skeleton, NUM_JOINTS};
use serde::{Deserialize, Serialize};

/// COCO per-joint standard deviations, in joint order.
pub const COCO_SIGMAS: [f64; NUM_JOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Per-joint falloff constants `k_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub k: [f64; NUM_JOINTS],
}

impl Default for OksParams {
    /// `k_i = 2σ_i` from the COCO keypoint evaluation.
    fn default() -> Self {
        Self {
            k: COCO_SIGMAS.map(|s| 2.0 * s),
        }
    }
}

impl OksParams {
    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::Metrics(format!(
                "falloff constants must be positive: {:?}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Object keypoint similarity of `pred` against `gt`.
///
/// Coordinates and `area` must share units (`area` in squared units). Joints
/// without a ground-truth annotation are skipped.
pub fn oks(gt: &Skeleton, area: f64, pred: &Skeleton, p: &OksParams) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (g, d)) in gt.iter().zip(pred).enumerate() {
        if !g.is_annotated() {
            continue;
        }
        let d2 = (g.x - d.x).powi(2) + (g.y - d.y).powi(2);
        sum += (-d2 / (2.0 * area * p.k[i] * p.k[i])).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metrics("oks needs at least one visible gt joint".into()));
    }
    if !(area > 0.0) {
        return Err(Error::Metrics(format!("oks needs positive area, got {area}")));
    }
    Ok(sum / n as f64)
}
