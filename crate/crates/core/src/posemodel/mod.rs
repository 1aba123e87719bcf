//! Two-stage set predictor: a person detector followed by a per-crop
//! keypoint predictor, both built from a patch stem, a transformer encoder
//! and a decoder over learned queries.

mod config;
mod inference;
mod model;
mod prediction;

pub use config::StageConfig;
pub use inference::{
    detect_boxes, keypoints_for_boxes, person_crop, two_stage_inference, PersonPrediction,
    CROP_EXPANSION, DEFAULT_BOX_THRESHOLD, DEFAULT_REPORT_THRESHOLD,
};
pub use model::{patchify, positional_encoding, SetPredictor, STEM_PREFIX};
pub use prediction::{PredictionSet, TapedPrediction};
