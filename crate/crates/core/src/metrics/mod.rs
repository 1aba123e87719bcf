//! COCO-protocol detection and keypoint evaluation, and NDCG.

mod coco;
mod ndcg;
mod oks;
mod pipeline;

pub use coco::{
    evaluate, iou_thresholds, Detection, EvalImage, EvalMode, EvalParams, EvalResult, GtInstance,
    MEDIUM_MAX, SMALL_MAX,
};
pub use ndcg::ndcg_at_k;
pub use oks::{oks, OksParams, COCO_SIGMAS};
pub use pipeline::{box_detections, eval_images, pose_detections, BoxSource};
