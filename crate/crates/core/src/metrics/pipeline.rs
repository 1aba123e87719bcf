use super::coco::{Detection, EvalImage, GtInstance};
use crate::dataio::SceneRecord;
use crate::error::Result;
use crate::geometry::empty_skeleton;
use crate::posemodel::{detect_boxes, keypoints_for_boxes, SetPredictor};

/// Ground truth of `scenes` in evaluator form.
pub fn eval_images(scenes: &[SceneRecord]) -> Vec<EvalImage> {
    scenes
        .iter()
        .map(|s| EvalImage {
            id: s.id.clone(),
            height: s.raster.height(),
            width: s.raster.width(),
            gts: s
                .persons
                .iter()
                .map(|p| GtInstance {
                    bbox: p.bbox,
                    keypoints: p.keypoints,
                })
                .collect(),
        })
        .collect()
}

/// Every detector box scoring at least `min_score`.
pub fn box_detections(
    detector: &SetPredictor,
    scenes: &[SceneRecord],
    min_score: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        for (bbox, score) in detect_boxes(detector, &s.raster, min_score)? {
            out.push(Detection {
                image_id: s.id.clone(),
                bbox,
                keypoints: empty_skeleton(),
                score,
            });
        }
    }
    Ok(out)
}

/// Where the keypoint stage gets its person boxes.
#[derive(Clone, Copy, Debug)]
pub enum BoxSource<'a> {
    /// Detector boxes scoring at least the threshold.
    Detector(&'a SetPredictor, f64),
    /// The annotated boxes, each with score 1.
    GroundTruth,
}

/// Two-stage pose predictions. A person's score is its box score times the
/// mean joint probability.
pub fn pose_detections(
    scenes: &[SceneRecord],
    boxes: BoxSource,
    keypointer: &SetPredictor,
    report_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        let found = match boxes {
            BoxSource::Detector(d, threshold) => detect_boxes(d, &s.raster, threshold)?,
            BoxSource::GroundTruth => s.persons.iter().map(|p| (p.bbox, 1.0)).collect(),
        };
        for person in keypoints_for_boxes(&s.raster, &found, keypointer, report_threshold)? {
            let joint = person.keypoint_scores.iter().sum::<f64>() / person.keypoint_scores.len() as f64;
            out.push(Detection {
                image_id: s.id.clone(),
                bbox: person.bbox,
                keypoints: person.keypoints,
                score: person.score * joint,
            });
        }
    }
    Ok(out)
}
