use super::model::SetPredictor;
use crate::dataio::Raster;
use crate::error::{Error, Result};
use crate::geometry::{
    crop_region, empty_skeleton, BBox, Crop, Keypoint, Skeleton, Visibility, NUM_JOINTS,
};
use crate::matching::{inference_keypoint_assignment, PERSON_CLASS};
use serde::{Deserialize, Serialize};

/// Crops for the keypoint stage cover the box scaled by this factor.
pub const CROP_EXPANSION: f64 = 1.1;
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.5;
/// Joint matches below this probability are reported absent.
pub const DEFAULT_REPORT_THRESHOLD: f64 = 0.1;

/// One detected person in image coordinates.
///
/// Every keypoint carries coordinates; `visibility` is `Visible` for joints
/// reported present and `Absent` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonPrediction {
    pub bbox: BBox,
    pub score: f64,
    pub keypoints: Skeleton,
    pub keypoint_scores: [f64; NUM_JOINTS],
}

/// Keypoint-stage input for one person box.
pub fn person_crop(
    raster: &Raster,
    bbox: &BBox,
    keypoints: &Skeleton,
    keypointer: &SetPredictor,
) -> Result<Crop> {
    let region = bbox.expanded(CROP_EXPANSION).clip_unit();
    crop_region(raster, region, keypoints, keypointer.cfg.input_size)
}

/// Confident person boxes from the detector, highest score first.
pub fn detect_boxes(
    detector: &SetPredictor,
    raster: &Raster,
    box_threshold: f64,
) -> Result<Vec<(BBox, f64)>> {
    if detector.cfg.geometry_dim != 4 {
        return Err(Error::Model("detector must predict boxes".into()));
    }
    let pred = detector.predict(raster)?;
    let mut out: Vec<(BBox, f64)> = (0..pred.num_slots())
        .map(|j| (pred.bbox(j), pred.prob(j, PERSON_CLASS)))
        .filter(|(b, p)| *p >= box_threshold && b.validate().is_ok())
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

/// Runs the keypoint stage on each given box and maps joints back to image
/// coordinates.
pub fn keypoints_for_boxes(
    raster: &Raster,
    boxes: &[(BBox, f64)],
    keypointer: &SetPredictor,
    report_threshold: f64,
) -> Result<Vec<PersonPrediction>> {
    if keypointer.cfg.geometry_dim != 2 {
        return Err(Error::Model("keypointer must predict points".into()));
    }
    let mut out = Vec::with_capacity(boxes.len());
    for &(bbox, score) in boxes {
        let crop = person_crop(raster, &bbox, &empty_skeleton(), keypointer)?;
        let pred = keypointer.predict(&crop.raster)?;
        let joints = inference_keypoint_assignment(&pred, report_threshold)?;
        let keypoints = std::array::from_fn(|c| {
            let (u, v) = pred.point(joints.slot[c]);
            let (x, y) = crop.frame.to_image(u, v);
            let vis = if joints.present[c] {
                Visibility::Visible
            } else {
                Visibility::Absent
            };
            Keypoint::new(x, y, c, vis)
        });
        out.push(PersonPrediction {
            bbox,
            score,
            keypoints,
            keypoint_scores: joints.prob,
        });
    }
    Ok(out)
}

/// Detector, box filter, per-box crop, keypoint stage and joint assignment.
pub fn two_stage_inference(
    raster: &Raster,
    detector: &SetPredictor,
    keypointer: &SetPredictor,
    box_threshold: f64,
    report_threshold: f64,
) -> Result<Vec<PersonPrediction>> {
    let boxes = detect_boxes(detector, raster, box_threshold)?;
    keypoints_for_boxes(raster, &boxes, keypointer, report_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posemodel::StageConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> (SetPredictor, SetPredictor) {
        let shrink = |c: StageConfig| StageConfig {
            embed_dim: 16,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            ..c
        };
        (
            SetPredictor::new(shrink(StageConfig::detector()), 1).unwrap(),
            SetPredictor::new(shrink(StageConfig::keypointer()), 2).unwrap(),
        )
    }

    fn raster(seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_data(
            64,
            64,
            (0..4096).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn threshold_above_every_probability_yields_nothing() {
        let (d, k) = models();
        let out = two_stage_inference(&raster(0), &d, &k, 1.0 + 1e-9, 0.1).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn keypoints_stay_inside_the_expanded_box() {
        let (d, k) = models();
        let r = raster(3);
        let out = two_stage_inference(&r, &d, &k, 0.0, 0.1).unwrap();
        assert_eq!(out.len(), d.cfg.num_queries);
        for person in &out {
            let c = person.bbox.expanded(CROP_EXPANSION).clip_unit();
            for kp in &person.keypoints {
                assert!(kp.x >= c.x0 - 1e-12 && kp.x <= c.x1 + 1e-12);
                assert!(kp.y >= c.y0 - 1e-12 && kp.y <= c.y1 + 1e-12);
            }
            let mut classes: Vec<usize> = person.keypoints.iter().map(|k| k.class_id).collect();
            classes.dedup();
            assert_eq!(classes, (0..NUM_JOINTS).collect::<Vec<_>>());
        }
    }

    #[test]
    fn detections_are_sorted_by_score() {
        let (d, _) = models();
        let b = detect_boxes(&d, &raster(5), 0.0).unwrap();
        assert!(b.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
