use crate::dataio::{Person, SceneRecord};
use crate::error::Result;
use crate::geometry::{crop_region, empty_skeleton, BBox, Corners, Skeleton};
use crate::posemodel::{detect_boxes, SetPredictor, CROP_EXPANSION};

/// Box covering a whole crop; keypoint-stage scenes carry one such person.
pub const FULL_FRAME: BBox = BBox {
    cx: 0.5,
    cy: 0.5,
    w: 1.0,
    h: 1.0,
};

fn region(bbox: &BBox) -> Corners {
    bbox.expanded(CROP_EXPANSION).clip_unit()
}

fn crop_scene(
    scene: &SceneRecord,
    tag: String,
    bbox: &BBox,
    keypoints: Option<&Skeleton>,
    input_size: (usize, usize),
) -> Result<SceneRecord> {
    let kps = keypoints.copied().unwrap_or_else(empty_skeleton);
    let crop = crop_region(&scene.raster, region(bbox), &kps, input_size)?;
    Ok(SceneRecord {
        id: format!("{}/{tag}", scene.id),
        raster: crop.raster,
        persons: match keypoints {
            Some(_) => vec![Person::new(FULL_FRAME, crop.keypoints)],
            None => Vec::new(),
        },
        domain: scene.domain,
    })
}

/// One labeled keypoint-stage scene per person with annotated keypoints,
/// cut around its ground-truth box. Box-only persons are skipped.
pub fn gt_crop_scenes(scenes: &[SceneRecord], input_size: (usize, usize)) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for scene in scenes {
        for (i, p) in scene.persons.iter().enumerate() {
            if p.num_annotated() == 0 {
                continue;
            }
            out.push(crop_scene(scene, format!("p{i}"), &p.bbox, Some(&p.keypoints), input_size)?);
        }
    }
    Ok(out)
}

/// Unlabeled keypoint-stage scenes cut around every detector box with
/// person probability at least `threshold`.
pub fn pseudo_label_boxes_for_stage_two(
    detector: &SetPredictor,
    scenes: &[SceneRecord],
    threshold: f64,
    input_size: (usize, usize),
) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for scene in scenes {
        for (i, (bbox, _)) in detect_boxes(detector, &scene.raster, threshold)?
            .iter()
            .enumerate()
        {
            out.push(crop_scene(scene, format!("d{i}"), bbox, None, input_size)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_stickworld, StickWorldConfig};
    use crate::posemodel::StageConfig;

    fn detector() -> SetPredictor {
        let cfg = StageConfig {
            embed_dim: 16,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            ..StageConfig::detector()
        };
        SetPredictor::new(cfg, 4).unwrap()
    }

    #[test]
    fn gt_crops_keep_every_joint_of_source_figures() {
        let scenes = generate_stickworld(&StickWorldConfig::source(1), 4).unwrap();
        let crops = gt_crop_scenes(&scenes, (64, 48)).unwrap();
        let persons: usize = scenes.iter().map(|s| s.persons.len()).sum();
        assert_eq!(crops.len(), persons);
        for c in &crops {
            assert_eq!((c.raster.height(), c.raster.width()), (64, 48));
            assert_eq!(c.persons.len(), 1);
            assert_eq!(c.persons[0].num_annotated(), 17);
            c.validate().unwrap();
        }
    }

    #[test]
    fn box_only_persons_get_no_crop() {
        let mut scenes = generate_stickworld(&StickWorldConfig::source(1), 1).unwrap();
        let n = scenes[0].persons.len();
        scenes[0].persons.push(Person::box_only(BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()));
        assert_eq!(gt_crop_scenes(&scenes, (64, 48)).unwrap().len(), n);
    }

    #[test]
    fn confident_box_count_is_monotone_in_threshold() {
        let d = detector();
        let scenes = generate_stickworld(&StickWorldConfig::target(2), 3).unwrap();
        let mut last = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0, 1.01] {
            let n = pseudo_label_boxes_for_stage_two(&d, &scenes, t, (64, 48))
                .unwrap()
                .len();
            assert!(n <= last);
            last = n;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn pseudo_crops_are_unlabeled() {
        let d = detector();
        let scenes = generate_stickworld(&StickWorldConfig::target(2), 2).unwrap();
        let crops = pseudo_label_boxes_for_stage_two(&d, &scenes, 0.0, (64, 48)).unwrap();
        assert_eq!(crops.len(), 2 * d.cfg.num_queries - invalid(&d, &scenes));
        assert!(crops.iter().all(|c| c.persons.is_empty()));
    }

    fn invalid(d: &SetPredictor, scenes: &[SceneRecord]) -> usize {
        scenes
            .iter()
            .map(|s| {
                let p = d.predict(&s.raster).unwrap();
                (0..p.num_slots()).filter(|&j| p.bbox(j).validate().is_err()).count()
            })
            .sum()
    }
}
