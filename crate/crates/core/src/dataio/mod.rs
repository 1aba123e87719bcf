//! Scene records, COCO keypoint JSON, annotation rules and the synthetic
//! stick-figure generator.

pub mod coco;
mod rules;
mod scene;
mod stickworld;

pub use coco::{load_coco, save_coco, CocoFile};
pub use rules::{split_dataset, validate_popart_rules, Rule, Violation, MAX_FIGURES, MIN_KEYPOINTS};
pub use scene::{DomainTag, Person, Raster, SceneRecord};
pub use stickworld::{generate_range, generate_scene, generate_stickworld, StickWorldConfig};
