//! Boxes, keypoints, augmentations and crops.
//!
//! Boxes are stored in normalized center/size form; corner form appears only
//! inside overlap computations and at the COCO boundary.

mod aug;
mod boxes;
mod crop;
mod keypoints;

pub use aug::{apply_aug, project_labels, AffineAug, AugConfig, Labels, Projected};
pub use boxes::{giou, giou_corners, iou, iou_corners, BBox, Corners};
pub use crop::{crop_box, crop_region, Crop, CropFrame};
pub use keypoints::{
    empty_skeleton, flip_partner, flip_skeleton_classes, Keypoint, Skeleton, Visibility,
    JOINT_NAMES, NUM_JOINTS, SKELETON,
};
