use serde::{Deserialize, Serialize};

pub const NUM_JOINTS: usize = 17;

/// Canonical COCO joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// COCO skeleton edges (1-based in the COCO category record, 0-based here).
pub const SKELETON: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// Joint id under a horizontal mirror (left ↔ right, nose fixed).
pub fn flip_partner(class_id: usize) -> usize {
    match class_id {
        0 => 0,
        c if c % 2 == 1 => c + 1,
        c => c - 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Visibility {
    #[default]
    Absent,
    Occluded,
    Visible,
}

impl Visibility {
    pub fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Absent),
            1 => Some(Self::Occluded),
            2 => Some(Self::Visible),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Absent => 0,
            Self::Occluded => 1,
            Self::Visible => 2,
        }
    }

    pub fn is_annotated(self) -> bool {
        self != Self::Absent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, class_id: usize, visibility: Visibility) -> Self {
        Self {
            x,
            y,
            class_id,
            visibility,
        }
    }

    pub fn absent(class_id: usize) -> Self {
        Self::new(0.0, 0.0, class_id, Visibility::Absent)
    }

    pub fn is_annotated(&self) -> bool {
        self.visibility.is_annotated()
    }
}

/// Seventeen keypoint slots, slot `i` holding joint `i`.
pub type Skeleton = [Keypoint; NUM_JOINTS];

pub fn empty_skeleton() -> Skeleton {
    std::array::from_fn(Keypoint::absent)
}

/// Reorders slots under a mirror so slot `i` again holds joint `i`.
pub fn flip_skeleton_classes(kps: &Skeleton) -> Skeleton {
    std::array::from_fn(|i| {
        let src = kps[flip_partner(i)];
        Keypoint { class_id: i, ..src }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_partner_is_an_involution_pairing_left_and_right() {
        for c in 0..NUM_JOINTS {
            let p = flip_partner(c);
            assert_eq!(flip_partner(p), c);
            if c > 0 {
                assert_ne!(p, c);
                let (a, b) = (JOINT_NAMES[c], JOINT_NAMES[p]);
                assert_eq!(a.replace("left", "right"), b.replace("left", "right"));
            }
        }
    }

    #[test]
    fn visibility_codes() {
        for v in 0..3 {
            assert_eq!(Visibility::from_code(v).unwrap().code(), v);
        }
        assert!(Visibility::from_code(3).is_none());
    }
}
