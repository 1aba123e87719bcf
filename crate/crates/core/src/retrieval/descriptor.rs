use crate::error::{Error, Result};
use crate::geometry::{Skeleton, SKELETON};
use serde::{Deserialize, Serialize};

pub const NUM_PAIRS: usize = 26;
pub const DESCRIPTOR_DIM: usize = 2 * NUM_PAIRS;
/// Tag stored with every index; bump when the pair table changes.
pub const DESCRIPTOR_VERSION: &str = "orient-pairs-v1";

/// Cross-body pairs appended to the skeleton edges. Shoulders and hips are
/// already skeleton edges, so elbows and knees take their places.
const CROSS_PAIRS: [(usize, usize); 7] = [
    (5, 12),
    (6, 11),
    (3, 4),
    (9, 10),
    (15, 16),
    (7, 8),
    (13, 14),
];

/// Joint pairs whose orientations form the descriptor.
pub fn pair_table() -> [(usize, usize); NUM_PAIRS] {
    let mut t = [(0, 0); NUM_PAIRS];
    for (slot, &p) in t.iter_mut().zip(SKELETON.iter().chain(&CROSS_PAIRS)) {
        *slot = p;
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDescriptor {
    /// `(cos θ, sin θ)` per pair, zero where the pair is missing.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Unit direction of `(dx, dy)`. The result depends on the coordinate
/// differences only through their ratio and signs, so it is unchanged by
/// any positive rescaling that the differences represent exactly.
fn direction(dx: f64, dy: f64) -> Option<(f64, f64)> {
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    if dx.abs() >= dy.abs() {
        let t = dy / dx;
        let c = dx.signum() / (1.0 + t * t).sqrt();
        Some((c, t * c))
    } else {
        let t = dx / dy;
        let s = dy.signum() / (1.0 + t * t).sqrt();
        Some((t * s, s))
    }
}

pub fn compute_descriptor(keypoints: &Skeleton) -> Result<PoseDescriptor> {
    let annotated = keypoints.iter().filter(|k| k.is_annotated()).count();
    if annotated < 2 {
        return Err(Error::Retrieval(format!(
            "descriptor needs at least 2 annotated keypoints, got {annotated}"
        )));
    }
    let mut values = vec![0.0; DESCRIPTOR_DIM];
    let mut valid = vec![false; NUM_PAIRS];
    for (i, &(a, b)) in pair_table().iter().enumerate() {
        let (p, q) = (&keypoints[a], &keypoints[b]);
        if !(p.is_annotated() && q.is_annotated()) {
            continue;
        }
        if let Some((c, s)) = direction(q.x - p.x, q.y - p.y) {
            values[2 * i] = c;
            values[2 * i + 1] = s;
            valid[i] = true;
        }
    }
    Ok(PoseDescriptor { values, valid })
}

impl PoseDescriptor {
    pub fn check(&self) -> Result<()> {
        if self.values.len() != DESCRIPTOR_DIM || self.valid.len() != NUM_PAIRS {
            return Err(Error::Retrieval(format!(
                "descriptor has {} values and {} mask bits, expected {DESCRIPTOR_DIM} and {NUM_PAIRS}",
                self.values.len(),
                self.valid.len()
            )));
        }
        Ok(())
    }

    pub fn distance(&self, other: &PoseDescriptor) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::Retrieval(format!(
                "descriptor dimensions differ: {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{flip_partner, Keypoint, Visibility, NUM_JOINTS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(coords: &[(f64, f64)], present: &[bool]) -> Skeleton {
        let mut s = [Keypoint::absent(0); NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            s[j] = if present[j] {
                Keypoint::new(coords[j].0, coords[j].1, j, Visibility::Visible)
            } else {
                Keypoint::absent(j)
            };
        }
        s
    }

    #[test]
    fn pair_table_has_distinct_unordered_pairs() {
        let t = pair_table();
        for (i, a) in t.iter().enumerate() {
            assert_ne!(a.0, a.1);
            for b in &t[i + 1..] {
                assert!(a != b && (a.1, a.0) != *b, "{a:?} repeated");
            }
        }
    }

    #[test]
    fn unit_vectors_and_zero_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords: Vec<(f64, f64)> = (0..NUM_JOINTS).map(|_| (rng.random(), rng.random())).collect();
        let mut present = [true; NUM_JOINTS];
        present[9] = false;
        let d = compute_descriptor(&pose(&coords, &present)).unwrap();
        for (i, &(a, b)) in pair_table().iter().enumerate() {
            let (c, s) = (d.values[2 * i], d.values[2 * i + 1]);
            if a == 9 || b == 9 {
                assert!(!d.valid[i] && c == 0.0 && s == 0.0);
            } else {
                assert!(d.valid[i]);
                assert!(((c * c + s * s).sqrt() - 1.0).abs() < 1e-9);
                let (dx, dy) = (coords[b].0 - coords[a].0, coords[b].1 - coords[a].1);
                let theta = dy.atan2(dx);
                assert!((c - theta.cos()).abs() < 1e-12 && (s - theta.sin()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_keypoints_is_an_error() {
        let coords = vec![(0.5, 0.5); NUM_JOINTS];
        let mut present = [false; NUM_JOINTS];
        present[0] = true;
        assert!(compute_descriptor(&pose(&coords, &present)).is_err());
    }

    #[test]
    fn reflection_negates_cosines_on_remapped_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<(f64, f64)> = (0..NUM_JOINTS).map(|_| (rng.random(), rng.random())).collect();
        let present = [true; NUM_JOINTS];
        let mirrored: Vec<(f64, f64)> = (0..NUM_JOINTS)
            .map(|j| {
                let (x, y) = coords[flip_partner(j)];
                (1.0 - x, y)
            })
            .collect();
        let d = compute_descriptor(&pose(&coords, &present)).unwrap();
        let m = compute_descriptor(&pose(&mirrored, &present)).unwrap();
        let table = pair_table();
        for (i, &(a, b)) in table.iter().enumerate() {
            let (fa, fb) = (flip_partner(a), flip_partner(b));
            let (j, sign) = match table.iter().position(|&p| p == (fa, fb)) {
                Some(j) => (j, 1.0),
                None => (table.iter().position(|&p| p == (fb, fa)).expect("table closed under mirroring"), -1.0),
            };
            let (c, s) = (d.values[2 * i], d.values[2 * i + 1]);
            assert!((m.values[2 * j] - sign * -c).abs() < 1e-12);
            assert!((m.values[2 * j + 1] - sign * s).abs() < 1e-12);
        }
    }

    #[test]
    fn nearer_of_two_by_hand() {
        let mut a = PoseDescriptor { values: vec![0.0; DESCRIPTOR_DIM], valid: vec![false; NUM_PAIRS] };
        let mut b = a.clone();
        a.values[0] = 1.0;
        b.values[0] = 0.6;
        b.values[1] = 0.8;
        assert!((a.distance(&b).unwrap() - (0.16f64 + 0.64).sqrt()).abs() < 1e-15);
        let short = PoseDescriptor { values: vec![0.0; 4], valid: vec![false; 2] };
        assert!(a.distance(&short).is_err());
    }

    /// Coordinates on a dyadic grid so that shifting and scaling by grid
    /// values are exact in floating point.
    fn grid_pose(rng: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, [bool; NUM_JOINTS]) {
        let g = |rng: &mut ChaCha8Rng| rng.random_range(0..1u32 << 20) as f64 / (1u64 << 20) as f64;
        let coords = (0..NUM_JOINTS).map(|_| (g(rng), g(rng))).collect();
        let mut present = [true; NUM_JOINTS];
        for p in present.iter_mut() {
            *p = rng.random_bool(0.8);
        }
        present[0] = true;
        present[1] = true;
        (coords, present)
    }

    #[test]
    fn exactly_invariant_to_representable_shift_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (coords, present) = grid_pose(&mut rng);
            let base = compute_descriptor(&pose(&coords, &present)).unwrap();
            let (tx, ty) = (rng.random_range(-1024i32..1024) as f64 / 1024.0, rng.random_range(-1024i32..1024) as f64 / 1024.0);
            let k = rng.random_range(1u32..256) as f64 / 16.0;
            let shifted: Vec<_> = coords.iter().map(|&(x, y)| (x + tx, y + ty)).collect();
            let scaled: Vec<_> = coords.iter().map(|&(x, y)| (k * x, k * y)).collect();
            assert_eq!(compute_descriptor(&pose(&shifted, &present)).unwrap(), base);
            assert_eq!(compute_descriptor(&pose(&scaled, &present)).unwrap(), base);
        }
    }

    proptest! {
        #[test]
        fn invariant_to_any_shift_and_scale_to_rounding(seed in any::<u64>(), tx in -5.0f64..5.0, ty in -5.0f64..5.0, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (coords, present) = grid_pose(&mut rng);
            let base = compute_descriptor(&pose(&coords, &present)).unwrap();
            let moved: Vec<_> = coords.iter().map(|&(x, y)| (k * x + tx, k * y + ty)).collect();
            let d = compute_descriptor(&pose(&moved, &present)).unwrap();
            prop_assert_eq!(&d.valid, &base.valid);
            prop_assert!(d.distance(&base).unwrap() < 1e-6);
        }

        #[test]
        fn distance_is_symmetric_and_masked_slots_are_silent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ca, mut present) = grid_pose(&mut rng);
            let (cb, _) = grid_pose(&mut rng);
            present[2] = rng.random_bool(0.5);
            let a = compute_descriptor(&pose(&ca, &present)).unwrap();
            let b = compute_descriptor(&pose(&cb, &present)).unwrap();
            let dab = a.distance(&b).unwrap();
            prop_assert_eq!(dab, b.distance(&a).unwrap());
            prop_assert_eq!(a.distance(&a).unwrap(), 0.0);
            let shared: f64 = (0..NUM_PAIRS)
                .filter(|&i| a.valid[i] && b.valid[i])
                .map(|i| (a.values[2 * i] - b.values[2 * i]).powi(2) + (a.values[2 * i + 1] - b.values[2 * i + 1]).powi(2))
                .sum();
            prop_assert!((dab * dab - shared).abs() < 1e-9);
        }
    }
}
