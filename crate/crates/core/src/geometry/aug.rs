use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::boxes::{BBox, Corners};
use super::keypoints::{flip_partner, flip_skeleton_classes, Keypoint};
use crate::dataio::{Person, SceneRecord};
use crate::error::{Error, Result};

/// Coordinate-invertible augmentation. Noise and occlusion touch pixels only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineAug {
    pub flip: bool,
    pub scale: f64,
    pub translate: (f64, f64),
    pub noise_sigma: f64,
    pub occlusion_rects: Vec<BBox>,
    /// Seeds the pixel-noise generator.
    pub noise_seed: u64,
}

impl Default for AffineAug {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineAug {
    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            translate: (0.0, 0.0),
            noise_sigma: 0.0,
            occlusion_rects: Vec::new(),
            noise_seed: 0,
        }
    }

    pub fn flip() -> Self {
        Self {
            flip: true,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && self.scale == 1.0
            && self.translate == (0.0, 0.0)
            && self.noise_sigma == 0.0
            && self.occlusion_rects.is_empty()
    }

    fn check(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidAugmentation(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Maps a point from the original frame into the augmented frame.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { 1.0 - x } else { x };
        (
            (x - 0.5) * self.scale + 0.5 + self.translate.0,
            (y - 0.5) * self.scale + 0.5 + self.translate.1,
        )
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let xo = (x - 0.5 - self.translate.0) / self.scale + 0.5;
        let yo = (y - 0.5 - self.translate.1) / self.scale + 0.5;
        (if self.flip { 1.0 - xo } else { xo }, yo)
    }

    fn map_corners(c: &Corners, f: impl Fn(f64, f64) -> (f64, f64)) -> Corners {
        let (ax, ay) = f(c.x0, c.y0);
        let (bx, by) = f(c.x1, c.y1);
        Corners::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }
}

fn in_unit(x: f64, y: f64) -> bool {
    (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)
}

/// Clips to the unit square; `None` when the center left the frame or
/// nothing of the box remains.
fn clip_box(c: Corners) -> Option<BBox> {
    let center = c.to_center();
    if !in_unit(center.cx, center.cy) {
        return None;
    }
    let clipped = c.clip_unit();
    if clipped.width() <= 1e-6 || clipped.height() <= 1e-6 {
        return None;
    }
    Some(clipped.to_center())
}

/// Applies `aug` to the raster and every annotation of `scene`.
///
/// Mirroring swaps left/right joint slots; keypoints leaving the frame become
/// absent; persons whose box center leaves the frame are dropped.
pub fn apply_aug(aug: &AffineAug, scene: &SceneRecord) -> Result<SceneRecord> {
    aug.check()?;
    if aug.is_identity() {
        return Ok(scene.clone());
    }
    let src = &scene.raster;
    let mut raster = src.resample(src.height(), src.width(), |u, v| aug.inverse(u, v));
    if aug.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(aug.noise_seed);
        let normal = Normal::new(0.0, aug.noise_sigma)
            .map_err(|e| Error::InvalidAugmentation(e.to_string()))?;
        for v in raster.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let (h, w) = (raster.height(), raster.width());
    for rect in &aug.occlusion_rects {
        let c = rect.corners();
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64;
            if y < c.y0 || y > c.y1 {
                continue;
            }
            for col in 0..w {
                let x = (col as f64 + 0.5) / w as f64;
                if x >= c.x0 && x <= c.x1 {
                    raster.set(r, col, 0.0);
                }
            }
        }
    }

    let persons = scene
        .persons
        .iter()
        .filter_map(|p| {
            let bbox = clip_box(AffineAug::map_corners(&p.bbox.corners(), |x, y| {
                aug.forward(x, y)
            }))?;
            let mut kps = p.keypoints;
            for k in kps.iter_mut() {
                if !k.is_annotated() {
                    continue;
                }
                let (x, y) = aug.forward(k.x, k.y);
                if in_unit(x, y) {
                    k.x = x;
                    k.y = y;
                } else {
                    *k = Keypoint::absent(k.class_id);
                }
            }
            if aug.flip {
                kps = flip_skeleton_classes(&kps);
            }
            Some(Person::new(bbox, kps))
        })
        .collect();

    Ok(SceneRecord {
        id: scene.id.clone(),
        raster,
        persons,
        domain: scene.domain,
    })
}

/// Labels expressed in one augmented frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Boxes(Vec<BBox>),
    Keypoints(Vec<Keypoint>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Boxes(b) => b.len(),
            Labels::Keypoints(k) => k.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of moving labels between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub labels: Labels,
    /// Index into the input of every kept label, in output order.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// Moves labels from the `weak` frame to the `strong` frame (`strong ∘ weak⁻¹`).
///
/// Keypoint classes are mirrored when exactly one of the two augmentations
/// flips. Labels that leave the unit square are dropped and counted.
pub fn project_labels(labels: &Labels, weak: &AffineAug, strong: &AffineAug) -> Result<Projected> {
    weak.check()?;
    strong.check()?;
    let map = |x: f64, y: f64| {
        let (ox, oy) = weak.inverse(x, y);
        strong.forward(ox, oy)
    };
    let mut kept = Vec::new();
    let mut dropped = 0;
    let labels = match labels {
        Labels::Boxes(boxes) => {
            let mut out = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                match clip_box(AffineAug::map_corners(&b.corners(), map)) {
                    Some(nb) => {
                        out.push(nb);
                        kept.push(i);
                    }
                    None => dropped += 1,
                }
            }
            Labels::Boxes(out)
        }
        Labels::Keypoints(kps) => {
            let mirror = weak.flip ^ strong.flip;
            let mut out = Vec::new();
            for (i, k) in kps.iter().enumerate() {
                let (x, y) = map(k.x, k.y);
                if in_unit(x, y) {
                    let class_id = if mirror {
                        flip_partner(k.class_id)
                    } else {
                        k.class_id
                    };
                    out.push(Keypoint {
                        x,
                        y,
                        class_id,
                        visibility: k.visibility,
                    });
                    kept.push(i);
                } else {
                    dropped += 1;
                }
            }
            Labels::Keypoints(out)
        }
    };
    Ok(Projected {
        labels,
        kept,
        dropped,
    })
}

/// Ranges augmentations are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub max_translate: f64,
    pub noise_sigma_max: f64,
    pub max_occlusions: usize,
    pub max_occlusion_area: f64,
}

impl AugConfig {
    pub fn weak() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            max_translate: 0.05,
            noise_sigma_max: 0.0,
            max_occlusions: 0,
            max_occlusion_area: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            noise_sigma_max: 0.1,
            max_occlusions: 2,
            max_occlusion_area: 0.2,
            ..Self::weak()
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AffineAug {
        let flip = rng.random_bool(self.flip_prob.clamp(0.0, 1.0));
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let t = self.max_translate;
        let translate = if t > 0.0 {
            (rng.random_range(-t..t), rng.random_range(-t..t))
        } else {
            (0.0, 0.0)
        };
        let noise_sigma = if self.noise_sigma_max > 0.0 {
            rng.random_range(0.0..self.noise_sigma_max)
        } else {
            0.0
        };
        let mut occlusion_rects = Vec::new();
        if self.max_occlusions > 0 && self.max_occlusion_area > 0.0 {
            let count = rng.random_range(0..=self.max_occlusions);
            let side_max = self.max_occlusion_area.sqrt().min(1.0);
            for _ in 0..count {
                let w = rng.random_range(0.05f64.min(side_max)..=side_max);
                let h_max = (self.max_occlusion_area / w).min(side_max);
                let h = rng.random_range(0.05f64.min(h_max)..=h_max);
                let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
                let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
                occlusion_rects.push(BBox { cx, cy, w, h });
            }
        }
        AffineAug {
            flip,
            scale,
            translate,
            noise_sigma,
            occlusion_rects,
            noise_seed: rng.random(),
        }
    }
}
