use super::boxes::{BBox, Corners};
use super::keypoints::{Keypoint, Skeleton};
use crate::dataio::Raster;
use crate::error::{Error, Result};

/// Affine map between image coordinates and a crop's patch coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropFrame {
    pub region: Corners,
}

impl CropFrame {
    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.region.x0) / self.region.width(),
            (y - self.region.y0) / self.region.height(),
        )
    }

    pub fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.region.x0 + u * self.region.width(),
            self.region.y0 + v * self.region.height(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub raster: Raster,
    pub keypoints: Skeleton,
    pub frame: CropFrame,
}

/// Resamples the region under `bbox` to `out_resolution = (h, w)` and maps
/// `keypoints` into patch coordinates. Keypoints outside the box become absent.
pub fn crop_box(
    raster: &Raster,
    bbox: &BBox,
    keypoints: &Skeleton,
    out_resolution: (usize, usize),
) -> Result<Crop> {
    crop_region(raster, bbox.corners(), keypoints, out_resolution)
}

pub fn crop_region(
    raster: &Raster,
    region: Corners,
    keypoints: &Skeleton,
    out_resolution: (usize, usize),
) -> Result<Crop> {
    let (h, w) = out_resolution;
    if h == 0 || w == 0 {
        return Err(Error::InvalidOperand {
            op: "crop_box",
            msg: format!("output resolution must be positive, got {h}x{w}"),
        });
    }
    if !(region.width() > 0.0 && region.height() > 0.0) {
        return Err(Error::InvalidBox(format!(
            "degenerate crop region {region:?}"
        )));
    }
    let frame = CropFrame { region };
    let patch = raster.resample(h, w, |u, v| frame.to_image(u, v));
    let mut kps = *keypoints;
    for k in kps.iter_mut() {
        if !k.is_annotated() {
            continue;
        }
        let (u, v) = frame.to_patch(k.x, k.y);
        if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
            k.x = u;
            k.y = v;
        } else {
            *k = Keypoint::absent(k.class_id);
        }
    }
    Ok(Crop {
        raster: patch,
        keypoints: kps,
        frame,
    })
}
