use serde::{Deserialize, Serialize};

use crate::geometry::{empty_skeleton, BBox, Skeleton};

/// Single-channel image with intensities in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "raster data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Bilinear sample at normalized coordinates (pixel centers at
    /// `(j + 0.5) / width`); zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let px = x * self.width as f64 - 0.5;
        let py = y * self.height as f64 - 0.5;
        let x0 = px.floor();
        let y0 = py.floor();
        let fx = px - x0;
        let fy = py - y0;
        let at = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                0.0
            } else {
                self.get(r as usize, c as usize)
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
        let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resamples to a new size by mapping output pixel centers through `src`.
    pub fn resample(
        &self,
        height: usize,
        width: usize,
        src: impl Fn(f64, f64) -> (f64, f64),
    ) -> Raster {
        let mut out = Raster::zeros(height, width);
        for r in 0..height {
            let v = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                let u = (c as f64 + 0.5) / width as f64;
                let (sx, sy) = src(u, v);
                out.data[r * width + c] = self.sample(sx, sy);
            }
        }
        out
    }

    /// Average-pools or bilinearly resizes to `(height, width)`.
    pub fn resized(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        if self.height % height == 0 && self.width % width == 0 {
            let (fh, fw) = (self.height / height, self.width / width);
            let mut out = Raster::zeros(height, width);
            let norm = (fh * fw) as f64;
            for r in 0..self.height {
                for c in 0..self.width {
                    out.data[(r / fh) * width + c / fw] += self.get(r, c) / norm;
                }
            }
            return out;
        }
        self.resample(height, width, |u, v| (u, v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    #[default]
    Source,
    Target,
}

/// One annotated figure.
#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    pub bbox: BBox,
    pub keypoints: Skeleton,
}

impl Person {
    pub fn new(bbox: BBox, keypoints: Skeleton) -> Self {
        Self { bbox, keypoints }
    }

    pub fn box_only(bbox: BBox) -> Self {
        Self::new(bbox, empty_skeleton())
    }

    pub fn num_annotated(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_annotated()).count()
    }
}

/// One image-equivalent with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub raster: Raster,
    pub persons: Vec<Person>,
    pub domain: DomainTag,
}

impl SceneRecord {
    /// Copy with annotations stripped (the unlabeled-pool view).
    pub fn unlabeled(&self) -> SceneRecord {
        SceneRecord {
            persons: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        for (i, p) in self.persons.iter().enumerate() {
            p.bbox.validate()?;
            for (slot, k) in p.keypoints.iter().enumerate() {
                if k.class_id != slot {
                    return Err(crate::error::Error::Config(format!(
                        "scene {} person {i}: slot {slot} holds class {}",
                        self.id, k.class_id
                    )));
                }
                if k.is_annotated() && !((0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y)) {
                    return Err(crate::error::Error::Config(format!(
                        "scene {} person {i}: keypoint {slot} outside the image",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}
