//! Procedural stick-figure scenes with a controllable domain shift.

use super::scene::{DomainTag, Person, Raster, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, Skeleton, Visibility, NUM_JOINTS, SKELETON};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StickWorldConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of figures per scene.
    pub figures_per_scene: (usize, usize),
    /// Figure height as a fraction of the image height.
    pub figure_scale: (f64, f64),
    /// Extra relative length of arms and legs; 0 keeps source proportions.
    pub limb_length_distortion: f64,
    /// Stroke width in pixels.
    pub stroke_width: (f64, f64),
    pub stroke_intensity: (f64, f64),
    /// Probability that a figure is partly covered by an occluder.
    pub occlusion_rate: f64,
    /// Stray strokes per scene.
    pub clutter: (usize, usize),
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub domain: DomainTag,
    pub seed: u64,
}

impl Default for StickWorldConfig {
    fn default() -> Self {
        Self::source(0)
    }
}

impl StickWorldConfig {
    pub fn source(seed: u64) -> Self {
        Self {
            height: 64,
            width: 64,
            figures_per_scene: (1, 3),
            figure_scale: (0.45, 0.75),
            limb_length_distortion: 0.0,
            stroke_width: (1.0, 1.6),
            stroke_intensity: (0.9, 1.0),
            occlusion_rate: 0.0,
            clutter: (0, 0),
            pixel_noise: 0.0,
            domain: DomainTag::Source,
            seed,
        }
    }

    pub fn target(seed: u64) -> Self {
        Self {
            limb_length_distortion: 0.45,
            stroke_intensity: (0.25, 0.55),
            occlusion_rate: 0.3,
            pixel_noise: 0.04,
            domain: DomainTag::Target,
            ..Self::source(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stickworld: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("raster must be at least 8x8");
        }
        let (a, b) = self.figures_per_scene;
        if a > b {
            return bad("figures_per_scene range is reversed");
        }
        let (lo, hi) = self.figure_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("figure_scale must satisfy 0 < lo <= hi <= 1");
        }
        if !(self.limb_length_distortion >= 0.0) {
            return bad("limb_length_distortion must be nonnegative");
        }
        let (lo, hi) = self.stroke_width;
        if !(lo > 0.0 && lo <= hi) {
            return bad("stroke_width must be a positive range");
        }
        let (lo, hi) = self.stroke_intensity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("stroke_intensity must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1]");
        }
        if self.clutter.0 > self.clutter.1 {
            return bad("clutter range is reversed");
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel_noise must be nonnegative");
        }
        Ok(())
    }

    /// Parses a `key = value` file (TOML syntax); missing keys take source
    /// defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Joint positions of one figure in figure units (hip center at the origin,
/// up is negative y, total height about 1).
fn pose(rng: &mut ChaCha8Rng, distortion: f64) -> [(f64, f64); NUM_JOINTS] {
    let limb = 1.0 + distortion;
    let lean = rng.random_range(-0.25..0.25);
    let dir = |a: f64| (a.sin(), -a.cos());
    let at = |p: (f64, f64), a: f64, len: f64| {
        let d = dir(a);
        (p.0 + d.0 * len, p.1 + d.1 * len)
    };
    let hip_c = (0.0, 0.0);
    let neck = at(hip_c, lean, 0.32);
    let across = (lean.cos(), lean.sin());
    let side =
        |c: (f64, f64), half: f64, s: f64| (c.0 + s * across.0 * half, c.1 + s * across.1 * half);
    // COCO left joints sit on the image right for a front-facing figure
    let l_sh = side(neck, 0.10, 1.0);
    let r_sh = side(neck, 0.10, -1.0);
    let l_hip = side(hip_c, 0.07, 1.0);
    let r_hip = side(hip_c, 0.07, -1.0);
    let head_tilt = lean + rng.random_range(-0.3..0.3);
    let nose = at(neck, head_tilt, 0.13);
    let eye_c = at(nose, head_tilt, 0.025);
    let face = (head_tilt.cos(), head_tilt.sin());
    let face_at = |c: (f64, f64), off: f64| (c.0 + face.0 * off, c.1 + face.1 * off);
    let l_eye = face_at(eye_c, 0.03);
    let r_eye = face_at(eye_c, -0.03);
    let l_ear = face_at(eye_c, 0.06);
    let r_ear = face_at(eye_c, -0.06);

    // limb angles open outwards from straight down on side `s`
    let arm = |sh: (f64, f64), s: f64, rng: &mut ChaCha8Rng| {
        let a1 = rng.random_range(0.2..2.6);
        let elbow = at(sh, PI + lean - s * a1, 0.16 * limb);
        let a2 = a1 + rng.random_range(-0.3..1.8);
        let wrist = at(elbow, PI + lean - s * a2, 0.15 * limb);
        (elbow, wrist)
    };
    let (l_el, l_wr) = arm(l_sh, 1.0, rng);
    let (r_el, r_wr) = arm(r_sh, -1.0, rng);
    let leg = |hip: (f64, f64), s: f64, rng: &mut ChaCha8Rng| {
        let a1 = rng.random_range(-0.15..0.7);
        let knee = at(hip, PI - s * a1, 0.25 * limb);
        let a2 = a1 - rng.random_range(0.0..0.8);
        let ankle = at(knee, PI - s * a2, 0.24 * limb);
        (knee, ankle)
    };
    let (l_kn, l_an) = leg(l_hip, 1.0, rng);
    let (r_kn, r_an) = leg(r_hip, -1.0, rng);
    [
        nose, l_eye, r_eye, l_ear, r_ear, l_sh, r_sh, l_el, r_el, l_wr, r_wr, l_hip, r_hip, l_kn,
        r_kn, l_an, r_an,
    ]
}

/// Distance from `p` to the segment `a`–`b`.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Anti-aliased stroke in pixel coordinates; coverage combines by maximum.
fn draw_segment(r: &mut Raster, a: (f64, f64), b: (f64, f64), width: f64, intensity: f64) {
    let pad = width / 2.0 + 1.0;
    let (h, w) = (r.height() as f64, r.width() as f64);
    let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + pad).ceil().min(w - 1.0).max(0.0) as usize;
    let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + pad).ceil().min(h - 1.0).max(0.0) as usize;
    for row in y0..=y1 {
        for col in x0..=x1 {
            let d = seg_dist((col as f64 + 0.5, row as f64 + 0.5), a, b);
            let cov = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) * intensity;
            if cov > r.get(row, col) {
                r.set(row, col, cov);
            }
        }
    }
}

fn fill_rect(r: &mut Raster, c: (f64, f64, f64, f64), value: f64) {
    let (h, w) = (r.height(), r.width());
    let x0 = (c.0 * w as f64).round().clamp(0.0, w as f64) as usize;
    let x1 = (c.2 * w as f64).round().clamp(0.0, w as f64) as usize;
    let y0 = (c.1 * h as f64).round().clamp(0.0, h as f64) as usize;
    let y1 = (c.3 * h as f64).round().clamp(0.0, h as f64) as usize;
    for row in y0..y1 {
        for col in x0..x1 {
            r.set(row, col, value);
        }
    }
}

struct Figure {
    joints: [(f64, f64); NUM_JOINTS],
    stroke: f64,
    intensity: f64,
}

fn place_figure(cfg: &StickWorldConfig, rng: &mut ChaCha8Rng, placed: &[BBox]) -> Option<Figure> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    for _ in 0..30 {
        let mut joints = pose(rng, cfg.limb_length_distortion);
        let mirror = rng.random_bool(0.5);
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for j in joints.iter_mut() {
            if mirror {
                j.0 = -j.0;
            }
            xmin = xmin.min(j.0);
            xmax = xmax.max(j.0);
            ymin = ymin.min(j.1);
            ymax = ymax.max(j.1);
        }
        let scale = rng.random_range(cfg.figure_scale.0..=cfg.figure_scale.1) * h / (ymax - ymin);
        let stroke = rng.random_range(cfg.stroke_width.0..=cfg.stroke_width.1);
        let margin = stroke / 2.0 + 1.0;
        let (fw, fh) = ((xmax - xmin) * scale, (ymax - ymin) * scale);
        if fw + 2.0 * margin >= w || fh + 2.0 * margin >= h {
            continue;
        }
        let ox = rng.random_range(margin..w - margin - fw) - xmin * scale;
        let oy = rng.random_range(margin..h - margin - fh) - ymin * scale;
        for j in joints.iter_mut() {
            *j = (j.0 * scale + ox, j.1 * scale + oy);
        }
        let bbox = figure_box(&joints, stroke, cfg);
        if placed
            .iter()
            .any(|p| crate::geometry::iou(p, &bbox).unwrap_or(1.0) > 0.25)
        {
            continue;
        }
        let intensity = rng.random_range(cfg.stroke_intensity.0..=cfg.stroke_intensity.1);
        return Some(Figure {
            joints,
            stroke,
            intensity,
        });
    }
    None
}

/// Tight box around the joints, padded by half a stroke, in normalized units.
fn figure_box(joints: &[(f64, f64); NUM_JOINTS], stroke: f64, cfg: &StickWorldConfig) -> BBox {
    let pad = stroke / 2.0;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let xs = joints.iter().map(|j| j.0);
    let ys = joints.iter().map(|j| j.1);
    let x0 = (xs.clone().fold(f64::MAX, f64::min) - pad).max(0.0) / w;
    let x1 = (xs.fold(f64::MIN, f64::max) + pad).min(w) / w;
    let y0 = (ys.clone().fold(f64::MAX, f64::min) - pad).max(0.0) / h;
    let y1 = (ys.fold(f64::MIN, f64::max) + pad).min(h) / h;
    BBox {
        cx: 0.5 * (x0 + x1),
        cy: 0.5 * (y0 + y1),
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Renders one scene; `index` only affects the id and the per-scene stream.
pub fn generate_scene(cfg: &StickWorldConfig, index: usize) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (cfg.height, cfg.width);
    let mut raster = Raster::zeros(h, w);
    let count = rng.random_range(cfg.figures_per_scene.0..=cfg.figures_per_scene.1);
    let mut figures = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..count {
        if let Some(f) = place_figure(cfg, &mut rng, &boxes) {
            boxes.push(figure_box(&f.joints, f.stroke, cfg));
            figures.push(f);
        }
    }
    for f in &figures {
        for &(a, b) in SKELETON.iter() {
            draw_segment(&mut raster, f.joints[a], f.joints[b], f.stroke, f.intensity);
        }
        // torso diagonals make the trunk read as a body
        draw_segment(
            &mut raster,
            f.joints[5],
            f.joints[12],
            f.stroke,
            f.intensity,
        );
        draw_segment(
            &mut raster,
            f.joints[6],
            f.joints[11],
            f.stroke,
            f.intensity,
        );
    }
    let (c0, c1) = cfg.clutter;
    for _ in 0..rng.random_range(c0..=c1) {
        let a = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let ang = rng.random_range(0.0..2.0 * PI);
        let len = rng.random_range(0.1..0.35) * h as f64;
        let b = (a.0 + ang.cos() * len, a.1 + ang.sin() * len);
        let sw = rng.random_range(cfg.stroke_width.0..=cfg.stroke_width.1);
        let si = rng.random_range(cfg.stroke_intensity.0..=cfg.stroke_intensity.1);
        draw_segment(&mut raster, a, b, sw, si);
    }

    let mut occluders = Vec::new();
    for b in &boxes {
        if rng.random_bool(cfg.occlusion_rate) {
            let c = b.corners();
            let ow = rng.random_range(0.3..0.6) * b.w;
            let oh = rng.random_range(0.2..0.4) * b.h;
            let x0 = rng.random_range(c.x0..(c.x1 - ow).max(c.x0 + 1e-9));
            let y0 = rng.random_range(c.y0..(c.y1 - oh).max(c.y0 + 1e-9));
            let rect = (x0, y0, x0 + ow, y0 + oh);
            fill_rect(&mut raster, rect, rng.random_range(0.2..0.4));
            occluders.push(rect);
        }
    }
    if cfg.pixel_noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, cfg.pixel_noise).expect("valid sigma");
        for v in raster.data_mut() {
            *v = (*v + rng.sample(normal)).clamp(0.0, 1.0);
        }
    }

    let persons = figures
        .iter()
        .zip(&boxes)
        .map(|(f, b)| {
            let keypoints: Skeleton = std::array::from_fn(|i| {
                let (x, y) = (f.joints[i].0 / w as f64, f.joints[i].1 / h as f64);
                let hidden = occluders
                    .iter()
                    .any(|r| x >= r.0 && x <= r.2 && y >= r.1 && y <= r.3);
                let vis = if hidden {
                    Visibility::Occluded
                } else {
                    Visibility::Visible
                };
                Keypoint::new(x, y, i, vis)
            });
            Person::new(*b, keypoints)
        })
        .collect();
    Ok(SceneRecord {
        id: format!("{}-{}-{index:05}", domain_name(cfg.domain), cfg.seed),
        raster,
        persons,
        domain: cfg.domain,
    })
}

fn domain_name(d: DomainTag) -> &'static str {
    match d {
        DomainTag::Source => "src",
        DomainTag::Target => "tgt",
    }
}

/// `count` scenes, deterministic in `cfg.seed`.
pub fn generate_stickworld(cfg: &StickWorldConfig, count: usize) -> Result<Vec<SceneRecord>> {
    generate_range(cfg, 0, count)
}

/// Scenes `start..start + count` of the stream defined by `cfg`.
pub fn generate_range(
    cfg: &StickWorldConfig,
    start: usize,
    count: usize,
) -> Result<Vec<SceneRecord>> {
    (start..start + count)
        .map(|i| generate_scene(cfg, i))
        .collect()
}
