use super::scene::{DomainTag, Person, Raster, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, Skeleton, Visibility, JOINT_NAMES, NUM_JOINTS, SKELETON};
use crate::metrics::Detection;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Category id used for people.
pub const PERSON_CATEGORY: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels, top-left origin.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    /// `[x, y, v]` per joint in pixels.
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub supercategory: String,
    pub keypoints: Vec<String>,
    /// 1-based joint pairs.
    pub skeleton: Vec<[usize; 2]>,
}

impl CocoCategory {
    pub fn person() -> Self {
        Self {
            id: PERSON_CATEGORY,
            name: "person".into(),
            supercategory: "person".into(),
            keypoints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            skeleton: SKELETON.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
    pub score: f64,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_coco_file(path: &Path) -> Result<CocoFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| parse_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Center-form normalized box from a pixel `[x, y, w, h]`.
pub fn bbox_from_coco(b: [f64; 4], width: usize, height: usize) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox {
        cx: (b[0] + b[2] / 2.0) / w,
        cy: (b[1] + b[3] / 2.0) / h,
        w: b[2] / w,
        h: b[3] / h,
    }
}

pub fn bbox_to_coco(b: &BBox, width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [
        (b.cx - b.w / 2.0) * w,
        (b.cy - b.h / 2.0) * h,
        b.w * w,
        b.h * h,
    ]
}

fn keypoints_from_coco(a: &CocoAnnotation, width: usize, height: usize) -> Result<Skeleton> {
    let bad = |msg: String| Error::Validation {
        annotation_id: a.id,
        msg,
    };
    if a.keypoints.len() != 3 * NUM_JOINTS {
        return Err(bad(format!(
            "expected {} keypoint values, found {}",
            3 * NUM_JOINTS,
            a.keypoints.len()
        )));
    }
    let mut out = [Keypoint::absent(0); NUM_JOINTS];
    for (j, k) in out.iter_mut().enumerate() {
        let (x, y, v) = (a.keypoints[3 * j], a.keypoints[3 * j + 1], a.keypoints[3 * j + 2]);
        let code = (v.fract() == 0.0 && (0.0..=2.0).contains(&v)).then_some(v as u8);
        let vis = code
            .and_then(Visibility::from_code)
            .ok_or_else(|| bad(format!("joint {j}: visibility {v} is not 0, 1 or 2")))?;
        *k = if vis.is_annotated() {
            Keypoint::new(x / width as f64, y / height as f64, j, vis)
        } else {
            Keypoint::absent(j)
        };
    }
    Ok(out)
}

fn keypoints_to_coco(s: &Skeleton, width: usize, height: usize) -> Vec<f64> {
    s.iter()
        .flat_map(|k| {
            if k.is_annotated() {
                [k.x * width as f64, k.y * height as f64, k.visibility.code() as f64]
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .collect()
}

fn stem(file_name: &str) -> String {
    Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_string())
}

/// Scenes from a parsed COCO file. Rasters are read from `image_dir` when a
/// matching PGM exists and are blank otherwise.
pub fn scenes_from_coco(file: &CocoFile, image_dir: Option<&Path>) -> Result<Vec<SceneRecord>> {
    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &file.annotations {
        if a.category_id == PERSON_CATEGORY {
            by_image.entry(a.image_id).or_default().push(a);
        }
    }
    let mut out = Vec::with_capacity(file.images.len());
    for img in &file.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Config(format!("image {} has zero size", img.id)));
        }
        let raster = match image_dir.map(|d| d.join(&img.file_name)) {
            Some(p) if p.exists() => read_pgm(&p)?,
            _ => Raster::zeros(img.height, img.width),
        };
        let mut persons = Vec::new();
        for a in by_image.get(&img.id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let bbox = bbox_from_coco(a.bbox, img.width, img.height);
            bbox.validate().map_err(|e| Error::Validation {
                annotation_id: a.id,
                msg: e.to_string(),
            })?;
            persons.push(Person::new(bbox, keypoints_from_coco(a, img.width, img.height)?));
        }
        out.push(SceneRecord {
            id: stem(&img.file_name),
            raster,
            persons,
            domain: DomainTag::Source,
        });
    }
    Ok(out)
}

pub fn load_coco(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = read_coco_file(path)?;
    scenes_from_coco(&file, path.parent())
}

/// COCO document for `scenes`; image and annotation ids count from 1 in
/// scene order.
pub fn scenes_to_coco(scenes: &[SceneRecord]) -> CocoFile {
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let (w, h) = (s.raster.width(), s.raster.height());
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: format!("{}.pgm", s.id),
            width: w,
            height: h,
        });
        for p in &s.persons {
            let bbox = bbox_to_coco(&p.bbox, w, h);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: PERSON_CATEGORY,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
                keypoints: keypoints_to_coco(&p.keypoints, w, h),
                num_keypoints: p.num_annotated(),
            });
        }
    }
    CocoFile {
        images,
        annotations,
        categories: vec![CocoCategory::person()],
    }
}

/// Writes the JSON and, with `write_rasters`, one PGM per scene next to it.
pub fn save_coco(path: &Path, scenes: &[SceneRecord], write_rasters: bool) -> Result<()> {
    let file = scenes_to_coco(scenes);
    if write_rasters {
        let dir = path.parent().unwrap_or(Path::new("."));
        for (s, img) in scenes.iter().zip(&file.images) {
            write_pgm(&dir.join(&img.file_name), &s.raster)?;
        }
    }
    write_json(path, &file)
}

/// Results list for `dets`, resolving scene ids against `scenes`.
pub fn detections_to_results(scenes: &[SceneRecord], dets: &[Detection], with_keypoints: bool) -> Result<Vec<CocoResult>> {
    let index: HashMap<&str, (u64, usize, usize)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), (i as u64 + 1, s.raster.width(), s.raster.height())))
        .collect();
    dets.iter()
        .map(|d| {
            let &(image_id, w, h) = index
                .get(d.image_id.as_str())
                .ok_or_else(|| Error::Metrics(format!("detection for unknown scene {}", d.image_id)))?;
            Ok(CocoResult {
                image_id,
                category_id: PERSON_CATEGORY,
                bbox: Some(bbox_to_coco(&d.bbox, w, h)),
                keypoints: with_keypoints.then(|| {
                    d.keypoints
                        .iter()
                        .flat_map(|k| [k.x * w as f64, k.y * h as f64, k.visibility.code() as f64])
                        .collect()
                }),
                score: d.score,
            })
        })
        .collect()
}

/// Inverse of [`detections_to_results`]. Keypoints carry their coordinates
/// whatever the stored visibility.
pub fn results_to_detections(scenes: &[SceneRecord], results: &[CocoResult]) -> Result<Vec<Detection>> {
    results
        .iter()
        .map(|r| {
            let s = (r.image_id as usize)
                .checked_sub(1)
                .and_then(|i| scenes.get(i))
                .ok_or_else(|| Error::Metrics(format!("result for unknown image {}", r.image_id)))?;
            let (w, h) = (s.raster.width(), s.raster.height());
            let bbox = r
                .bbox
                .map(|b| bbox_from_coco(b, w, h))
                .ok_or_else(|| Error::Metrics(format!("result on image {} has no bbox", r.image_id)))?;
            let mut keypoints = [Keypoint::absent(0); NUM_JOINTS];
            for (j, k) in keypoints.iter_mut().enumerate() {
                *k = match &r.keypoints {
                    Some(v) if v.len() == 3 * NUM_JOINTS => {
                        let vis = Visibility::from_code(v[3 * j + 2] as u8).unwrap_or(Visibility::Visible);
                        Keypoint::new(v[3 * j] / w as f64, v[3 * j + 1] / h as f64, j, vis)
                    }
                    Some(v) => {
                        return Err(Error::Metrics(format!(
                            "result on image {} has {} keypoint values",
                            r.image_id,
                            v.len()
                        )))
                    }
                    None => Keypoint::absent(j),
                };
            }
            Ok(Detection {
                image_id: s.id.clone(),
                bbox,
                keypoints,
                score: r.score,
            })
        })
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| parse_err(path, e))
}

/// 16-bit binary PGM.
pub fn write_pgm(path: &Path, r: &Raster) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", r.width(), r.height()).into_bytes();
    for v in r.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(parse_err(path, "truncated PGM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_string));
    }
    let num = |i: usize| -> Result<usize> {
        header[i]
            .parse()
            .map_err(|_| parse_err(path, format!("bad PGM header field {:?}", header[i])))
    };
    if header[0] != "P5" {
        return Err(parse_err(path, "not a binary PGM"));
    }
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max == 0 || max > 65535 {
        return Err(parse_err(path, format!("unsupported maxval {max}")));
    }
    let bytes = if max > 255 { 2 } else { 1 };
    let mut raw = vec![0u8; w * h * bytes];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let data = raw
        .chunks(bytes)
        .map(|c| {
            let v = if bytes == 2 {
                u16::from_be_bytes([c[0], c[1]]) as f64
            } else {
                c[0] as f64
            };
            v / max as f64
        })
        .collect();
    Ok(Raster::from_data(h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_stickworld, StickWorldConfig};

    #[test]
    fn bbox_conversion_matches_hand_arithmetic() {
        let b = bbox_from_coco([10.0, 20.0, 30.0, 40.0], 100, 200);
        for (got, want) in [(b.cx, 0.25), (b.cy, 0.20), (b.w, 0.30), (b.h, 0.20)] {
            assert!((got - want).abs() < 1e-15);
        }
        let back = bbox_to_coco(&b, 100, 200);
        for (g, w) in back.iter().zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    fn annotation(keypoints: Vec<f64>) -> CocoFile {
        CocoFile {
            images: vec![CocoImage {
                id: 7,
                file_name: "a.pgm".into(),
                width: 100,
                height: 50,
            }],
            annotations: vec![CocoAnnotation {
                id: 42,
                image_id: 7,
                category_id: 1,
                bbox: [10.0, 10.0, 20.0, 20.0],
                area: 400.0,
                iscrowd: 0,
                keypoints,
                num_keypoints: 0,
            }],
            categories: vec![CocoCategory::person()],
        }
    }

    #[test]
    fn all_absent_keypoints_count_zero() {
        let s = scenes_from_coco(&annotation(vec![0.0; 51]), None).unwrap();
        assert_eq!(s[0].persons[0].num_annotated(), 0);
        assert_eq!((s[0].raster.height(), s[0].raster.width()), (50, 100));
    }

    #[test]
    fn wrong_keypoint_length_names_the_annotation() {
        match scenes_from_coco(&annotation(vec![0.0; 50]), None) {
            Err(Error::Validation { annotation_id, .. }) => assert_eq!(annotation_id, 42),
            other => panic!("{other:?}"),
        }
        let mut bad = vec![0.0; 51];
        bad[2] = 3.0;
        assert!(scenes_from_coco(&annotation(bad), None).is_err());
    }

    #[test]
    fn malformed_json_is_a_parse_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, "{ not json").unwrap();
        match load_coco(&p) {
            Err(Error::Parse { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_stickworld(&StickWorldConfig::target(1), 1).unwrap();
        let p = dir.path().join("r.pgm");
        write_pgm(&p, &scenes[0].raster).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in scenes[0].raster.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn results_round_trip() {
        let scenes = generate_stickworld(&StickWorldConfig::source(2), 3).unwrap();
        let dets: Vec<Detection> = scenes
            .iter()
            .flat_map(|s| {
                s.persons.iter().map(|p| Detection {
                    image_id: s.id.clone(),
                    bbox: p.bbox,
                    keypoints: p.keypoints,
                    score: 0.5,
                })
            })
            .collect();
        let res = detections_to_results(&scenes, &dets, true).unwrap();
        let back = results_to_detections(&scenes, &res).unwrap();
        assert_eq!(back.len(), dets.len());
        for (a, b) in dets.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12 && (a.bbox.h - b.bbox.h).abs() < 1e-12);
            for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
                assert!((ka.x - kb.x).abs() < 1e-12 && ka.visibility == kb.visibility);
            }
        }
    }
}
