use super::oks::{oks, OksParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Skeleton};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Matching thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;
/// COCO area buckets in squared pixels.
pub const SMALL_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Box,
    Keypoint,
}

/// Ground truth of one image. Geometry is normalized; `height × width` maps
/// it to pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub gts: Vec<GtInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub bbox: BBox,
    pub keypoints: Skeleton,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub keypoints: Skeleton,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub max_dets: usize,
    pub oks: OksParams,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            max_dets: 20,
            oks: OksParams::default(),
        }
    }
}

/// Summary in the column layout of the result tables. `None` marks a value
/// with no ground truth behind it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: Option<f64>,
}

impl EvalResult {
    /// One aligned text row per field.
    pub fn report(&self, title: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "   -  ".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{title}\n");
        let rows = [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_s),
            ("AP_M", self.ap_m),
            ("AP_L", self.ap_l),
            ("AR", self.ar),
        ];
        for (name, v) in rows {
            if name == "AP_S" && v.is_none() {
                continue;
            }
            s.push_str(&format!("  {name:<5} {}\n", cell(v)));
        }
        s
    }
}

#[derive(Clone, Copy)]
struct AreaRange(f64, f64);

impl AreaRange {
    const ALL: AreaRange = AreaRange(0.0, f64::INFINITY);
    const SMALL: AreaRange = AreaRange(0.0, SMALL_MAX);
    const MEDIUM: AreaRange = AreaRange(SMALL_MAX, MEDIUM_MAX);
    const LARGE: AreaRange = AreaRange(MEDIUM_MAX, f64::INFINITY);

    fn outside(&self, a: f64) -> bool {
        a < self.0 || a > self.1
    }
}

fn pixel_box(b: &BBox, h: usize, w: usize) -> BBox {
    BBox {
        cx: b.cx * w as f64,
        cy: b.cy * h as f64,
        w: b.w * w as f64,
        h: b.h * h as f64,
    }
}

fn pixel_skeleton(s: &Skeleton, h: usize, w: usize) -> Skeleton {
    let mut out = *s;
    for k in out.iter_mut() {
        k.x *= w as f64;
        k.y *= h as f64;
    }
    out
}

struct PixelGt {
    bbox: BBox,
    keypoints: Skeleton,
    area: f64,
    /// Never counted as a positive (keypoint mode without annotated joints).
    ignore: bool,
}

struct PixelDet {
    bbox: BBox,
    keypoints: Skeleton,
    area: f64,
    score: f64,
}

/// Per-image matching state for one area range.
struct ImageEval {
    scores: Vec<f64>,
    /// `[threshold][det]` matched flag.
    matched: Vec<Vec<bool>>,
    /// `[threshold][det]` ignored flag.
    ignored: Vec<Vec<bool>>,
    positives: usize,
}

fn similarity(
    mode: EvalMode,
    g: &PixelGt,
    d: &PixelDet,
    p: &OksParams,
) -> Result<f64> {
    match mode {
        EvalMode::Box => iou(&g.bbox, &d.bbox),
        EvalMode::Keypoint if g.ignore => Ok(0.0),
        EvalMode::Keypoint => oks(&g.keypoints, g.area, &d.keypoints, p),
    }
}

fn evaluate_image(
    gts: &[PixelGt],
    dets: &[PixelDet],
    range: AreaRange,
    mode: EvalMode,
    params: &EvalParams,
    thresholds: &[f64],
) -> Result<ImageEval> {
    let gt_ignored: Vec<bool> = gts.iter().map(|g| g.ignore || range.outside(g.area)).collect();
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignored[g]);
    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    det_order.truncate(params.max_dets);

    let mut sim = vec![vec![0.0; gt_order.len()]; det_order.len()];
    for (di, &d) in det_order.iter().enumerate() {
        for (gi, &g) in gt_order.iter().enumerate() {
            sim[di][gi] = similarity(mode, &gts[g], &dets[d], &params.oks)?;
        }
    }

    let mut matched = Vec::with_capacity(thresholds.len());
    let mut ignored = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut gt_taken = vec![false; gt_order.len()];
        let mut dm = vec![false; det_order.len()];
        let mut di_flag = vec![false; det_order.len()];
        for di in 0..det_order.len() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..gt_order.len() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mm) = m {
                    if !gt_ignored[gt_order[mm]] && gt_ignored[gt_order[gi]] {
                        break;
                    }
                }
                if sim[di][gi] < best {
                    continue;
                }
                best = sim[di][gi];
                m = Some(gi);
            }
            if let Some(gi) = m {
                gt_taken[gi] = true;
                dm[di] = true;
                di_flag[di] = gt_ignored[gt_order[gi]];
            } else {
                di_flag[di] = range.outside(dets[det_order[di]].area);
            }
        }
        matched.push(dm);
        ignored.push(di_flag);
    }
    Ok(ImageEval {
        scores: det_order.iter().map(|&d| dets[d].score).collect(),
        matched,
        ignored,
        positives: gt_ignored.iter().filter(|i| !**i).count(),
    })
}

/// Interpolated precision at the 101 recall points, and final recall.
fn accumulate(evals: &[ImageEval], t: usize) -> Option<(f64, f64)> {
    let positives: usize = evals.iter().map(|e| e.positives).sum();
    if positives == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool, bool)> = Vec::new();
    for e in evals {
        for d in 0..e.scores.len() {
            all.push((e.scores[d], e.matched[t][d], e.ignored[t][d]));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, m, ign) in &all {
        if ign {
            continue;
        }
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let r = r as f64 * (1.0 / (RECALL_POINTS - 1) as f64);
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    Some((sum / RECALL_POINTS as f64, final_recall))
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// COCO-protocol AP and AR.
///
/// Detections are matched greedily in descending score order per image, at
/// most `max_dets` per image. In keypoint mode ground truth without annotated
/// joints is ignored and similarity is OKS with the gt box area as scale.
pub fn evaluate(
    images: &[EvalImage],
    dets: &[Detection],
    mode: EvalMode,
    params: &EvalParams,
) -> Result<EvalResult> {
    params.oks.validate()?;
    let mut index = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        if index.insert(img.id.as_str(), i).is_some() {
            return Err(Error::Metrics(format!("duplicate image id {}", img.id)));
        }
    }
    let mut per_image: Vec<Vec<PixelDet>> = (0..images.len()).map(|_| Vec::new()).collect();
    for d in dets {
        let &i = index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::Metrics(format!("detection for unknown image {}", d.image_id)))?;
        if !d.score.is_finite() {
            return Err(Error::Metrics(format!("non-finite score on {}", d.image_id)));
        }
        let img = &images[i];
        let bbox = pixel_box(&d.bbox, img.height, img.width);
        per_image[i].push(PixelDet {
            bbox,
            keypoints: pixel_skeleton(&d.keypoints, img.height, img.width),
            area: bbox.area(),
            score: d.score,
        });
    }
    let gts: Vec<Vec<PixelGt>> = images
        .iter()
        .map(|img| {
            img.gts
                .iter()
                .map(|g| {
                    let bbox = pixel_box(&g.bbox, img.height, img.width);
                    PixelGt {
                        bbox,
                        keypoints: pixel_skeleton(&g.keypoints, img.height, img.width),
                        area: bbox.area(),
                        ignore: mode == EvalMode::Keypoint
                            && !g.keypoints.iter().any(|k| k.is_annotated()),
                    }
                })
                .collect()
        })
        .collect();

    let thresholds = iou_thresholds();
    let run = |range: AreaRange| -> Result<Vec<Option<(f64, f64)>>> {
        let evals = gts
            .iter()
            .zip(&per_image)
            .map(|(g, d)| evaluate_image(g, d, range, mode, params, &thresholds))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..thresholds.len()).map(|t| accumulate(&evals, t)).collect())
    };
    let all = run(AreaRange::ALL)?;
    let ap_of = |v: &[Option<(f64, f64)>]| mean(&v.iter().map(|x| x.map(|x| x.0)).collect::<Vec<_>>());
    let has_small = gts.iter().flatten().any(|g| !g.ignore && g.area < SMALL_MAX);
    Ok(EvalResult {
        ap: ap_of(&all),
        ap50: all[0].map(|x| x.0),
        ap75: all[5].map(|x| x.0),
        ap_s: if has_small { ap_of(&run(AreaRange::SMALL)?) } else { None },
        ap_m: ap_of(&run(AreaRange::MEDIUM)?),
        ap_l: ap_of(&run(AreaRange::LARGE)?),
        ar: mean(&all.iter().map(|x| x.map(|x| x.1)).collect::<Vec<_>>()),
    })
}
