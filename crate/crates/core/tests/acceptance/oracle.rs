//! Slow, obviously-correct references for the acceptance checks.

use artpose_core::geometry::{BBox, NUM_JOINTS};
use artpose_core::losses::LossWeights;
use artpose_core::metrics::{Detection, EvalImage, EvalMode, GtInstance, OksParams};

/// Minimum over all injective row → column maps, summing costs in row order.
pub fn brute_assignment(rows: &[Vec<f64>]) -> f64 {
    fn go(rows: &[Vec<f64>], r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(rows, r + 1, used, acc + rows[r][c], best);
                used[c] = false;
            }
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(rows, 0, &mut vec![false; cols], 0.0, &mut best);
    if rows.is_empty() {
        0.0
    } else {
        best
    }
}

fn corners(b: [f64; 4]) -> (f64, f64, f64, f64) {
    (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (hull - union) / hull
}

/// Box regression term on plain arrays.
pub fn box_term(gt: [f64; 4], p: [f64; 4], w: &LossWeights) -> f64 {
    let l1: f64 = gt.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
    w.lambda_iou * (1.0 - giou(gt, p)) + w.lambda_l1 * l1
}

fn similarity(mode: EvalMode, img: &EvalImage, g: &GtInstance, d: &Detection) -> f64 {
    let (w, h) = (img.width as f64, img.height as f64);
    let px = |b: &BBox| [b.cx * w, b.cy * h, b.w * w, b.h * h];
    match mode {
        EvalMode::Box => {
            let (ax0, ay0, ax1, ay1) = corners(px(&g.bbox));
            let (bx0, by0, bx1, by1) = corners(px(&d.bbox));
            let inter = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
            inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
        }
        EvalMode::Keypoint => {
            let area = g.bbox.w * w * g.bbox.h * h;
            let k = OksParams::default().k;
            let mut s = 0.0;
            for j in 0..NUM_JOINTS {
                let dx = (g.keypoints[j].x - d.keypoints[j].x) * w;
                let dy = (g.keypoints[j].y - d.keypoints[j].y) * h;
                s += (-(dx * dx + dy * dy) / (2.0 * area * k[j] * k[j])).exp();
            }
            s / NUM_JOINTS as f64
        }
    }
}

/// Every map det → Option<gt> that uses each gt at most once.
fn matchings(nd: usize, ng: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![vec![]];
    for _ in 0..nd {
        let mut next = Vec::new();
        for m in &out {
            next.push([m.clone(), vec![None]].concat());
            for g in 0..ng {
                if !m.contains(&Some(g)) {
                    next.push([m.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct BruteResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar: Option<f64>,
}

/// Exhaustive COCO evaluation for images with every joint visible.
///
/// Per threshold, each image takes the matching that is lexicographically
/// best when detections are read in score order; precision at recall `r` is
/// `max{p_i : r_i ≥ r}` on 101 points.
pub fn evaluate(images: &[EvalImage], dets: &[Detection], mode: EvalMode) -> BruteResult {
    let positives: usize = images.iter().map(|i| i.gts.len()).sum();
    if positives == 0 {
        return BruteResult {
            ap: None,
            ap50: None,
            ap75: None,
            ar: None,
        };
    }
    let mut aps = Vec::new();
    let mut ars = Vec::new();
    for ti in 0..10 {
        let t = 0.5 + 0.05 * ti as f64;
        let mut flagged: Vec<(f64, bool)> = Vec::new();
        for img in images {
            let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.image_id == img.id).collect();
            ds.sort_by(|a, b| b.score.total_cmp(&a.score));
            let s: Vec<Vec<f64>> = ds
                .iter()
                .map(|d| img.gts.iter().map(|g| similarity(mode, img, g, d)).collect())
                .collect();
            let key = |m: &Vec<Option<usize>>| -> Option<Vec<(bool, f64)>> {
                let mut k = Vec::new();
                for (d, g) in m.iter().enumerate() {
                    match g {
                        Some(g) if s[d][*g] >= t => k.push((true, s[d][*g])),
                        Some(_) => return None,
                        None => k.push((false, 0.0)),
                    }
                }
                Some(k)
            };
            let best = matchings(ds.len(), img.gts.len())
                .into_iter()
                .filter_map(|m| key(&m).map(|k| (k, m)))
                .max_by(|a, b| {
                    for (x, y) in a.0.iter().zip(&b.0) {
                        let c = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1));
                        if c.is_ne() {
                            return c;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
                .expect("the empty matching is always admissible")
                .1;
            for (d, m) in ds.iter().zip(best) {
                flagged.push((d.score, m.is_some()));
            }
        }
        flagged.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut pts = Vec::new();
        let mut tp = 0;
        for (i, f) in flagged.iter().enumerate() {
            tp += f.1 as usize;
            pts.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
        }
        let ap = (0..101)
            .map(|i| {
                let r = i as f64 * 0.01;
                pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0;
        aps.push(ap);
        ars.push(tp as f64 / positives as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    BruteResult {
        ap: Some(mean(&aps)),
        ap50: Some(aps[0]),
        ap75: Some(aps[5]),
        ar: Some(mean(&ars)),
    }
}
