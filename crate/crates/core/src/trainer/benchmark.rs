//! Paired source-to-target adaptation benchmark on StickWorld.
//!
//! Per seed: a detector and a keypoint stage are trained on labeled source
//! scenes, then each continues twice from the same weights, once with the
//! unlabeled target pool weighted in and once with it weighted out. Both
//! arms keep an EMA teacher, and the teachers are what gets evaluated.

use super::crops::{gt_crop_scenes, pseudo_label_boxes_for_stage_two};
use super::ratio::RatioLog;
use super::run::{run_semisup, run_supervised, RunPaths, TrainConfig};
use crate::dataio::{generate_stickworld, SceneRecord, StickWorldConfig};
use crate::error::Result;
use crate::losses::Stage;
use crate::metrics::{box_detections, eval_images, evaluate, pose_detections, BoxSource, EvalMode, EvalParams};
use crate::posemodel::{SetPredictor, StageConfig, DEFAULT_BOX_THRESHOLD, DEFAULT_REPORT_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// Seeds of these templates are replaced per run.
    pub source: StickWorldConfig,
    pub target: StickWorldConfig,
    pub detector: StageConfig,
    pub keypointer: StageConfig,
    /// Shared settings; stage, steps and seed are set per phase.
    pub train: TrainConfig,
    pub detector_burn_in: usize,
    pub detector_steps: usize,
    pub keypoint_burn_in: usize,
    pub keypoint_steps: usize,
    /// Unlabeled weight of the adapted arm.
    pub lambda_u: f64,
    /// Detector confidence for stage-two pseudo-boxes and for evaluation.
    pub box_threshold: f64,
    pub report_threshold: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            labeled: 50,
            unlabeled: 500,
            test: 200,
            source: StickWorldConfig::source(0),
            target: StickWorldConfig::target(0),
            detector: StageConfig::detector(),
            keypointer: StageConfig::keypointer(),
            train: TrainConfig::default(),
            detector_burn_in: 1500,
            detector_steps: 3000,
            keypoint_burn_in: 1500,
            keypoint_steps: 3000,
            lambda_u: 0.5,
            box_threshold: DEFAULT_BOX_THRESHOLD,
            report_threshold: DEFAULT_REPORT_THRESHOLD,
        }
    }
}

/// The three datasets of one seed.
#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub labeled: Vec<SceneRecord>,
    /// Annotations stripped.
    pub unlabeled: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

impl BenchmarkConfig {
    pub fn data(&self, seed: u64) -> Result<BenchmarkData> {
        let with_seed = |c: &StickWorldConfig, s: u64| StickWorldConfig { seed: s, ..c.clone() };
        let base = seed.wrapping_mul(1000);
        Ok(BenchmarkData {
            labeled: generate_stickworld(&with_seed(&self.source, base + 1), self.labeled)?,
            unlabeled: generate_stickworld(&with_seed(&self.target, base + 2), self.unlabeled)?
                .iter()
                .map(SceneRecord::unlabeled)
                .collect(),
            test: generate_stickworld(&with_seed(&self.target, base + 3), self.test)?,
        })
    }

    fn phase(&self, stage: Stage, steps: usize, seed: u64, lambda_u: f64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.stage = stage;
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.weights.lambda_u = lambda_u;
        cfg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub lambda_u: f64,
    pub box_ap: f64,
    pub keypoint_ap: f64,
    /// Keypoint AP of the same keypointer on annotated boxes.
    pub keypoint_ap_gt_boxes: f64,
    pub detector_ratios: RatioLog,
    pub keypoint_ratios: RatioLog,
    /// Stage-two training crops cut from the unlabeled pool.
    pub pseudo_boxes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Teacher box AP right after burn-in, shared by both arms.
    pub burn_in_box_ap: f64,
    pub adapted: ArmResult,
    pub baseline: ArmResult,
    pub seconds: f64,
}

fn box_ap(model: &SetPredictor, test: &[SceneRecord]) -> Result<f64> {
    let dets = box_detections(model, test, 0.0)?;
    Ok(evaluate(&eval_images(test), &dets, EvalMode::Box, &EvalParams::default())?
        .ap
        .unwrap_or(0.0))
}

fn keypoint_ap(cfg: &BenchmarkConfig, boxes: BoxSource, kp: &SetPredictor, test: &[SceneRecord]) -> Result<f64> {
    let dets = pose_detections(test, boxes, kp, cfg.report_threshold)?;
    Ok(evaluate(&eval_images(test), &dets, EvalMode::Keypoint, &EvalParams::default())?
        .ap
        .unwrap_or(0.0))
}

/// Runs both arms for one seed.
pub fn run_benchmark_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let data = cfg.data(seed)?;
    let none = RunPaths::default();

    let det0 = SetPredictor::new(cfg.detector.clone(), seed)?;
    let det0 = run_supervised(&cfg.phase(Stage::Boxes, cfg.detector_burn_in, seed, 0.0), det0, &data.labeled, &none)?.student;
    let burn_in_box_ap = box_ap(&det0, &data.test)?;

    let crops = gt_crop_scenes(&data.labeled, cfg.keypointer.input_size)?;
    let kp0 = SetPredictor::new(cfg.keypointer.clone(), seed + 1)?;
    let kp0 = run_supervised(&cfg.phase(Stage::Keypoints, cfg.keypoint_burn_in, seed + 1, 0.0), kp0, &crops, &none)?.student;

    let arm = |lambda_u: f64, pseudo_source: Option<&[SceneRecord]>| -> Result<(ArmResult, Vec<SceneRecord>)> {
        let det = run_semisup(
            &cfg.phase(Stage::Boxes, cfg.detector_steps, seed + 2, lambda_u),
            det0.clone(),
            &data.labeled,
            &data.unlabeled,
            &none,
        )?;
        let teacher = det.model();
        let pseudo = pseudo_label_boxes_for_stage_two(teacher, &data.unlabeled, cfg.box_threshold, cfg.keypointer.input_size)?;
        let pool: &[SceneRecord] = match pseudo_source {
            Some(p) => p,
            None => &pseudo,
        };
        let kp = if pool.is_empty() {
            run_supervised(&cfg.phase(Stage::Keypoints, cfg.keypoint_steps, seed + 3, 0.0), kp0.clone(), &crops, &none)?
        } else {
            run_semisup(
                &cfg.phase(Stage::Keypoints, cfg.keypoint_steps, seed + 3, lambda_u),
                kp0.clone(),
                &crops,
                pool,
                &none,
            )?
        };
        Ok((
            ArmResult {
                lambda_u,
                box_ap: box_ap(teacher, &data.test)?,
                keypoint_ap: keypoint_ap(cfg, BoxSource::Detector(teacher, cfg.box_threshold), kp.model(), &data.test)?,
                keypoint_ap_gt_boxes: keypoint_ap(cfg, BoxSource::GroundTruth, kp.model(), &data.test)?,
                detector_ratios: det.ratios.clone(),
                keypoint_ratios: kp.ratios.clone(),
                pseudo_boxes: pseudo.len(),
            },
            pseudo,
        ))
    };
    let (adapted, pseudo) = arm(cfg.lambda_u, None)?;
    let (baseline, _) = arm(0.0, Some(&pseudo))?;
    Ok(SeedResult {
        seed,
        burn_in_box_ap,
        adapted,
        baseline,
        seconds: start.elapsed().as_secs_f64(),
    })
}
