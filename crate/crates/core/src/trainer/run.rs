use super::ema::{TeacherStudent, DEFAULT_EMA_DECAY};
use super::optim::{Adam, OptimConfig};
use super::ratio::RatioLog;
use super::step::{train_step_semisup, train_step_supervised, BatchPlan, StepConfig};
use crate::dataio::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::AugConfig;
use crate::losses::{LossBreakdown, LossWeights, Stage};
use crate::posemodel::SetPredictor;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// One training run of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Seeds batch selection and augmentation; step `t` uses stream `t`.
    pub seed: u64,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub ema_decay: f64,
    pub weak: AugConfig,
    pub strong: AugConfig,
    /// Checkpoint period in steps; 0 keeps only the final weights.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Boxes,
            steps: 1000,
            labeled_batch: 4,
            unlabeled_batch: 4,
            seed: 0,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            weak: AugConfig::weak(),
            strong: AugConfig::strong(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 || self.labeled_batch == 0 {
            return Err(Error::Config(
                "steps and labeled_batch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            stage: self.stage,
            weights: self.weights,
            weak: self.weak.clone(),
            strong: self.strong.clone(),
        }
    }
}

/// Telemetry line written after every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub supervised: f64,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub total: f64,
    /// Unlabeled slots matched to pseudo-labels.
    pub pos_count: usize,
    /// Unlabeled slots trained towards background.
    pub neg_count: usize,
}

impl StepRecord {
    fn new(iteration: usize, b: &LossBreakdown) -> Self {
        Self {
            iteration,
            supervised: b.supervised,
            unsup_cls: b.unsup_cls,
            unsup_reg: b.unsup_reg,
            total: b.total,
            pos_count: b.unlabeled.positive,
            neg_count: b.unlabeled.negative,
        }
    }
}

/// Optional run outputs.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    /// Line-delimited JSON step records.
    pub telemetry: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    /// Stamped into checkpoint metadata.
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: SetPredictor,
    /// Present for semi-supervised runs.
    pub teacher: Option<SetPredictor>,
    pub history: Vec<StepRecord>,
    pub ratios: RatioLog,
}

impl TrainOutcome {
    /// Teacher when there is one, otherwise the student.
    pub fn model(&self) -> &SetPredictor {
        self.teacher.as_ref().unwrap_or(&self.student)
    }

    pub fn into_model(self) -> SetPredictor {
        self.teacher.unwrap_or(self.student)
    }
}

/// Generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn pick(pool: &[SceneRecord], n: usize, rng: &mut ChaCha8Rng) -> Vec<SceneRecord> {
    index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

struct Outputs {
    telemetry: Option<(PathBuf, BufWriter<File>)>,
    checkpoints: Option<PathBuf>,
    config_hash: Option<String>,
}

impl Outputs {
    fn open(paths: &RunPaths) -> Result<Self> {
        let telemetry = match &paths.telemetry {
            Some(p) => Some((
                p.clone(),
                BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?),
            )),
            None => None,
        };
        if let Some(dir) = &paths.checkpoints {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            telemetry,
            checkpoints: paths.checkpoints.clone(),
            config_hash: paths.config_hash.clone(),
        })
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.telemetry {
            let line = serde_json::to_string(r).expect("plain record");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, tag: &str, iteration: usize, models: &[(&str, &SetPredictor)]) -> Result<()> {
        if let Some(dir) = &self.checkpoints {
            for (role, m) in models {
                let path = dir.join(format!("{role}-{tag}.ckpt"));
                m.save(&path, serde_json::json!({
                    "iteration": iteration,
                    "role": role,
                    "config_hash": self.config_hash,
                }))?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.telemetry {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

fn lr_scale(cfg: &TrainConfig, step: usize) -> f64 {
    if (step as f64) >= cfg.optim.lr_drop_at * cfg.steps as f64 && cfg.optim.lr_drop_at < 1.0 {
        0.1
    } else {
        1.0
    }
}

fn check_stage(cfg: &TrainConfig, model: &SetPredictor) -> Result<()> {
    let want = match cfg.stage {
        Stage::Boxes => 4,
        Stage::Keypoints => 2,
    };
    if model.cfg.geometry_dim != want {
        return Err(Error::Config(format!(
            "stage {:?} needs geometry_dim {want}, model has {}",
            cfg.stage, model.cfg.geometry_dim
        )));
    }
    Ok(())
}

/// Supervised training on `labeled`.
pub fn run_supervised(
    cfg: &TrainConfig,
    mut model: SetPredictor,
    labeled: &[SceneRecord],
    paths: &RunPaths,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage(cfg, &model)?;
    if labeled.is_empty() {
        return Err(Error::Training("no labeled scenes".into()));
    }
    let step_cfg = cfg.step_config();
    let mut opt = Adam::new(cfg.optim.clone());
    let mut out = Outputs::open(paths)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.lr_scale = lr_scale(cfg, step);
        let mut rng = step_rng(cfg.seed, step);
        let batch = BatchPlan::supervised(pick(labeled, cfg.labeled_batch, &mut rng));
        let b = train_step_supervised(&mut model, &mut opt, &batch, &step_cfg, &mut rng)?;
        let rec = StepRecord::new(step, &b);
        out.record(&rec)?;
        history.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            out.checkpoint(&format!("{:06}", step + 1), step + 1, &[("student", &model)])?;
        }
    }
    out.checkpoint("final", cfg.steps, &[("student", &model)])?;
    out.finish()?;
    Ok(TrainOutcome {
        student: model,
        teacher: None,
        history,
        ratios: RatioLog::default(),
    })
}

/// Teacher-student training from `model`; the teacher starts as its copy.
pub fn run_semisup(
    cfg: &TrainConfig,
    model: SetPredictor,
    labeled: &[SceneRecord],
    unlabeled: &[SceneRecord],
    paths: &RunPaths,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_stage(cfg, &model)?;
    if labeled.is_empty() || unlabeled.is_empty() || cfg.unlabeled_batch == 0 {
        return Err(Error::Training(
            "semi-supervised training needs labeled and unlabeled scenes".into(),
        ));
    }
    let step_cfg = cfg.step_config();
    let mut ts = TeacherStudent::new(model, cfg.ema_decay)?;
    let mut opt = Adam::new(cfg.optim.clone());
    let mut out = Outputs::open(paths)?;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut ratios = RatioLog::default();
    for step in 0..cfg.steps {
        opt.lr_scale = lr_scale(cfg, step);
        let mut rng = step_rng(cfg.seed, step);
        let l = pick(labeled, cfg.labeled_batch, &mut rng);
        let u = pick(unlabeled, cfg.unlabeled_batch, &mut rng);
        let batch = BatchPlan::semisup(l, u);
        let (b, entry) = train_step_semisup(&mut ts, &mut opt, &batch, &step_cfg, &mut rng, step)?;
        ratios.push(entry)?;
        let rec = StepRecord::new(step, &b);
        out.record(&rec)?;
        history.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            out.checkpoint(
                &format!("{:06}", step + 1),
                step + 1,
                &[("student", &ts.student), ("teacher", &ts.teacher)],
            )?;
        }
    }
    out.checkpoint(
        "final",
        cfg.steps,
        &[("student", &ts.student), ("teacher", &ts.teacher)],
    )?;
    out.finish()?;
    Ok(TrainOutcome {
        student: ts.student,
        teacher: Some(ts.teacher),
        history,
        ratios,
    })
}

/// Reads a step-record log written by a run.
pub fn read_telemetry(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
