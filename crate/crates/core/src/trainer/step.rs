use super::ema::TeacherStudent;
use super::optim::Adam;
use super::ratio::RatioEntry;
use crate::autodiff::{Tape, Var};
use crate::dataio::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::{apply_aug, AugConfig, Keypoint, Labels};
use crate::losses::{
    hungarian_loss_boxes, hungarian_loss_keypoints, total_loss, unsup_losses, LossBreakdown,
    LossWeights, SlotCounts, Stage,
};
use crate::posemodel::SetPredictor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scenes consumed by one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchPlan {
    pub labeled: Vec<SceneRecord>,
    /// Annotations here are never read.
    pub unlabeled: Vec<SceneRecord>,
}

impl BatchPlan {
    pub fn supervised(labeled: Vec<SceneRecord>) -> Self {
        Self {
            labeled,
            unlabeled: Vec::new(),
        }
    }

    pub fn semisup(labeled: Vec<SceneRecord>, unlabeled: Vec<SceneRecord>) -> Self {
        Self { labeled, unlabeled }
    }
}

/// Everything a step needs besides the model and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub weak: AugConfig,
    pub strong: AugConfig,
}

impl StepConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            weights: LossWeights::default(),
            weak: AugConfig::weak(),
            strong: AugConfig::strong(),
        }
    }
}

/// Ground truth of `scene` for the given stage.
pub fn scene_labels(scene: &SceneRecord, stage: Stage) -> Labels {
    match stage {
        Stage::Boxes => Labels::Boxes(scene.persons.iter().map(|p| p.bbox).collect()),
        Stage::Keypoints => Labels::Keypoints(
            scene
                .persons
                .iter()
                .flat_map(|p| p.keypoints.iter().filter(|k| k.is_annotated()).copied())
                .collect::<Vec<Keypoint>>(),
        ),
    }
}

struct Supervised {
    loss: Var,
    counts: SlotCounts,
}

/// Weak-augments each labeled scene and sums Hungarian losses, scaled by
/// `1 / len`.
fn supervised_part(
    tape: &mut Tape,
    model: &SetPredictor,
    bound: &crate::autodiff::Bound,
    scenes: &[SceneRecord],
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<Supervised> {
    let mut terms = Vec::with_capacity(scenes.len());
    let mut counts = SlotCounts::default();
    for scene in scenes {
        let aug = cfg.weak.sample(rng);
        let view = apply_aug(&aug, scene)?;
        let pred = model.forward(tape, bound, &view.raster)?;
        let set = match scene_labels(&view, cfg.stage) {
            Labels::Boxes(b) => hungarian_loss_boxes(tape, &b, &pred, &cfg.weights)?,
            Labels::Keypoints(k) => hungarian_loss_keypoints(tape, &k, &pred, &cfg.weights)?,
        };
        counts.add(set.counts);
        terms.push(set.loss);
    }
    let loss = mean_of(tape, &terms)?;
    Ok(Supervised { loss, counts })
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.scalar(0.0));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn apply_gradients(
    tape: &Tape,
    loss: Var,
    model: &mut SetPredictor,
    bound: &crate::autodiff::Bound,
    opt: &mut Adam,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let grads = model.params.collect_grads(bound, &mut grads);
    opt.step(&mut model.params, &grads)?;
    Ok(())
}

/// One supervised update on `batch.labeled`.
pub fn train_step_supervised(
    model: &mut SetPredictor,
    opt: &mut Adam,
    batch: &BatchPlan,
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    if batch.labeled.is_empty() {
        return Err(Error::Training("supervised step needs labeled scenes".into()));
    }
    if !batch.unlabeled.is_empty() {
        return Err(Error::Training(
            "supervised step got unlabeled scenes".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let sup = supervised_part(&mut tape, model, &bound, &batch.labeled, cfg, rng)?;
    let zero = tape.scalar(0.0);
    let (loss, mut breakdown) = total_loss(&mut tape, sup.loss, zero, zero, &cfg.weights)?;
    breakdown.labeled = sup.counts;
    apply_gradients(&tape, loss, model, &bound, opt)?;
    Ok(breakdown)
}

/// One teacher-student update.
///
/// Labeled scenes give the supervised term. Each unlabeled scene gets a weak
/// and a strong view: the teacher labels the weak view without a tape, the
/// student is trained on the strong view against those labels moved into its
/// frame. Only the student is optimized; the teacher then tracks it by EMA.
pub fn train_step_semisup(
    ts: &mut TeacherStudent,
    opt: &mut Adam,
    batch: &BatchPlan,
    cfg: &StepConfig,
    rng: &mut impl Rng,
    iteration: usize,
) -> Result<(LossBreakdown, RatioEntry)> {
    if batch.labeled.is_empty() || batch.unlabeled.is_empty() {
        return Err(Error::Training(
            "semi-supervised step needs labeled and unlabeled scenes".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = ts.student.params.bind(&mut tape, true);
    let sup = supervised_part(&mut tape, &ts.student, &bound, &batch.labeled, cfg, rng)?;

    // With a zero weight the unlabeled part cannot change the update.
    let active: &[SceneRecord] = if cfg.weights.lambda_u > 0.0 {
        &batch.unlabeled
    } else {
        &[]
    };
    let mut regs = Vec::with_capacity(active.len());
    let mut clss = Vec::with_capacity(batch.unlabeled.len());
    let mut unlabeled = SlotCounts::default();
    let mut pseudo_labels = 0;
    let mut dropped = 0;
    for scene in active {
        let weak = cfg.weak.sample(rng);
        let strong = cfg.strong.sample(rng);
        let scene = scene.unlabeled();
        let teacher_view = apply_aug(&weak, &scene)?;
        let teacher_pred = ts.teacher.predict(&teacher_view.raster)?;
        let student_view = apply_aug(&strong, &scene)?;
        let student_pred = ts.student.forward(&mut tape, &bound, &student_view.raster)?;
        let u = unsup_losses(
            &mut tape,
            &teacher_pred,
            &student_pred,
            &weak,
            &strong,
            &cfg.weights,
            cfg.stage,
        )?;
        regs.push(u.reg);
        clss.push(u.cls);
        unlabeled.add(u.counts);
        pseudo_labels += u.pseudo_labels;
        dropped += u.dropped;
    }
    let reg = mean_of(&mut tape, &regs)?;
    let cls = mean_of(&mut tape, &clss)?;
    let (loss, mut breakdown) = total_loss(&mut tape, sup.loss, reg, cls, &cfg.weights)?;
    breakdown.labeled = sup.counts;
    breakdown.unlabeled = unlabeled;
    apply_gradients(&tape, loss, &mut ts.student, &bound, opt)?;
    ts.ema_update()?;
    let entry = RatioEntry {
        iteration,
        stage: cfg.stage,
        slots_per_image: ts.student.cfg.num_queries,
        labeled_images: batch.labeled.len(),
        unlabeled_images: active.len(),
        labeled: sup.counts,
        unlabeled,
        pseudo_labels,
        dropped,
    };
    Ok((breakdown, entry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_stickworld, StickWorldConfig};
    use crate::posemodel::StageConfig;
    use crate::trainer::optim::OptimConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SetPredictor {
        let cfg = StageConfig {
            embed_dim: 16,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            input_size: (32, 32),
            token_grid: (4, 4),
            ..StageConfig::detector()
        };
        SetPredictor::new(cfg, 7).unwrap()
    }

    fn scenes(n: usize) -> Vec<SceneRecord> {
        generate_stickworld(&StickWorldConfig::source(3), n).unwrap()
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut m = tiny();
        let mut opt = Adam::new(OptimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = StepConfig::new(Stage::Boxes);
        assert!(train_step_supervised(&mut m, &mut opt, &BatchPlan::default(), &cfg, &mut rng).is_err());
    }

    #[test]
    fn identical_steps_are_bit_identical() {
        let batch = BatchPlan::supervised(scenes(2));
        let cfg = StepConfig::new(Stage::Boxes);
        let run = || {
            let mut m = tiny();
            let mut opt = Adam::new(OptimConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let b = train_step_supervised(&mut m, &mut opt, &batch, &cfg, &mut rng).unwrap();
            (b.total.to_bits(), m.params.fingerprint())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_gt_scenes_train_only_the_class_head() {
        let batch = BatchPlan::supervised(scenes(2).iter().map(|s| s.unlabeled()).collect());
        let mut m = tiny();
        let before = m.clone();
        let mut opt = Adam::new(OptimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = StepConfig::new(Stage::Boxes);
        let b = train_step_supervised(&mut m, &mut opt, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(b.labeled.positive, 0);
        assert_eq!(b.labeled.negative, 2 * m.cfg.num_queries);
        for name in ["head.geo1.w", "head.geo1.b", "head.geo2.w", "head.geo2.b"] {
            assert_eq!(m.params.get(name), before.params.get(name), "{name}");
        }
        assert_ne!(m.params.get("head.cls.w"), before.params.get("head.cls.w"));
    }

    #[test]
    fn semisup_step_never_moves_a_frozen_teacher() {
        let data = scenes(3);
        let batch = BatchPlan::semisup(vec![data[0].clone()], data[1..].to_vec());
        let mut ts = TeacherStudent::new(tiny(), 1.0).unwrap();
        let before = ts.teacher.params.fingerprint();
        let mut opt = Adam::new(OptimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = StepConfig::new(Stage::Boxes);
        cfg.weights.tau = 0.3;
        let (_, entry) = train_step_semisup(&mut ts, &mut opt, &batch, &cfg, &mut rng, 0).unwrap();
        assert_eq!(ts.teacher.params.fingerprint(), before);
        assert_ne!(ts.student.params.fingerprint(), before);
        assert_eq!(entry.unlabeled.total(), 2 * ts.student.cfg.num_queries);
    }

    #[test]
    fn unreachable_threshold_gives_zero_regression() {
        let data = scenes(3);
        let batch = BatchPlan::semisup(vec![data[0].clone()], data[1..].to_vec());
        let mut ts = TeacherStudent::new(tiny(), 0.99).unwrap();
        let mut opt = Adam::new(OptimConfig::default());
        let mut cfg = StepConfig::new(Stage::Boxes);
        cfg.weights.tau = 1.0;
        for i in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (b, e) = train_step_semisup(&mut ts, &mut opt, &batch, &cfg, &mut rng, i as usize).unwrap();
            assert_eq!(b.unsup_reg, 0.0);
            assert_eq!(e.unlabeled.positive, 0);
        }
    }

    #[test]
    fn zero_unsup_weight_matches_supervised_step_plus_ema() {
        let data = scenes(3);
        let labeled = vec![data[0].clone(), data[1].clone()];
        let mut cfg = StepConfig::new(Stage::Boxes);
        cfg.weights.lambda_u = 0.0;
        cfg.weights.tau = 0.3;

        let mut ts = TeacherStudent::new(tiny(), 0.9).unwrap();
        let mut opt = Adam::new(OptimConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = BatchPlan::semisup(labeled.clone(), vec![data[2].clone()]);
        let (b1, _) = train_step_semisup(&mut ts, &mut opt, &batch, &cfg, &mut rng, 0).unwrap();

        let mut m = tiny();
        let mut teacher = m.params.clone();
        let mut opt2 = Adam::new(OptimConfig::default());
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let b2 = train_step_supervised(&mut m, &mut opt2, &BatchPlan::supervised(labeled), &cfg, &mut rng2)
            .unwrap();
        crate::trainer::ema::ema_update(&mut teacher, &m.params, 0.9).unwrap();

        assert_eq!(b1.supervised, b2.supervised);
        assert_eq!(b1.total, b2.total);
        assert_eq!(ts.student.params.fingerprint(), m.params.fingerprint());
        assert_eq!(ts.teacher.params.fingerprint(), teacher.fingerprint());
    }
}
