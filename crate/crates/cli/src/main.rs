//! `artpose`: data generation, two-stage training, evaluation and pose
//! search from the command line.

mod meta;

use anyhow::{bail, Context, Result};
use artpose_core::dataio::{
    coco, generate_stickworld, load_coco, save_coco, DomainTag, SceneRecord, StickWorldConfig,
};
use artpose_core::geometry::{crop_region, empty_skeleton};
use artpose_core::losses::Stage;
use artpose_core::metrics::{
    box_detections, eval_images, evaluate, pose_detections, BoxSource, Detection, EvalMode,
    EvalParams,
};
use artpose_core::posemodel::{
    SetPredictor, StageConfig, CROP_EXPANSION, DEFAULT_BOX_THRESHOLD, DEFAULT_REPORT_THRESHOLD,
};
use artpose_core::retrieval::{compute_descriptor, IndexEntry, QueryPose, RetrievalIndex, VoteStore};
use artpose_core::trainer::{
    gt_crop_scenes, pseudo_label_boxes_for_stage_two, run_semisup, run_supervised, RunPaths,
    TrainConfig, TrainOutcome,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "artpose", version, about = "Semi-supervised two-stage pose estimation and pose search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stick-figure dataset in COCO keypoint format.
    GenData(GenDataArgs),
    /// Supervised training of the person detector.
    TrainDetector(TrainArgs),
    /// Supervised training of the keypoint stage on annotated person crops.
    TrainKeypoints(TrainArgs),
    /// Teacher-student training with an unlabeled pool.
    TrainSemisup(SemisupArgs),
    /// COCO-style box or keypoint evaluation.
    Eval(EvalArgs),
    /// Build a pose search index.
    BuildIndex(BuildIndexArgs),
    /// Rank index entries against one query.
    Retrieve(RetrieveArgs),
    /// Serve search and voting over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Domain {
    Source,
    Target,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    /// Key-value generator config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop all annotations, keeping image records only.
    #[arg(long)]
    unlabeled: bool,
    /// Output COCO JSON; rasters are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled COCO JSON.
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TOML architecture config.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StageArg {
    Detector,
    Keypoints,
}

#[derive(Args)]
struct SemisupArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    labeled: PathBuf,
    /// Unlabeled COCO JSON; annotations in it are ignored.
    #[arg(long)]
    unlabeled: PathBuf,
    /// Detector proposing pseudo-boxes for the keypoint stage.
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    box_threshold: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Box,
    Keypoint,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth COCO JSON.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "box")]
    mode: ModeArg,
    /// COCO results file to score instead of running models.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    keypointer: Option<PathBuf>,
    /// Run the keypoint stage on the annotated boxes.
    #[arg(long)]
    use_gt_boxes: bool,
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    box_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_REPORT_THRESHOLD)]
    report_threshold: f64,
    /// Lowest detector score kept for box evaluation.
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
    #[arg(long, default_value_t = 20)]
    max_dets: usize,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the scored predictions as COCO results.
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// COCO JSON of the searchable collection.
    #[arg(long)]
    corpus: PathBuf,
    /// COCO JSON whose annotated persons become the query poses.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    num_queries: usize,
    /// With both models, index predicted poses instead of annotations.
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    keypointer: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    box_threshold: f64,
    /// Directory for per-person thumbnails.
    #[arg(long)]
    thumbnails: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    votes: PathBuf,
    #[arg(long)]
    thumbnails: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDetector(a) => train_supervised(a, Stage::Boxes),
        Command::TrainKeypoints(a) => train_supervised(a, Stage::Keypoints),
        Command::TrainSemisup(a) => train_semisup(a),
        Command::Eval(a) => eval(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Serve(a) => serve(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    load_coco(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path, geometry_dim: usize) -> Result<SetPredictor> {
    let (m, _) = SetPredictor::load(path).with_context(|| format!("loading {}", path.display()))?;
    if m.cfg.geometry_dim != geometry_dim {
        bail!(
            "{}: expected a model predicting {geometry_dim} geometry values, found {}",
            path.display(),
            m.cfg.geometry_dim
        );
    }
    Ok(m)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct GenDataRun<'a> {
    stickworld: &'a StickWorldConfig,
    count: usize,
    unlabeled: bool,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => StickWorldConfig::load(p)?,
        None => match a.domain {
            Domain::Source => StickWorldConfig::source(0),
            Domain::Target => StickWorldConfig::target(0),
        },
    };
    if a.config.is_some() {
        cfg.domain = match a.domain {
            Domain::Source => DomainTag::Source,
            Domain::Target => DomainTag::Target,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let run = GenDataRun {
        stickworld: &cfg,
        count: a.count,
        unlabeled: a.unlabeled,
    };
    let hash = meta::announce("gen-data", &run);
    let mut scenes = generate_stickworld(&cfg, a.count)?;
    if a.unlabeled {
        scenes = scenes.iter().map(SceneRecord::unlabeled).collect();
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_coco(&a.out, &scenes, true)?;
    meta::write_sidecar(&a.out, "gen-data", &hash, &run)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn stage_arch(stage: Stage, arch: Option<&Path>) -> Result<StageConfig> {
    let cfg = match arch {
        Some(p) => read_toml(p)?,
        None => match stage {
            Stage::Boxes => StageConfig::detector(),
            Stage::Keypoints => StageConfig::keypointer(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(path: Option<&Path>, stage: Stage, steps: Option<usize>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn initial_model(init: Option<&Path>, arch: &StageConfig, seed: u64) -> Result<SetPredictor> {
    match init {
        Some(p) => load_model(p, arch.geometry_dim),
        None => Ok(SetPredictor::new(arch.clone(), seed)?),
    }
}

fn run_paths(out: &Path, hash: &str) -> RunPaths {
    RunPaths {
        telemetry: Some(out.join("telemetry.jsonl")),
        checkpoints: Some(out.to_path_buf()),
        config_hash: Some(hash.to_string()),
    }
}

/// Sidecars for every file a training run leaves in `out`.
fn finish_run(out: &Path, command: &str, hash: &str, run: &impl Serialize, outcome: &TrainOutcome) -> Result<()> {
    if !outcome.ratios.is_empty() {
        let p = out.join("ratios.jsonl");
        let lines: Vec<String> = outcome
            .ratios
            .entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record"))
            .collect();
        std::fs::write(&p, lines.join("\n") + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    for entry in std::fs::read_dir(out)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if p.is_file() && !name.ends_with(".meta.json") {
            meta::write_sidecar(&p, command, hash, run)?;
        }
    }
    let last = outcome.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    eprintln!("finished {} steps, last total loss {last:.4}; outputs in {}", outcome.history.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainRun<'a> {
    data: &'a Path,
    init: Option<&'a Path>,
    arch: &'a StageConfig,
    train: &'a TrainConfig,
}

fn train_supervised(a: TrainArgs, stage: Stage) -> Result<()> {
    let command = match stage {
        Stage::Boxes => "train-detector",
        Stage::Keypoints => "train-keypoints",
    };
    let cfg = train_config(a.config.as_deref(), stage, a.steps, a.seed)?;
    let arch = stage_arch(stage, a.arch.as_deref())?;
    let run = TrainRun {
        data: &a.data,
        init: a.init.as_deref(),
        arch: &arch,
        train: &cfg,
    };
    let hash = meta::announce(command, &run);
    let scenes = load_scenes(&a.data)?;
    let labeled = match stage {
        Stage::Boxes => scenes,
        Stage::Keypoints => gt_crop_scenes(&scenes, arch.input_size)?,
    };
    let model = initial_model(a.init.as_deref(), &arch, cfg.seed)?;
    create_dir(&a.out)?;
    let outcome = run_supervised(&cfg, model, &labeled, &run_paths(&a.out, &hash))?;
    finish_run(&a.out, command, &hash, &run, &outcome)
}

#[derive(Serialize)]
struct SemisupRun<'a> {
    stage: StageArg,
    labeled: &'a Path,
    unlabeled: &'a Path,
    detector: Option<&'a Path>,
    box_threshold: f64,
    init: Option<&'a Path>,
    arch: &'a StageConfig,
    train: &'a TrainConfig,
}

fn train_semisup(a: SemisupArgs) -> Result<()> {
    let stage = match a.stage {
        StageArg::Detector => Stage::Boxes,
        StageArg::Keypoints => Stage::Keypoints,
    };
    let mut cfg = train_config(a.config.as_deref(), stage, a.steps, a.seed)?;
    if let Some(l) = a.lambda_u {
        cfg.weights.lambda_u = l;
        cfg.validate()?;
    }
    let arch = stage_arch(stage, a.arch.as_deref())?;
    if stage == Stage::Keypoints && a.detector.is_none() {
        bail!("the keypoint stage needs --detector to propose pseudo-boxes");
    }
    let run = SemisupRun {
        stage: a.stage,
        labeled: &a.labeled,
        unlabeled: &a.unlabeled,
        detector: a.detector.as_deref(),
        box_threshold: a.box_threshold,
        init: a.init.as_deref(),
        arch: &arch,
        train: &cfg,
    };
    let hash = meta::announce("train-semisup", &run);
    let labeled = load_scenes(&a.labeled)?;
    let pool: Vec<SceneRecord> = load_scenes(&a.unlabeled)?.iter().map(SceneRecord::unlabeled).collect();
    let (labeled, unlabeled) = match stage {
        Stage::Boxes => (labeled, pool),
        Stage::Keypoints => {
            let det = load_model(a.detector.as_deref().expect("checked above"), 4)?;
            let crops = pseudo_label_boxes_for_stage_two(&det, &pool, a.box_threshold, arch.input_size)?;
            eprintln!("{} pseudo-boxes above {} from {} unlabeled scenes", crops.len(), a.box_threshold, pool.len());
            (gt_crop_scenes(&labeled, arch.input_size)?, crops)
        }
    };
    if unlabeled.is_empty() {
        bail!("no unlabeled samples to train on");
    }
    let model = initial_model(a.init.as_deref(), &arch, cfg.seed)?;
    create_dir(&a.out)?;
    let outcome = run_semisup(&cfg, model, &labeled, &unlabeled, &run_paths(&a.out, &hash))?;
    finish_run(&a.out, "train-semisup", &hash, &run, &outcome)
}

#[derive(Serialize)]
struct EvalRun<'a> {
    data: &'a Path,
    mode: ModeArg,
    predictions: Option<&'a Path>,
    detector: Option<&'a Path>,
    keypointer: Option<&'a Path>,
    use_gt_boxes: bool,
    box_threshold: f64,
    report_threshold: f64,
    min_score: f64,
    max_dets: usize,
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = EvalRun {
        data: &a.data,
        mode: a.mode,
        predictions: a.predictions.as_deref(),
        detector: a.detector.as_deref(),
        keypointer: a.keypointer.as_deref(),
        use_gt_boxes: a.use_gt_boxes,
        box_threshold: a.box_threshold,
        report_threshold: a.report_threshold,
        min_score: a.min_score,
        max_dets: a.max_dets,
    };
    let hash = meta::announce("eval", &run);
    let scenes = load_scenes(&a.data)?;
    let mode = match a.mode {
        ModeArg::Box => EvalMode::Box,
        ModeArg::Keypoint => EvalMode::Keypoint,
    };
    let dets: Vec<Detection> = match (&a.predictions, a.mode) {
        (Some(p), _) => {
            if a.use_gt_boxes {
                bail!("--use-gt-boxes runs the keypoint stage and cannot rescore a predictions file");
            }
            let results = coco::read_results(p)?;
            coco::results_to_detections(&scenes, &results)?
        }
        (None, ModeArg::Box) => {
            let det = a.detector.as_deref().context("box evaluation needs --detector or --predictions")?;
            box_detections(&load_model(det, 4)?, &scenes, a.min_score)?
        }
        (None, ModeArg::Keypoint) => {
            let kp = a.keypointer.as_deref().context("keypoint evaluation needs --keypointer or --predictions")?;
            let kp = load_model(kp, 2)?;
            if a.use_gt_boxes {
                pose_detections(&scenes, BoxSource::GroundTruth, &kp, a.report_threshold)?
            } else {
                let det = a.detector.as_deref().context("keypoint evaluation needs --detector or --use-gt-boxes")?;
                let det = load_model(det, 4)?;
                pose_detections(&scenes, BoxSource::Detector(&det, a.box_threshold), &kp, a.report_threshold)?
            }
        }
    };
    let params = EvalParams {
        max_dets: a.max_dets,
        ..Default::default()
    };
    let result = evaluate(&eval_images(&scenes), &dets, mode, &params)?;
    let title = match (a.mode, a.use_gt_boxes) {
        (ModeArg::Box, _) => "box",
        (ModeArg::Keypoint, false) => "keypoint",
        (ModeArg::Keypoint, true) => "keypoint (ground-truth boxes)",
    };
    println!("{}", result.report(title));
    if let Some(p) = &a.dump_predictions {
        let res = coco::detections_to_results(&scenes, &dets, a.mode == ModeArg::Keypoint)?;
        coco::write_json(p, &res)?;
        meta::write_sidecar(p, "eval", &hash, &run)?;
    }
    if let Some(p) = &a.out {
        let report = serde_json::json!({ "config_hash": hash, "mode": a.mode, "result": result });
        coco::write_json(p, &report)?;
        meta::write_sidecar(p, "eval", &hash, &run)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IndexRun<'a> {
    corpus: &'a Path,
    queries: &'a Path,
    num_queries: usize,
    detector: Option<&'a Path>,
    keypointer: Option<&'a Path>,
    box_threshold: f64,
}

fn write_thumbnail(dir: Option<&Path>, name: &str, scene: &SceneRecord, bbox: &artpose_core::geometry::BBox) -> Result<Option<String>> {
    let Some(dir) = dir else { return Ok(None) };
    let region = bbox.expanded(CROP_EXPANSION).clip_unit();
    let crop = crop_region(&scene.raster, region, &empty_skeleton(), StageConfig::keypointer().input_size)?;
    coco::write_pgm(&dir.join(name), &crop.raster)?;
    Ok(Some(name.to_string()))
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let run = IndexRun {
        corpus: &a.corpus,
        queries: &a.queries,
        num_queries: a.num_queries,
        detector: a.detector.as_deref(),
        keypointer: a.keypointer.as_deref(),
        box_threshold: a.box_threshold,
    };
    let hash = meta::announce("build-index", &run);
    let corpus = load_scenes(&a.corpus)?;
    if let Some(d) = &a.thumbnails {
        create_dir(d)?;
    }
    let thumbs = a.thumbnails.as_deref();
    let poses: Vec<(usize, usize, artpose_core::geometry::BBox, artpose_core::geometry::Skeleton)> = match (&a.detector, &a.keypointer) {
        (Some(d), Some(k)) => {
            let (det, kp) = (load_model(d, 4)?, load_model(k, 2)?);
            let one = |i: usize| -> Result<Vec<_>> {
                let dets = pose_detections(&corpus[i..=i], BoxSource::Detector(&det, a.box_threshold), &kp, DEFAULT_REPORT_THRESHOLD)?;
                Ok(dets.into_iter().enumerate().map(|(p, d)| (i, p, d.bbox, d.keypoints)).collect())
            };
            let mut all = Vec::new();
            for i in 0..corpus.len() {
                all.extend(one(i)?);
            }
            all
        }
        (None, None) => corpus
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.persons.iter().enumerate().map(move |(p, person)| (i, p, person.bbox, person.keypoints)))
            .collect(),
        _ => bail!("pass both --detector and --keypointer, or neither to index annotations"),
    };
    let mut entries = Vec::new();
    for (i, p, bbox, kps) in poses {
        let scene = &corpus[i];
        if kps.iter().filter(|k| k.is_annotated()).count() < 2 {
            continue;
        }
        let thumb = write_thumbnail(thumbs, &format!("{}_{p}.pgm", scene.id), scene, &bbox)?;
        entries.push(IndexEntry::new(&scene.id, p, &kps, thumb)?);
    }
    let query_scenes = load_scenes(&a.queries)?;
    let mut queries = Vec::new();
    'outer: for s in &query_scenes {
        for person in &s.persons {
            if queries.len() == a.num_queries {
                break 'outer;
            }
            if person.num_annotated() < 2 {
                continue;
            }
            let qid = format!("q{}", queries.len());
            let thumb = write_thumbnail(thumbs, &format!("query_{qid}.pgm"), s, &person.bbox)?;
            queries.push(QueryPose {
                query_id: qid,
                descriptor: compute_descriptor(&person.keypoints)?,
                thumbnail: thumb,
            });
        }
    }
    if queries.len() < a.num_queries {
        eprintln!("only {} of {} requested queries available", queries.len(), a.num_queries);
    }
    let index = RetrievalIndex::new(entries, queries)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    index.save(&a.out)?;
    meta::write_sidecar(&a.out, "build-index", &hash, &run)?;
    eprintln!("indexed {} poses with {} queries into {}", index.len(), index.queries().len(), a.out.display());
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let index = RetrievalIndex::load(&a.index)?;
    let q = index
        .query(&a.query_id)
        .with_context(|| format!("unknown query_id {}", a.query_id))?;
    for hit in index.query_topk(&q.descriptor, a.k)? {
        println!("{}", serde_json::to_string(&hit)?);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let index = RetrievalIndex::load(&a.index)?;
    let votes = VoteStore::open(&a.votes)?;
    let state = artpose_service::AppState::new(index, votes, a.thumbnails.clone());
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving on http://{}", a.addr);
    rt.block_on(artpose_service::serve(state, &a.addr))
        .with_context(|| format!("serving on {}", a.addr))
}
