use artpose_core::dataio::{coco, load_coco};
use artpose_core::metrics::Detection;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn artpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artpose")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = artpose(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DETECTOR_ARCH: &str = "num_queries = 4\ninput_size = [32, 32]\ntoken_grid = [4, 4]\nembed_dim = 8\nheads = 2\nffn_dim = 8\nencoder_layers = 1\ndecoder_layers = 1\nnum_classes = 2\ngeometry_dim = 4\n";
const KEYPOINT_ARCH: &str = "num_queries = 17\ninput_size = [16, 12]\ntoken_grid = [4, 3]\nembed_dim = 8\nheads = 2\nffn_dim = 8\nencoder_layers = 1\ndecoder_layers = 1\nnum_classes = 18\ngeometry_dim = 2\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("det.toml"), DETECTOR_ARCH).unwrap();
        std::fs::write(root.join("kp.toml"), KEYPOINT_ARCH).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, name: &str, domain: &str, count: &str, seed: &str) -> PathBuf {
        let out = self.p(name);
        ok(&["gen-data", "--domain", domain, "--count", count, "--seed", seed, "--out", s(&out)]);
        out
    }
}

fn ap_line(report: &str) -> f64 {
    let line = report.lines().find(|l| l.trim_start().starts_with("AP ")).expect("AP line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn perfect_predictions_score_one_in_both_modes() {
    let f = Fixture::new();
    let data = f.gen("test.json", "target", "6", "3");
    let scenes = load_coco(&data).unwrap();
    let dets: Vec<Detection> = scenes
        .iter()
        .flat_map(|sc| {
            sc.persons.iter().map(|p| Detection {
                image_id: sc.id.clone(),
                bbox: p.bbox,
                keypoints: p.keypoints,
                score: 1.0,
            })
        })
        .collect();
    let results = f.p("perfect.json");
    coco::write_json(&results, &coco::detections_to_results(&scenes, &dets, true).unwrap()).unwrap();
    for mode in ["box", "keypoint"] {
        let report = ok(&["eval", "--data", s(&data), "--mode", mode, "--predictions", s(&results)]);
        assert_eq!(ap_line(&report), 1.0, "{report}");
    }
}

#[test]
fn same_seed_gives_identical_telemetry() {
    let f = Fixture::new();
    let data = f.gen("train.json", "source", "4", "1");
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = f.p(run);
        ok(&["train-detector", "--data", s(&data), "--arch", s(&f.p("det.toml")), "--steps", "5", "--seed", "7", "--out", s(&out)]);
        logs.push(std::fs::read(out.join("telemetry.jsonl")).unwrap());
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("student-final.ckpt.meta.json")).unwrap()).unwrap();
        assert_eq!(meta["command"], "train-detector");
        assert_eq!(meta["config_hash"].as_str().unwrap().len(), 16);
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(String::from_utf8_lossy(&logs[0]).lines().count(), 5);
}

#[test]
fn two_stage_pipeline_with_ground_truth_boxes() {
    let f = Fixture::new();
    let train = f.gen("train.json", "source", "4", "1");
    let pool = f.p("pool.json");
    ok(&["gen-data", "--domain", "target", "--count", "4", "--seed", "2", "--unlabeled", "--out", s(&pool)]);
    let test = f.gen("test.json", "target", "3", "3");
    let (det, kp, semi) = (f.p("det"), f.p("kp"), f.p("semi"));
    ok(&["train-detector", "--data", s(&train), "--arch", s(&f.p("det.toml")), "--steps", "3", "--out", s(&det)]);
    ok(&["train-keypoints", "--data", s(&train), "--arch", s(&f.p("kp.toml")), "--steps", "3", "--out", s(&kp)]);
    let kp_ckpt = kp.join("student-final.ckpt");
    let det_ckpt = det.join("student-final.ckpt");
    ok(&[
        "train-semisup", "--stage", "keypoints", "--labeled", s(&train), "--unlabeled", s(&pool),
        "--detector", s(&det_ckpt), "--box-threshold", "0.0", "--init", s(&kp_ckpt),
        "--arch", s(&f.p("kp.toml")), "--steps", "2", "--out", s(&semi),
    ]);
    assert!(semi.join("teacher-final.ckpt").exists());
    assert!(semi.join("ratios.jsonl").exists());
    let report = f.p("report.json");
    let text = ok(&[
        "eval", "--data", s(&test), "--mode", "keypoint", "--use-gt-boxes",
        "--keypointer", s(&semi.join("teacher-final.ckpt")), "--out", s(&report),
    ]);
    assert!(text.contains("ground-truth boxes"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(v["result"]["ap"].as_f64().unwrap() >= 0.0);
    ok(&["eval", "--data", s(&test), "--mode", "box", "--detector", s(&det_ckpt)]);
}

#[test]
fn index_then_retrieve() {
    let f = Fixture::new();
    let corpus = f.gen("corpus.json", "target", "12", "4");
    let queries = f.gen("queries.json", "target", "6", "5");
    let index = f.p("poses.idx");
    let thumbs = f.p("thumbs");
    ok(&["build-index", "--corpus", s(&corpus), "--queries", s(&queries), "--thumbnails", s(&thumbs), "--out", s(&index)]);
    let out = ok(&["retrieve", "--index", s(&index), "--query-id", "q0", "--k", "5"]);
    let hits: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(hits.len(), 5);
    assert_eq!(hits[0]["rank"], 1);
    let thumb = hits[0]["thumbnail"].as_str().unwrap();
    assert!(thumbs.join(thumb).exists());
    assert!(f.p("poses.idx.meta.json").exists());
}

#[test]
fn usage_and_path_errors() {
    let out = artpose(&["eval", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    let out = artpose(&["eval", "--data", "/nonexistent/gt.json", "--predictions", "/nonexistent/p.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/gt.json"));
    let out = artpose(&["frobnicate"]);
    assert!(!out.status.success());
}
