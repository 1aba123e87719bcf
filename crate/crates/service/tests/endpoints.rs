use artpose_core::geometry::{Keypoint, Visibility, NUM_JOINTS};
use artpose_core::metrics::ndcg_at_k;
use artpose_core::retrieval::{IndexEntry, QueryPose, RetrievalIndex, VoteStore};
use artpose_service::{router, AppState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::Path;
use tower::ServiceExt;

fn pose(rng: &mut ChaCha8Rng) -> [Keypoint; NUM_JOINTS] {
    let mut s = [Keypoint::absent(0); NUM_JOINTS];
    for (j, k) in s.iter_mut().enumerate() {
        *k = Keypoint::new(rng.random(), rng.random(), j, Visibility::Visible);
    }
    s
}

fn index() -> RetrievalIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let entries = (0..30)
        .map(|i| IndexEntry::new(&format!("img{i:02}"), 0, &pose(&mut rng), Some(format!("img{i:02}.pgm"))).unwrap())
        .collect();
    let queries = (0..10)
        .map(|i| QueryPose {
            query_id: format!("q{i}"),
            descriptor: artpose_core::retrieval::compute_descriptor(&pose(&mut rng)).unwrap(),
            thumbnail: None,
        })
        .collect();
    RetrievalIndex::new(entries, queries).unwrap()
}

fn app(votes: &Path, thumbs: Option<&Path>) -> Router {
    router(AppState::new(index(), VoteStore::open(votes).unwrap(), thumbs.map(Path::to_path_buf)))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn vote(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/votes")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

fn vote_body(session: &str, query: &str, result: &str, v: &str) -> Value {
    json!({ "session_id": session, "query_id": query, "result_id": result, "vote": v })
}

#[tokio::test]
async fn lists_ten_queries() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    let (s, v) = get(&app, "/queries").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 10);
    assert_eq!(v[0]["query_id"], "q0");
}

#[tokio::test]
async fn search_defaults_to_twenty_ranked_results() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    let (s, v) = get(&app, "/search?query_id=q3").await;
    assert_eq!(s, StatusCode::OK);
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 20);
    let d: Vec<f64> = results.iter().map(|r| r["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(results[0]["rank"], 1);
    let (_, v5) = get(&app, "/search?query_id=q3&k=5").await;
    assert_eq!(v5["results"].as_array().unwrap()[..], results[..5]);
}

#[tokio::test]
async fn unknown_query_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    assert_eq!(get(&app, "/search?query_id=nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/ndcg?query_id=nope").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_vote_lists_fields() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    let (s, v) = vote(&app, json!({ "session_id": "", "query_id": "q0", "vote": "meh" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let mut fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    fields.sort_unstable();
    assert_eq!(fields, ["result_id", "session_id", "vote"]);
    let (s, _) = vote(&app, vote_body("s", "q0", "nobody#0", "relevant")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let req = Request::post("/votes").body(Body::from("{oops")).unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn no_votes_reports_insufficient_data() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    let (s, v) = get(&app, "/ndcg?query_id=q1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "insufficient data");
    assert!(v["ndcg"].is_null());
}

#[tokio::test]
async fn all_relevant_votes_give_one() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir.path().join("v.jsonl"), None);
    let (_, v) = get(&app, "/search?query_id=q2").await;
    for r in v["results"].as_array().unwrap() {
        let (s, _) = vote(&app, vote_body("s1", "q2", r["result_id"].as_str().unwrap(), "relevant")).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, n) = get(&app, "/ndcg?query_id=q2").await;
    assert_eq!(n["ndcg"].as_f64().unwrap(), 1.0);
    assert_eq!(n["voted"], 20);
}

#[tokio::test]
async fn ndcg_matches_metric_on_mixed_votes_and_upserts() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("v.jsonl");
    let app = app(&votes, None);
    let (_, v) = get(&app, "/search?query_id=q4").await;
    let ids: Vec<String> = v["results"].as_array().unwrap().iter().map(|r| r["result_id"].as_str().unwrap().to_string()).collect();
    let kinds = ["relevant", "indifferent", "irrelevant"];
    let mut rels = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let k = kinds[(i * 7 + 1) % 3];
        vote(&app, vote_body("s", "q4", id, k)).await;
        rels.push(match k {
            "relevant" => 2.0,
            "indifferent" => 1.0,
            _ => 0.0,
        });
    }
    vote(&app, vote_body("s", "q4", &ids[0], "relevant")).await;
    rels[0] = 2.0;
    let (_, n) = get(&app, "/ndcg?query_id=q4").await;
    let want = ndcg_at_k(&rels, 20).unwrap();
    assert!((n["ndcg"].as_f64().unwrap() - want).abs() < 1e-9);

    let reopened = router(AppState::new(index(), VoteStore::open(&votes).unwrap(), None));
    let (_, again) = get(&reopened, "/ndcg?query_id=q4").await;
    assert_eq!(again["ndcg"], n["ndcg"]);
}

#[tokio::test]
async fn concurrent_votes_all_land_intact() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("v.jsonl");
    let app = app(&votes, None);
    let (_, v) = get(&app, "/search?query_id=q5").await;
    let ids: Vec<String> = v["results"].as_array().unwrap().iter().map(|r| r["result_id"].as_str().unwrap().to_string()).collect();
    let mut tasks = Vec::new();
    for s in 0..8 {
        for id in &ids {
            let app = app.clone();
            let body = vote_body(&format!("s{s}"), "q5", id, "relevant");
            tasks.push(tokio::spawn(async move { vote(&app, body).await.0 }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(VoteStore::open(&votes).unwrap().len(), 8 * ids.len());
}

#[tokio::test]
async fn serves_thumbnails_without_escaping_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img00.pgm"), b"P5\n1 1\n255\n\x80").unwrap();
    let app = app(&dir.path().join("v.jsonl"), Some(dir.path()));
    let res = app
        .clone()
        .oneshot(Request::get("/thumbnails/img00.pgm").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(get(&app, "/thumbnails/..%2Fv.jsonl").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/thumbnails/missing.pgm").await.0, StatusCode::NOT_FOUND);
}
