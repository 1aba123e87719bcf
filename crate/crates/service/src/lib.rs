//! HTTP service over a pose index: query listing, top-k search, vote
//! collection and vote-judged NDCG.

use artpose_core::retrieval::{ndcg_from_votes, RetrievalIndex, SearchHit, Vote, VoteRecord, VoteStore};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

pub const DEFAULT_K: usize = 20;

pub struct AppState {
    pub index: RetrievalIndex,
    pub votes: Mutex<VoteStore>,
    /// Directory served under `/thumbnails/`.
    pub thumbnails: Option<PathBuf>,
}

impl AppState {
    pub fn new(index: RetrievalIndex, votes: VoteStore, thumbnails: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            index,
            votes: Mutex::new(votes),
            thumbnails,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/queries", get(list_queries))
        .route("/search", get(search))
        .route("/votes", post(post_vote))
        .route("/ndcg", get(ndcg))
        .route("/thumbnails/{name}", get(thumbnail))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

#[derive(Serialize)]
struct QueryInfo<'a> {
    query_id: &'a str,
    thumbnail: Option<&'a str>,
}

async fn list_queries(State(s): State<Arc<AppState>>) -> Response {
    let qs: Vec<QueryInfo> = s
        .index
        .queries()
        .iter()
        .map(|q| QueryInfo {
            query_id: &q.query_id,
            thumbnail: q.thumbnail.as_deref(),
        })
        .collect();
    Json(qs).into_response()
}

#[derive(Deserialize)]
struct SearchParams {
    query_id: String,
    k: Option<usize>,
}

fn ranked(s: &AppState, query_id: &str, k: usize) -> Result<Vec<SearchHit>, Response> {
    let q = s
        .index
        .query(query_id)
        .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown query_id {query_id}")))?;
    if k == 0 {
        return Err(error(StatusCode::UNPROCESSABLE_ENTITY, "k must be at least 1"));
    }
    s.index
        .query_topk(&q.descriptor, k)
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn search(State(s): State<Arc<AppState>>, Query(p): Query<SearchParams>) -> Response {
    let k = p.k.unwrap_or(DEFAULT_K);
    match ranked(&s, &p.query_id, k) {
        Ok(results) => Json(json!({ "query_id": p.query_id, "k": k, "results": results })).into_response(),
        Err(r) => r,
    }
}

#[derive(Serialize)]
struct FieldProblem {
    field: &'static str,
    problem: String,
}

/// Parses a vote body, collecting every problem rather than the first.
fn parse_vote(s: &AppState, body: &[u8]) -> Result<VoteRecord, Vec<FieldProblem>> {
    let v: Value = serde_json::from_slice(body).map_err(|e| {
        vec![FieldProblem {
            field: "body",
            problem: format!("not JSON: {e}"),
        }]
    })?;
    let mut problems = Vec::new();
    let mut text = |field: &'static str| match v.get(field) {
        Some(Value::String(t)) if !t.is_empty() => Some(t.clone()),
        Some(_) => {
            problems.push(FieldProblem {
                field,
                problem: "must be a non-empty string".into(),
            });
            None
        }
        None => {
            problems.push(FieldProblem {
                field,
                problem: "missing".into(),
            });
            None
        }
    };
    let session_id = text("session_id");
    let query_id = text("query_id");
    let result_id = text("result_id");
    let vote = match v.get("vote").map(|x| serde_json::from_value::<Vote>(x.clone())) {
        Some(Ok(vote)) => Some(vote),
        Some(Err(_)) => {
            problems.push(FieldProblem {
                field: "vote",
                problem: "must be one of relevant, indifferent, irrelevant".into(),
            });
            None
        }
        None => {
            problems.push(FieldProblem {
                field: "vote",
                problem: "missing".into(),
            });
            None
        }
    };
    let timestamp = match v.get("timestamp") {
        None | Some(Value::Null) => Some(
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        ),
        Some(t) => t.as_u64().or_else(|| {
            problems.push(FieldProblem {
                field: "timestamp",
                problem: "must be a non-negative integer".into(),
            });
            None
        }),
    };
    if let Some(q) = &query_id {
        if s.index.query(q).is_none() {
            problems.push(FieldProblem {
                field: "query_id",
                problem: format!("unknown query {q}"),
            });
        }
    }
    if let Some(r) = &result_id {
        if !s.index.entries().iter().any(|e| &e.id() == r) {
            problems.push(FieldProblem {
                field: "result_id",
                problem: format!("unknown result {r}"),
            });
        }
    }
    match (session_id, query_id, result_id, vote, timestamp) {
        (Some(session_id), Some(query_id), Some(result_id), Some(vote), Some(timestamp)) if problems.is_empty() => {
            Ok(VoteRecord {
                session_id,
                query_id,
                result_id,
                vote,
                timestamp,
            })
        }
        _ => Err(problems),
    }
}

async fn post_vote(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let rec = match parse_vote(&s, &body) {
        Ok(r) => r,
        Err(fields) => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(json!({ "error": "invalid vote", "fields": fields })),
            )
                .into_response()
        }
    };
    let mut store = s.votes.lock().unwrap_or_else(|p| p.into_inner());
    match store.upsert(rec.clone()) {
        Ok(()) => Json(json!({ "stored": rec })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn ndcg(State(s): State<Arc<AppState>>, Query(p): Query<SearchParams>) -> Response {
    let k = p.k.unwrap_or(DEFAULT_K);
    let hits = match ranked(&s, &p.query_id, k) {
        Ok(h) => h,
        Err(r) => return r,
    };
    let store = s.votes.lock().unwrap_or_else(|p| p.into_inner());
    match ndcg_from_votes(&store, &p.query_id, &hits, k) {
        Ok(Some(r)) => Json(json!({
            "query_id": r.query_id,
            "k": r.k,
            "ndcg": r.ndcg,
            "voted": r.voted,
            "sessions": r.sessions,
            "status": "ok",
        }))
        .into_response(),
        Ok(None) => Json(json!({
            "query_id": p.query_id,
            "k": k,
            "ndcg": null,
            "status": "insufficient data",
        }))
        .into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn thumbnail(State(s): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> Response {
    let Some(dir) = &s.thumbnails else {
        return error(StatusCode::NOT_FOUND, "no thumbnail directory configured");
    };
    if name.contains(['/', '\\']) || name.starts_with('.') {
        return error(StatusCode::BAD_REQUEST, "bad thumbnail name");
    }
    match tokio::fs::read(dir.join(&name)).await {
        Ok(bytes) => {
            let mime = if name.ends_with(".pgm") {
                "image/x-portable-graymap"
            } else {
                "application/octet-stream"
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => error(StatusCode::NOT_FOUND, format!("no thumbnail {name}")),
    }
}
