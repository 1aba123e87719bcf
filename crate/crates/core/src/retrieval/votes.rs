use super::index::SearchHit;
use crate::error::{Error, Result};
use crate::metrics::ndcg_at_k;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Relevant,
    Indifferent,
    Irrelevant,
}

impl Vote {
    /// Graded relevance used for ranking quality.
    pub fn relevance(self) -> f64 {
        match self {
            Vote::Relevant => 2.0,
            Vote::Indifferent => 1.0,
            Vote::Irrelevant => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub session_id: String,
    pub query_id: String,
    pub result_id: String,
    pub vote: Vote,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

type VoteKey = (String, String, String);

/// Append-only vote log; the latest line per (session, query, result) wins.
#[derive(Debug, Default)]
pub struct VoteStore {
    path: Option<PathBuf>,
    latest: BTreeMap<VoteKey, VoteRecord>,
}

fn key(r: &VoteRecord) -> VoteKey {
    (r.session_id.clone(), r.query_id.clone(), r.result_id.clone())
}

impl VoteStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays an existing log, creating it if missing.
    pub fn open(path: &Path) -> Result<Self> {
        let mut latest = BTreeMap::new();
        if path.exists() {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: VoteRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {e}", i + 1),
                })?;
                latest.insert(key(&r), r);
            }
        } else {
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            latest,
        })
    }

    pub fn upsert(&mut self, record: VoteRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&record).expect("serializable");
            line.push('\n');
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        self.latest.insert(key(&record), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn votes_for(&self, query_id: &str) -> Vec<&VoteRecord> {
        self.latest.values().filter(|r| r.query_id == query_id).collect()
    }

    /// Mean relevance per result across sessions that voted on it.
    pub fn relevances(&self, query_id: &str) -> HashMap<String, f64> {
        let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
        for r in self.votes_for(query_id) {
            let e = acc.entry(r.result_id.clone()).or_default();
            e.0 += r.vote.relevance();
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NdcgReport {
    pub query_id: String,
    pub k: usize,
    pub ndcg: f64,
    /// Results in the top `k` that received at least one vote.
    pub voted: usize,
    pub sessions: usize,
}

/// Ranking quality of `hits` judged by the stored votes. Unvoted results
/// count as irrelevant; `None` when the query has no votes at all.
pub fn ndcg_from_votes(store: &VoteStore, query_id: &str, hits: &[SearchHit], k: usize) -> Result<Option<NdcgReport>> {
    let votes = store.votes_for(query_id);
    if votes.is_empty() {
        return Ok(None);
    }
    let sessions: BTreeSet<&str> = votes.iter().map(|r| r.session_id.as_str()).collect();
    let rel = store.relevances(query_id);
    let top = &hits[..k.min(hits.len())];
    let ranking: Vec<f64> = top.iter().map(|h| rel.get(&h.result_id).copied().unwrap_or(0.0)).collect();
    Ok(Some(NdcgReport {
        query_id: query_id.to_string(),
        k,
        ndcg: ndcg_at_k(&ranking, k)?,
        voted: top.iter().filter(|h| rel.contains_key(&h.result_id)).count(),
        sessions: sessions.len(),
    }))
}
