use super::descriptor::{compute_descriptor, PoseDescriptor, DESCRIPTOR_DIM, DESCRIPTOR_VERSION};
use crate::error::{Error, Result};
use crate::geometry::Skeleton;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: String,
    pub person_index: usize,
    pub descriptor: PoseDescriptor,
    #[serde(default)]
    pub thumbnail: Option<String>,
}

impl IndexEntry {
    pub fn new(image_id: &str, person_index: usize, keypoints: &Skeleton, thumbnail: Option<String>) -> Result<Self> {
        Ok(Self {
            image_id: image_id.to_string(),
            person_index,
            descriptor: compute_descriptor(keypoints)?,
            thumbnail,
        })
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.image_id, self.person_index)
    }
}

/// A pose offered to users as a search query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPose {
    pub query_id: String,
    pub descriptor: PoseDescriptor,
    #[serde(default)]
    pub thumbnail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub result_id: String,
    pub image_id: String,
    pub person_index: usize,
    pub distance: f64,
    pub thumbnail: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    dims: usize,
    count: usize,
    queries: Vec<QueryPose>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    queries: Vec<QueryPose>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>, queries: Vec<QueryPose>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            e.descriptor.check()?;
            if !seen.insert(e.id()) {
                return Err(Error::Retrieval(format!("duplicate entry {}", e.id())));
            }
        }
        let mut qseen = HashSet::new();
        for q in &queries {
            q.descriptor.check()?;
            if !qseen.insert(q.query_id.clone()) {
                return Err(Error::Retrieval(format!("duplicate query {}", q.query_id)));
            }
        }
        Ok(Self { entries, queries })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn queries(&self) -> &[QueryPose] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query(&self, query_id: &str) -> Option<&QueryPose> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// The `k` nearest entries by Euclidean distance, ties broken by id.
    pub fn query_topk(&self, query: &PoseDescriptor, k: usize) -> Result<Vec<SearchHit>> {
        if self.entries.is_empty() {
            return Err(Error::Retrieval("search on an empty index".into()));
        }
        if query.values.len() != DESCRIPTOR_DIM {
            return Err(Error::Retrieval(format!(
                "query has {} dimensions, index has {DESCRIPTOR_DIM}",
                query.values.len()
            )));
        }
        let mut scored: Vec<(f64, String, &IndexEntry)> = self
            .entries
            .iter()
            .map(|e| Ok((query.distance(&e.descriptor)?, e.id(), e)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, id, e))| SearchHit {
                rank: i + 1,
                result_id: id,
                image_id: e.image_id.clone(),
                person_index: e.person_index,
                distance: d,
                thumbnail: e.thumbnail.clone(),
            })
            .collect())
    }

    /// Header line followed by one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header = Header {
            version: DESCRIPTOR_VERSION.into(),
            dims: DESCRIPTOR_DIM,
            count: self.entries.len(),
            queries: self.queries.clone(),
        };
        writeln!(w, "{}", to_line(&header)).map_err(io)?;
        for e in &self.entries {
            writeln!(w, "{}", to_line(e)).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let parse = |m: String| Error::Parse { path: path.to_path_buf(), msg: m };
        let first = lines
            .next()
            .ok_or_else(|| parse("empty index file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse(e.to_string()))?;
        if header.version != DESCRIPTOR_VERSION || header.dims != DESCRIPTOR_DIM {
            return Err(parse(format!(
                "index built as {} with {} dims, expected {DESCRIPTOR_VERSION} with {DESCRIPTOR_DIM}",
                header.version, header.dims
            )));
        }
        let mut entries = Vec::with_capacity(header.count);
        for (i, l) in lines.enumerate() {
            let l = l.map_err(|e| Error::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&l).map_err(|e| parse(format!("entry {i}: {e}")))?);
        }
        if entries.len() != header.count {
            return Err(parse(format!("header promises {} entries, found {}", header.count, entries.len())));
        }
        Self::new(entries, header.queries)
    }
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Keypoint, Visibility, NUM_JOINTS};
    use crate::retrieval::descriptor::NUM_PAIRS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_entry(rng: &mut ChaCha8Rng, image: usize) -> IndexEntry {
        let mut s = [Keypoint::absent(0); NUM_JOINTS];
        for (j, k) in s.iter_mut().enumerate() {
            *k = Keypoint::new(rng.random(), rng.random(), j, Visibility::Visible);
        }
        IndexEntry::new(&format!("img{image}"), 0, &s, Some(format!("t{image}.pgm"))).unwrap()
    }

    fn index(n: usize) -> RetrievalIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries: Vec<_> = (0..n).map(|i| random_entry(&mut rng, i)).collect();
        let queries = vec![QueryPose {
            query_id: "q0".into(),
            descriptor: entries[3].descriptor.clone(),
            thumbnail: None,
        }];
        RetrievalIndex::new(entries, queries).unwrap()
    }

    #[test]
    fn query_in_index_ranks_first_at_zero() {
        let idx = index(40);
        let hits = idx.query_topk(&idx.entries()[3].descriptor, 5).unwrap();
        assert_eq!((hits[0].result_id.as_str(), hits[0].distance, hits[0].rank), ("img3#0", 0.0, 1));
        assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn k_is_capped_and_prefixes_agree() {
        let idx = index(30);
        let q = &idx.queries()[0].descriptor;
        let h20 = idx.query_topk(q, 20).unwrap();
        let h5 = idx.query_topk(q, 5).unwrap();
        assert_eq!(&h20[..5], &h5[..]);
        assert_eq!(idx.query_topk(q, 100).unwrap().len(), 30);
    }

    #[test]
    fn nearer_hand_set_entry_wins() {
        let mk = |id: &str, c: f64, s: f64| {
            let mut values = vec![0.0; DESCRIPTOR_DIM];
            values[0] = c;
            values[1] = s;
            IndexEntry {
                image_id: id.into(),
                person_index: 0,
                descriptor: PoseDescriptor { values, valid: vec![false; NUM_PAIRS] },
                thumbnail: None,
            }
        };
        let idx = RetrievalIndex::new(vec![mk("far", -1.0, 0.0), mk("near", 0.6, 0.8)], vec![]).unwrap();
        let q = mk("q", 1.0, 0.0).descriptor;
        let hits = idx.query_topk(&q, 1).unwrap();
        assert_eq!(hits[0].image_id, "near");
        assert!((hits[0].distance - 0.8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_entry(&mut rng, 0);
        let mut b = e.clone();
        b.image_id = "a".into();
        let idx = RetrievalIndex::new(vec![e.clone(), b], vec![]).unwrap();
        let hits = idx.query_topk(&e.descriptor, 2).unwrap();
        assert_eq!(hits[0].result_id, "a#0");
    }

    #[test]
    fn errors() {
        let idx = RetrievalIndex::default();
        let q = index(5).entries()[0].descriptor.clone();
        assert!(idx.query_topk(&q, 3).is_err());
        let short = PoseDescriptor { values: vec![0.0; 4], valid: vec![false; 2] };
        assert!(index(5).query_topk(&short, 3).is_err());
        let e = index(5).entries()[0].clone();
        assert!(RetrievalIndex::new(vec![e.clone(), e], vec![]).is_err());
    }

    #[test]
    fn save_load_gives_identical_search_results() {
        let idx = index(25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.idx");
        idx.save(&p).unwrap();
        let back = RetrievalIndex::load(&p).unwrap();
        assert_eq!(back, idx);
        let q = &idx.queries()[0].descriptor;
        assert_eq!(back.query_topk(q, 20).unwrap(), idx.query_topk(q, 20).unwrap());
    }
}
