//! Hybrid retrieval: the lexical leg always runs, the dense leg runs for
//! tail queries only, and the two result lists are merged without
//! duplicates. Dense results are cached per normalized query with a TTL.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::lexical::InvertedIndex;
use crate::text::normalize_query;
use crate::vector_index::{ExactIndex, IvfIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Lexical,
    Ann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub id: String,
    pub sources: BTreeSet<Source>,
    pub lexical_score: Option<f64>,
    pub ann_score: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub query: String,
    pub eligible: bool,
    pub entries: Vec<RecallEntry>,
}

impl RecallSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

/// Tail queries (fewer impressions than `threshold`, or never seen) are
/// eligible for dense retrieval.
pub fn is_neural_eligible(query: &str, head_queries: &BTreeMap<String, u64>, threshold: f64) -> bool {
    match head_queries.get(&normalize_query(query)) {
        None => true,
        Some(&n) => (n as f64) < threshold,
    }
}

/// 90th percentile (nearest rank) of the per-query impression counts.
pub fn default_threshold(head_queries: &BTreeMap<String, u64>) -> f64 {
    let mut counts: Vec<f64> = head_queries.values().map(|&n| n as f64).collect();
    if counts.is_empty() {
        return f64::INFINITY;
    }
    counts.sort_by(f64::total_cmp);
    crate::vector_index::percentile(&counts, 90.0)
}

/// Rank-interleaved union: lexical₁, ann₁, lexical₂, ann₂, … A product
/// found by both legs appears once, at its first position, with both scores.
pub fn merge_legs(query: &str, eligible: bool, lexical: &[(String, f64)], ann: &[(String, f32)]) -> RecallSet {
    let mut entries: Vec<RecallEntry> = Vec::with_capacity(lexical.len() + ann.len());
    let mut pos: HashMap<String, usize> = HashMap::new();
    let mut add = |id: &str, lex: Option<f64>, dense: Option<f32>| {
        let i = *pos.entry(id.to_string()).or_insert_with(|| {
            entries.push(RecallEntry {
                id: id.to_string(),
                sources: BTreeSet::new(),
                lexical_score: None,
                ann_score: None,
            });
            entries.len() - 1
        });
        let e = &mut entries[i];
        if let Some(s) = lex {
            e.sources.insert(Source::Lexical);
            e.lexical_score = Some(s);
        }
        if let Some(s) = dense {
            e.sources.insert(Source::Ann);
            e.ann_score = Some(s);
        }
    };
    for r in 0..lexical.len().max(ann.len()) {
        if let Some((id, s)) = lexical.get(r) {
            add(id, Some(*s), None);
        }
        if let Some((id, s)) = ann.get(r) {
            add(id, None, Some(*s));
        }
    }
    RecallSet {
        query: query.to_string(),
        eligible,
        entries,
    }
}

pub type CachedHits = Arc<Vec<(String, f32)>>;

struct CacheEntry {
    hits: CachedHits,
    put_at: u64,
    tick: u64,
}

#[derive(Default)]
struct CacheState {
    map: HashMap<String, CacheEntry>,
    recency: BTreeMap<u64, String>,
    tick: u64,
}

/// Bounded TTL + LRU cache of dense results keyed by normalized query.
/// An entry put at `t` is served while `now - t < ttl`.
pub struct AnnCache {
    capacity: usize,
    ttl: u64,
    state: Mutex<CacheState>,
}

impl AnnCache {
    pub fn new(capacity: usize, ttl: u64) -> Self {
        Self {
            capacity,
            ttl,
            state: Mutex::new(CacheState::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, query: &str, now: u64) -> Option<CachedHits> {
        let key = normalize_query(query);
        let mut st = self.state.lock();
        let (put_at, old_tick) = {
            let e = st.map.get(&key)?;
            (e.put_at, e.tick)
        };
        if now.saturating_sub(put_at) >= self.ttl {
            st.map.remove(&key);
            st.recency.remove(&old_tick);
            return None;
        }
        st.tick += 1;
        let tick = st.tick;
        st.recency.remove(&old_tick);
        st.recency.insert(tick, key.clone());
        let e = st.map.get_mut(&key).unwrap();
        e.tick = tick;
        Some(e.hits.clone())
    }

    pub fn put(&self, query: &str, hits: CachedHits, now: u64) {
        if self.capacity == 0 {
            return;
        }
        let key = normalize_query(query);
        let mut st = self.state.lock();
        st.tick += 1;
        let tick = st.tick;
        if let Some(old) = st.map.insert(key.clone(), CacheEntry { hits, put_at: now, tick }) {
            st.recency.remove(&old.tick);
        }
        st.recency.insert(tick, key);
        while st.map.len() > self.capacity {
            let (_, victim) = st.recency.pop_first().expect("recency tracks every entry");
            st.map.remove(&victim);
        }
    }
}

/// Seconds source for cache expiry.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now(&self) -> u64 {
        (**self).now()
    }
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

/// Scripted clock for tests and replay.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(t: u64) -> Self {
        Self(AtomicU64::new(t))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub enum DenseIndex {
    Exact(ExactIndex),
    Ivf { index: IvfIndex, nprobe: usize },
}

impl DenseIndex {
    pub fn dim(&self) -> usize {
        match self {
            DenseIndex::Exact(i) => i.dim(),
            DenseIndex::Ivf { index, .. } => index.dim(),
        }
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(String, f32)>> {
        Ok(match self {
            DenseIndex::Exact(i) => i
                .exact_search(query, k)?
                .into_iter()
                .map(|h| (i.id(h.ordinal).to_string(), h.score))
                .collect(),
            DenseIndex::Ivf { index, nprobe } => index
                .ann_search(query, k, *nprobe)?
                .into_iter()
                .map(|h| (index.id(h.ordinal).to_string(), h.score))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub k_lexical: usize,
    pub k_ann: usize,
    /// Impression threshold for dense eligibility; `None` = 90th percentile.
    pub threshold: Option<f64>,
    pub ttl: u64,
    pub capacity: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            k_lexical: 40,
            k_ann: 40,
            threshold: None,
            ttl: 300,
            capacity: 10_000,
        }
    }
}

pub struct Federation {
    pub model: TwoTowerModel,
    pub lexical: InvertedIndex,
    pub dense: DenseIndex,
    pub head_queries: BTreeMap<String, u64>,
    pub threshold: f64,
    pub config: FederationConfig,
    pub cache: AnnCache,
    clock: Box<dyn Clock>,
}

impl Federation {
    pub fn new(
        model: TwoTowerModel,
        lexical: InvertedIndex,
        dense: DenseIndex,
        head_queries: BTreeMap<String, u64>,
        config: FederationConfig,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        if model.d_out() != dense.dim() {
            return Err(Error::DimensionMismatch {
                expected: dense.dim(),
                actual: model.d_out(),
            });
        }
        let threshold = config.threshold.unwrap_or_else(|| default_threshold(&head_queries));
        Ok(Self {
            cache: AnnCache::new(config.capacity, config.ttl),
            model,
            lexical,
            dense,
            head_queries,
            threshold,
            config,
            clock,
        })
    }

    pub fn is_eligible(&self, query: &str) -> bool {
        is_neural_eligible(query, &self.head_queries, self.threshold)
    }

    /// Dense leg alone (cache consulted first), regardless of eligibility.
    pub fn ann_leg(&self, query: &str, k: usize) -> Result<CachedHits> {
        let now = self.clock.now();
        if let Some(hit) = self.cache.get(query, now) {
            if hit.len() == k {
                return Ok(hit);
            }
            if hit.len() > k {
                return Ok(Arc::new(hit[..k].to_vec()));
            }
        }
        let ids = self.model.query_tokens(query);
        let hits = if ids.is_empty() {
            Arc::new(Vec::new())
        } else {
            let e = self.model.encode(&ids)?;
            Arc::new(self.dense.search(e.as_slice(), k)?)
        };
        self.cache.put(query, hits.clone(), now);
        Ok(hits)
    }

    pub fn hybrid_retrieve(&self, query: &str, k_lexical: usize, k_ann: usize) -> Result<RecallSet> {
        let lexical = self.lexical.lexical_retrieve(query, k_lexical);
        let eligible = self.is_eligible(query);
        let dense = if eligible && k_ann > 0 {
            self.ann_leg(query, k_ann)?
        } else {
            Arc::new(Vec::new())
        };
        Ok(merge_legs(&normalize_query(query), eligible, &lexical, &dense))
    }

    pub fn retrieve(&self, query: &str) -> Result<RecallSet> {
        self.hybrid_retrieve(query, self.config.k_lexical, self.config.k_ann)
    }

    /// One query per input line, one JSON recall set per output line. Blank
    /// lines are skipped; a failing query yields `{"query":…,"error":…}`.
    pub fn serve_lines(&self, input: impl BufRead, mut output: impl Write) -> Result<usize> {
        let mut served = 0;
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<stdin>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let out = match self.retrieve(&line) {
                Ok(set) => serde_json::to_string(&set)?,
                Err(e) => serde_json::json!({"query": line, "error": e.to_string()}).to_string(),
            };
            writeln!(output, "{out}").map_err(|e| Error::io("<stdout>", e))?;
            output.flush().map_err(|e| Error::io("<stdout>", e))?;
            served += 1;
        }
        Ok(served)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hits(ids: &[&str]) -> CachedHits {
        Arc::new(ids.iter().enumerate().map(|(i, s)| (s.to_string(), 1.0 - i as f32 * 0.1)).collect())
    }

    #[test]
    fn eligibility() {
        let table: BTreeMap<String, u64> = [("red shoes".to_string(), 100)].into();
        assert!(is_neural_eligible("never seen", &table, 50.0));
        assert!(!is_neural_eligible("red shoes", &table, 100.0));
        assert!(is_neural_eligible("Red  Shoes", &table, 101.0));
        assert!(is_neural_eligible("red shoes", &table, f64::INFINITY));
    }

    #[test]
    fn default_threshold_is_p90() {
        let table: BTreeMap<String, u64> = (1..=10).map(|i| (format!("q{i}"), i * 10)).collect();
        assert_eq!(default_threshold(&table), 90.0);
        assert!(!is_neural_eligible("q9", &table, default_threshold(&table)));
        assert!(is_neural_eligible("q8", &table, default_threshold(&table)));
    }

    #[test]
    fn merge_examples() {
        let lex: Vec<(String, f64)> = (0..5).map(|i| (format!("l{i}"), 5.0 - i as f64)).collect();
        let ann: Vec<(String, f32)> = (0..5).map(|i| (format!("a{i}"), 0.9)).collect();
        let m = merge_legs("q", true, &lex, &ann);
        assert_eq!(m.len(), 10);
        assert_eq!(m.ids()[..4], ["l0", "a0", "l1", "a1"]);

        let same: Vec<(String, f32)> = lex.iter().map(|(id, _)| (id.clone(), 0.5)).collect();
        let m = merge_legs("q", true, &lex, &same);
        assert_eq!(m.len(), 5);
        assert!(m.entries.iter().all(|e| e.sources.len() == 2 && e.lexical_score.is_some() && e.ann_score == Some(0.5)));

        let m = merge_legs("q", false, &lex, &[]);
        assert!(m.entries.iter().all(|e| e.sources == BTreeSet::from([Source::Lexical])));
    }

    #[test]
    fn cache_ttl_boundary() {
        let c = AnnCache::new(4, 10);
        c.put("red shoes", hits(&["a", "b"]), 0);
        assert_eq!(c.get("RED shoes", 9).unwrap(), hits(&["a", "b"]));
        assert!(c.get("red shoes", 10).is_none());
        assert!(c.is_empty());
    }

    #[test]
    fn cache_lru_eviction() {
        let c = AnnCache::new(2, 100);
        c.put("q1", hits(&["a"]), 0);
        c.put("q2", hits(&["b"]), 0);
        c.put("q3", hits(&["c"]), 0);
        assert!(c.get("q1", 1).is_none());
        assert!(c.get("q2", 1).is_some());
        // q2 now most recent, so q3 goes next
        c.put("q4", hits(&["d"]), 1);
        assert!(c.get("q3", 1).is_none());
        assert!(c.get("q2", 1).is_some());
        assert_eq!(c.len(), 2);
        assert!(AnnCache::new(0, 10).get("q", 0).is_none());
    }
}
