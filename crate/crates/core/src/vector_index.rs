//! Exact and IVF nearest-neighbour search over product embeddings, plus the
//! packed embedding store used by the re-ranker.
//!
//! The IVF index is cosine-only: centroids are re-normalized after every
//! k-means update and vectors are assigned to the centroid with the highest
//! dot product.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{self, Reader, Writer};
use crate::corpus::Catalog;
use crate::encoder::{EmbeddingVector, Metric, TwoTowerModel};
use crate::error::{Error, Result};

const IVF_MAGIC: &[u8; 8] = b"HRIVFIX\0";
const EXACT_MAGIC: &[u8; 8] = b"HREXACT\0";
pub const INDEX_VERSION: u32 = 1;
const STORE_MAGIC: &[u8; 8] = b"HREMBST\0";
pub const STORE_VERSION: u32 = 1;

pub const KMEANS_MAX_ITERS: usize = 25;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub ordinal: u32,
    pub score: f32,
}

/// Descending score, then ascending ordinal.
fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    // adding 0.0 folds -0.0 into +0.0 so equal scores fall through to the ordinal
    (b.score + 0.0).total_cmp(&(a.score + 0.0)).then(a.ordinal.cmp(&b.ordinal))
}

fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    hits
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| (*x as f64 / n) as f32).collect()
    }
}

/// Row-major `count × dim` matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows(ids: Vec<String>, rows: &[EmbeddingVector]) -> Result<Self> {
        let dim = rows.first().map_or(0, EmbeddingVector::dim);
        let mut m = Self::new(dim);
        for (id, r) in ids.into_iter().zip(rows) {
            m.push(id, r.as_slice())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, id: String, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Binary layout: magic, version, dims, count, id table
    /// (u16 length + utf-8 bytes each), packed little-endian f32 rows.
    pub fn to_store_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4 + self.ids.len() * 10);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_store_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "embedding store";
        let bad = |why: &str| Error::corrupt(WHAT, why);
        if bytes.len() < 24 || &bytes[..8] != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::VersionMismatch {
                what: WHAT.into(),
                found: version,
                expected: STORE_VERSION,
            });
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let mut pos = 24;
        let mut ids = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let len_bytes = bytes.get(pos..pos + 2).ok_or_else(|| bad("truncated id table"))?;
            let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let raw = bytes.get(pos + 2..pos + 2 + len).ok_or_else(|| bad("truncated id table"))?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("invalid utf-8 id"))?);
            pos += 2 + len;
        }
        let rest = &bytes[pos..];
        if rest.len() != count * dim * 4 {
            return Err(bad("vector payload size mismatch"));
        }
        let data = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, ids, data })
    }

    pub fn save_store(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_store_bytes())
    }

    pub fn load_store(path: &Path) -> Result<Self> {
        Self::from_store_bytes(&codec::read_file(path)?)
    }
}

/// Brute-force index; the oracle every approximate result is judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    pub metric: Metric,
    vectors: EmbeddingMatrix,
}

impl ExactIndex {
    pub fn build(embeddings: &EmbeddingMatrix, metric: Metric) -> Self {
        let mut vectors = EmbeddingMatrix::new(embeddings.dim);
        for i in 0..embeddings.len() {
            let row = embeddings.row(i);
            let row = match metric {
                Metric::Cosine => normalized(row),
                Metric::InnerProduct => row.to_vec(),
            };
            vectors.ids.push(embeddings.ids[i].clone());
            vectors.data.extend_from_slice(&row);
        }
        Self { metric, vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn id(&self, ordinal: u32) -> &str {
        &self.vectors.ids[ordinal as usize]
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    fn prepare_query(&self, query: &[f32]) -> Result<Vec<f32>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        Ok(match self.metric {
            Metric::Cosine => normalized(query),
            Metric::InnerProduct => query.to_vec(),
        })
    }

    pub fn exact_search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        let q = self.prepare_query(query)?;
        let hits = (0..self.len())
            .map(|i| Hit {
                ordinal: i as u32,
                score: dot(&q, self.vectors.row(i)),
            })
            .collect();
        Ok(top_k(hits, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(matches!(self.metric, Metric::Cosine) as u8);
        w.u64(self.vectors.dim as u64);
        w.u64(self.vectors.ids.len() as u64);
        for id in &self.vectors.ids {
            w.str(id);
        }
        w.f32s(&self.vectors.data);
        codec::seal(EXACT_MAGIC, INDEX_VERSION, w.bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "exact index";
        let payload = codec::unseal(EXACT_MAGIC, INDEX_VERSION, WHAT, bytes)?;
        let mut r = Reader::new(payload, WHAT);
        let metric = if r.u8()? == 1 { Metric::Cosine } else { Metric::InnerProduct };
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s()?;
        r.finish()?;
        if data.len() != n * dim {
            return Err(Error::corrupt(WHAT, "vector payload size mismatch"));
        }
        Ok(Self {
            metric,
            vectors: EmbeddingMatrix { dim, ids, data },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub n_clusters: usize,
    pub nprobe: usize,
    /// `n_clusters × dim`, unit rows.
    centroids: Vec<f32>,
    /// Posting list per cluster, ascending ordinals.
    lists: Vec<Vec<u32>>,
    vectors: EmbeddingMatrix,
}

impl IvfIndex {
    pub fn dim(&self) -> usize {
        self.vectors.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn id(&self, ordinal: u32) -> &str {
        &self.vectors.ids[ordinal as usize]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim()..(c + 1) * self.dim()]
    }

    /// Cluster indices ordered by similarity to `q` (ties by index).
    fn probe_order(&self, q: &[f32]) -> Vec<usize> {
        let mut order: Vec<(usize, f32)> = (0..self.n_clusters).map(|c| (c, dot(q, self.centroid(c)))).collect();
        order.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
        order.into_iter().map(|(c, _)| c).collect()
    }

    pub fn ann_search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if nprobe == 0 || nprobe > self.n_clusters {
            return Err(Error::invalid(format!(
                "nprobe must lie in [1, {}], got {nprobe}",
                self.n_clusters
            )));
        }
        let q = normalized(query);
        let mut hits = Vec::new();
        for c in self.probe_order(&q).into_iter().take(nprobe) {
            hits.extend(self.lists[c].iter().map(|&o| Hit {
                ordinal: o,
                score: dot(&q, self.vectors.row(o as usize)),
            }));
        }
        Ok(top_k(hits, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.vectors.dim as u64);
        w.u64(self.n_clusters as u64);
        w.u64(self.nprobe as u64);
        w.f32s(&self.centroids);
        for list in &self.lists {
            w.u32s(list);
        }
        w.u64(self.vectors.ids.len() as u64);
        for id in &self.vectors.ids {
            w.str(id);
        }
        w.f32s(&self.vectors.data);
        codec::seal(IVF_MAGIC, INDEX_VERSION, w.bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "ivf index";
        let payload = codec::unseal(IVF_MAGIC, INDEX_VERSION, WHAT, bytes)?;
        let mut r = Reader::new(payload, WHAT);
        let dim = r.u64()? as usize;
        let n_clusters = r.u64()? as usize;
        let nprobe = r.u64()? as usize;
        let centroids = r.f32s()?;
        let lists = (0..n_clusters).map(|_| r.u32s()).collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s()?;
        r.finish()?;
        if centroids.len() != n_clusters * dim || data.len() != n * dim {
            return Err(Error::corrupt(WHAT, "shape mismatch"));
        }
        if lists.iter().flatten().any(|&o| o as usize >= n) {
            return Err(Error::corrupt(WHAT, "posting ordinal out of range"));
        }
        Ok(Self {
            n_clusters,
            nprobe,
            centroids,
            lists,
            vectors: EmbeddingMatrix { dim, ids, data },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

fn assign(data: &EmbeddingMatrix, centroids: &[f32], k: usize) -> Vec<(u32, f32)> {
    let dim = data.dim;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let row = data.row(i);
            let mut best = (0u32, f32::NEG_INFINITY);
            for c in 0..k {
                let s = dot(row, &centroids[c * dim..(c + 1) * dim]);
                if s > best.1 {
                    best = (c as u32, s);
                }
            }
            best
        })
        .collect()
}

/// Spherical k-means IVF build. Deterministic for a fixed seed.
pub fn build_ann(embeddings: &EmbeddingMatrix, metric: Metric, n_clusters: usize, seed: u64) -> Result<IvfIndex> {
    if metric != Metric::Cosine {
        return Err(Error::Config(
            "IVF index supports the cosine metric only; use exact search for inner product".into(),
        ));
    }
    let n = embeddings.len();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::invalid(format!(
            "n_clusters must lie in [1, {n}], got {n_clusters}"
        )));
    }
    let data = ExactIndex::build(embeddings, Metric::Cosine).vectors;
    let dim = data.dim;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<usize> = sample(&mut rng, n, n_clusters).into_vec();
    seeds.sort_unstable();
    let mut centroids: Vec<f32> = seeds.iter().flat_map(|&i| data.row(i).to_vec()).collect();

    for _ in 0..KMEANS_MAX_ITERS {
        let assignment = assign(&data, &centroids, n_clusters);
        let mut sums = vec![0.0f64; n_clusters * dim];
        let mut counts = vec![0usize; n_clusters];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += v as f64;
            }
        }
        // Empty clusters take the points worst served by their centroid.
        let mut by_fit: Vec<usize> = (0..n).collect();
        by_fit.sort_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(a.cmp(&b)));
        let mut donors = by_fit.into_iter();
        for c in 0..n_clusters {
            if counts[c] == 0 {
                let donor = donors.next().unwrap_or(0);
                for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(data.row(donor)) {
                    *s = v as f64;
                }
            }
        }
        let mut movement = 0.0f64;
        let mut next = vec![0.0f32; n_clusters * dim];
        for c in 0..n_clusters {
            let s = &sums[c * dim..(c + 1) * dim];
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let old = &centroids[c * dim..(c + 1) * dim];
            let new = &mut next[c * dim..(c + 1) * dim];
            if norm == 0.0 {
                new.copy_from_slice(old);
                continue;
            }
            let mut moved = 0.0;
            for j in 0..dim {
                new[j] = (s[j] / norm) as f32;
                moved += ((new[j] - old[j]) as f64).powi(2);
            }
            movement = movement.max(moved.sqrt());
        }
        centroids = next;
        if movement < KMEANS_TOLERANCE {
            break;
        }
    }

    let assignment = assign(&data, &centroids, n_clusters);
    let mut lists = vec![Vec::new(); n_clusters];
    for (i, &(c, _)) in assignment.iter().enumerate() {
        lists[c as usize].push(i as u32);
    }
    let nprobe = ((n_clusters as f64).sqrt().ceil() as usize).clamp(1, n_clusters);
    Ok(IvfIndex {
        n_clusters,
        nprobe,
        centroids,
        lists,
        vectors: data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnEvalRow {
    pub nprobe: usize,
    pub recall: f64,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
    /// Fraction of clusters scanned.
    pub scan_fraction: f64,
    pub storage_bytes: usize,
}

pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Recall@k of the IVF index against exact search for each nprobe.
pub fn eval_ann(
    ivf: &IvfIndex,
    exact: &ExactIndex,
    queries: &[Vec<f32>],
    k: usize,
    nprobes: &[usize],
) -> Result<Vec<AnnEvalRow>> {
    let truth: Vec<Vec<u32>> = queries
        .par_iter()
        .map(|q| exact.exact_search(q, k).map(|h| h.iter().map(|x| x.ordinal).collect()))
        .collect::<Result<_>>()?;
    let storage_bytes = ivf.vectors.to_store_bytes().len();
    let mut rows = Vec::new();
    for &nprobe in nprobes {
        let mut latencies = Vec::with_capacity(queries.len());
        let mut recall_sum = 0.0;
        for (q, t) in queries.iter().zip(&truth) {
            let start = Instant::now();
            let hits = ivf.ann_search(q, k, nprobe)?;
            latencies.push(start.elapsed().as_secs_f64() * 1e6);
            let found = hits.iter().filter(|h| t.contains(&h.ordinal)).count();
            recall_sum += found as f64 / k.min(t.len()).max(1) as f64;
        }
        latencies.sort_by(f64::total_cmp);
        rows.push(AnnEvalRow {
            nprobe,
            recall: recall_sum / queries.len().max(1) as f64,
            mean_latency_us: latencies.iter().sum::<f64>() / latencies.len().max(1) as f64,
            p99_latency_us: percentile(&latencies, 99.0),
            scan_fraction: nprobe as f64 / ivf.n_clusters as f64,
            storage_bytes,
        });
    }
    Ok(rows)
}

pub fn ann_eval_csv(rows: &[AnnEvalRow]) -> String {
    let mut out = String::from("nprobe,recall,mean_latency_us,p99_latency_us,scan_fraction,storage_bytes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.3},{:.3},{:.6},{}",
            r.nprobe, r.recall, r.mean_latency_us, r.p99_latency_us, r.scan_fraction, r.storage_bytes
        );
    }
    out
}

/// Embeds every catalog product, rows in catalog order.
pub fn embed_catalog(model: &TwoTowerModel, catalog: &Catalog) -> Result<EmbeddingMatrix> {
    let rows = catalog
        .products()
        .par_iter()
        .map(|p| model.encode_product(p))
        .collect::<Result<Vec<_>>>()?;
    let ids = catalog.products().iter().map(|p| p.id.clone()).collect();
    EmbeddingMatrix::from_rows(ids, &rows)
}

/// Clustered unit vectors: `n_centers` random directions, each point a
/// center plus isotropic gaussian noise of scale `spread`, then normalized.
pub fn synthetic_unit_vectors(n: usize, dim: usize, n_centers: usize, spread: f32, seed: u64) -> EmbeddingMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..n_centers.max(1))
        .map(|_| normalized(&(0..dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>()))
        .collect();
    let mut m = EmbeddingMatrix::new(dim);
    for i in 0..n {
        let c = &centers[i % centers.len()];
        let v: Vec<f32> = c
            .iter()
            .map(|&x| {
                let noise: f32 = StandardNormal.sample(&mut rng);
                x + spread * noise / (dim as f32).sqrt()
            })
            .collect();
        m.ids.push(format!("v{i:07}"));
        m.data.extend_from_slice(&normalized(&v));
    }
    m
}
