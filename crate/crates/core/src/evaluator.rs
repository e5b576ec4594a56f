//! Golden-set metrics, run comparison tables and the query-encode
//! padding benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, GoldenSet};
use crate::encoder::{pad_to, TwoTowerModel};
use crate::error::{Error, Result};
use crate::vector_index::{percentile, ExactIndex};

/// |top-k ∩ golden| / |golden|.
pub fn recall_at_k(retrieved: &[String], golden: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if golden.is_empty() {
        return Ok(0.0);
    }
    let hit = retrieved.iter().take(k).collect::<BTreeSet<_>>().into_iter().filter(|id| golden.contains(*id)).count();
    Ok((hit as f64 / golden.len() as f64).min(1.0))
}

/// Fraction of the returned top-k whose product type is shared with at
/// least one golden product. `None` when nothing was returned.
pub fn category_recall_at_k(
    retrieved: &[String],
    golden: &BTreeSet<String>,
    catalog: &Catalog,
    k: usize,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let top: Vec<&String> = retrieved.iter().take(k).collect();
    if top.is_empty() {
        return Ok(None);
    }
    let pts: BTreeSet<&str> = golden
        .iter()
        .filter_map(|id| catalog.by_id(id))
        .map(|p| p.product_type.as_str())
        .collect();
    let matched = top
        .iter()
        .filter(|id| catalog.by_id(id).is_some_and(|p| pts.contains(p.product_type.as_str())))
        .count();
    Ok(Some(matched as f64 / top.len() as f64))
}

/// NDCG@k with linear gains and log2 discounts. The ideal ordering is
/// taken over every graded item, retrieved or not; 0 when no item has gain.
pub fn ndcg_at_k(ranked: &[String], gains: &BTreeMap<String, f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gains.get(id).copied().unwrap_or(0.0) * discount(i))
        .sum();
    let mut ideal: Vec<f64> = gains.values().copied().filter(|g| *g > 0.0).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g * discount(i)).sum();
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub k_values: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub category_recall: BTreeMap<usize, f64>,
    /// Binary gains: golden products count 1.
    #[serde(default)]
    pub ndcg: BTreeMap<usize, f64>,
    pub queries: usize,
    /// Retrieved queries without a golden entry.
    pub skipped: usize,
    pub query_digest: String,
}

/// Scores a retrieval run (query → ranked ids) against every golden query.
/// Golden queries absent from `results` count as empty retrievals.
pub fn evaluate_run(
    name: &str,
    results: &BTreeMap<String, Vec<String>>,
    golden: &GoldenSet,
    catalog: &Catalog,
    k_values: &[usize],
) -> Result<RunMetrics> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::invalid("k values must be non-empty and >= 1"));
    }
    let skipped = results.keys().filter(|q| golden.get(q).is_none()).count();
    let empty = Vec::new();
    let mut recall = BTreeMap::new();
    let mut category_recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in k_values {
        let per_query: Vec<(f64, Option<f64>, f64)> = golden
            .entries
            .par_iter()
            .map(|(q, g)| {
                let r = results.get(q).unwrap_or(&empty);
                let gains: BTreeMap<String, f64> = g.iter().map(|id| (id.clone(), 1.0)).collect();
                Ok((
                    recall_at_k(r, g, k)?,
                    category_recall_at_k(r, g, catalog, k)?,
                    ndcg_at_k(r, &gains, k)?,
                ))
            })
            .collect::<Result<_>>()?;
        let n = per_query.len().max(1) as f64;
        recall.insert(k, per_query.iter().map(|p| p.0).sum::<f64>() / n);
        ndcg.insert(k, per_query.iter().map(|p| p.2).sum::<f64>() / n);
        let cats: Vec<f64> = per_query.iter().filter_map(|p| p.1).collect();
        category_recall.insert(k, if cats.is_empty() { 0.0 } else { cats.iter().sum::<f64>() / cats.len() as f64 });
    }
    let keys: Vec<&str> = golden.entries.keys().map(String::as_str).collect();
    Ok(RunMetrics {
        name: name.to_string(),
        k_values: k_values.to_vec(),
        recall,
        category_recall,
        ndcg,
        queries: golden.len(),
        skipped,
        query_digest: crate::codec::digest_hex(keys.join("\n").as_bytes()),
    })
}

/// Dense top-k for every golden query by exact search.
pub fn dense_retrieval(
    model: &TwoTowerModel,
    index: &ExactIndex,
    queries: impl IntoIterator<Item = String>,
    k: usize,
) -> Result<BTreeMap<String, Vec<String>>> {
    let queries: Vec<String> = queries.into_iter().collect();
    queries
        .into_par_iter()
        .map(|q| {
            let ids = model.query_tokens(&q);
            if ids.is_empty() {
                return Ok((q, Vec::new()));
            }
            let e = model.encode(&ids)?;
            let hits = index.exact_search(e.as_slice(), k)?;
            Ok((q, hits.iter().map(|h| index.id(h.ordinal).to_string()).collect()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub candidate: String,
    pub metric: String,
    pub k: usize,
    pub baseline: f64,
    pub value: f64,
    /// (candidate − baseline) / baseline × 100; `None` when baseline is 0.
    pub delta_pct: Option<f64>,
}

impl DeltaRow {
    pub fn delta_text(&self) -> String {
        match self.delta_pct {
            Some(d) => format!("{d:+.2}%"),
            None => "n/a".to_string(),
        }
    }
}

pub fn compare_runs(baseline: &RunMetrics, candidates: &[RunMetrics]) -> Result<Vec<DeltaRow>> {
    let mut rows = Vec::new();
    for c in candidates {
        if c.query_digest != baseline.query_digest || c.queries != baseline.queries {
            return Err(Error::invalid(format!(
                "run {:?} was evaluated on a different query set than {:?}",
                c.name, baseline.name
            )));
        }
        if c.k_values != baseline.k_values {
            return Err(Error::invalid(format!("run {:?} uses different k values", c.name)));
        }
        for (metric, base, cand) in [
            ("recall", &baseline.recall, &c.recall),
            ("category_recall", &baseline.category_recall, &c.category_recall),
            ("ndcg", &baseline.ndcg, &c.ndcg),
        ] {
            for &k in &c.k_values {
                let (Some(&b), Some(&v)) = (base.get(&k), cand.get(&k)) else { continue };
                rows.push(DeltaRow {
                    candidate: c.name.clone(),
                    metric: metric.to_string(),
                    k,
                    baseline: b,
                    value: v,
                    delta_pct: (b != 0.0).then(|| (v - b) / b * 100.0),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_hash: Option<String>,
    pub index_hash: Option<String>,
    pub k_values: Vec<usize>,
    pub query_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub baseline: String,
    pub runs: Vec<RunMetrics>,
    pub deltas: Vec<DeltaRow>,
}

impl EvalReport {
    /// First run is the baseline.
    pub fn new(runs: Vec<RunMetrics>, metadata: ReportMetadata) -> Result<Self> {
        let base = runs.first().ok_or_else(|| Error::invalid("report needs at least one run"))?;
        let deltas = compare_runs(base, &runs[1..])?;
        Ok(Self {
            metadata,
            baseline: base.name.clone(),
            deltas,
            runs,
        })
    }

    fn columns(&self) -> Vec<(String, Box<dyn Fn(&RunMetrics) -> f64 + '_>, &'static str, usize)> {
        let mut cols: Vec<(String, Box<dyn Fn(&RunMetrics) -> f64>, &'static str, usize)> = Vec::new();
        for &k in &self.metadata.k_values {
            cols.push((format!("Recall@{k}"), Box::new(move |r: &RunMetrics| r.recall[&k]), "recall", k));
        }
        for &k in &self.metadata.k_values {
            cols.push((
                format!("Cat Recall@{k}"),
                Box::new(move |r: &RunMetrics| r.category_recall[&k]),
                "category_recall",
                k,
            ));
        }
        if self.runs.iter().all(|r| !r.ndcg.is_empty()) {
            for &k in &self.metadata.k_values {
                cols.push((format!("NDCG@{k}"), Box::new(move |r: &RunMetrics| r.ndcg[&k]), "ndcg", k));
            }
        }
        cols
    }

    /// Aligned columns: absolute values for the baseline, signed relative
    /// deltas for every other run.
    pub fn render_text(&self) -> String {
        let cols = self.columns();
        let name_w = self.runs.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "run");
        for (h, ..) in &cols {
            let _ = write!(out, "  {h:>14}");
        }
        out.push('\n');
        for (i, run) in self.runs.iter().enumerate() {
            let _ = write!(out, "{:<name_w$}", run.name);
            for (_, get, metric, k) in &cols {
                let cell = if i == 0 {
                    format!("{:.4}", get(run))
                } else {
                    self.deltas
                        .iter()
                        .find(|d| d.candidate == run.name && d.metric == *metric && d.k == *k)
                        .map(DeltaRow::delta_text)
                        .unwrap_or_default()
                };
                let _ = write!(out, "  {cell:>14}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "queries: {}", self.metadata.query_count);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,metric,k,value,delta_pct\n");
        for run in &self.runs {
            for (metric, map) in [
                ("recall", &run.recall),
                ("category_recall", &run.category_recall),
                ("ndcg", &run.ndcg),
            ] {
                for (k, v) in map {
                    let delta = self
                        .deltas
                        .iter()
                        .find(|d| d.candidate == run.name && d.metric == metric && d.k == *k)
                        .map(|d| d.delta_pct.map_or("n/a".to_string(), |x| format!("{x:.4}")))
                        .unwrap_or_default();
                    let _ = writeln!(out, "{},{metric},{k},{v:.6},{delta}", run.name);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: PaddingMode,
    pub samples: usize,
    pub p50_us: f64,
    pub p99_us: f64,
}

/// Times `repetitions` single-query encodes, cycling through `queries`.
/// Fixed mode pads every query to the model's maximum query length.
pub fn bench_encode_latency(
    model: &TwoTowerModel,
    queries: &[String],
    mode: PaddingMode,
    repetitions: usize,
) -> Result<LatencyReport> {
    if repetitions < 100 {
        return Err(Error::invalid(format!("repetitions must be >= 100, got {repetitions}")));
    }
    let inputs: Vec<Vec<u32>> = queries
        .iter()
        .map(|q| model.query_tokens(q))
        .filter(|t| !t.is_empty())
        .map(|t| match mode {
            PaddingMode::Fixed => pad_to(&t, model.config.query_max_len),
            PaddingMode::Dynamic => t,
        })
        .collect();
    if inputs.is_empty() {
        return Err(Error::invalid("no encodable queries in the benchmark sample"));
    }
    let mut samples = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let ids = &inputs[i % inputs.len()];
        let start = Instant::now();
        std::hint::black_box(model.encode(std::hint::black_box(ids))?);
        samples.push(start.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        mode,
        samples: samples.len(),
        p50_us: percentile(&samples, 50.0),
        p99_us: percentile(&samples, 99.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, Product, SynthConfig};
    use crate::encoder::{ModelConfig, Vocabulary};
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn catalog(pts: &[(&str, &str)]) -> Catalog {
        Catalog::from_products(pts.iter().map(|&(id, pt)| Product {
            id: id.into(),
            title: id.into(),
            product_type: pt.into(),
            attributes: Default::default(),
            description: None,
        }))
        .0
    }

    #[test]
    fn recall_examples() {
        let g = set(&["a", "b"]);
        assert_eq!(recall_at_k(&ids(&["a", "x", "b"]), &g, 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ids(&["a", "x"]), &g, 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[], &g, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ids(&["x", "b"]), &g, 1).unwrap(), 0.0);
        assert!(recall_at_k(&[], &g, 0).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let gains: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 1.0)].into();
        assert_eq!(ndcg_at_k(&ids(&["a", "b", "x"]), &gains, 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ids(&["x", "y"]), &gains, 10).unwrap(), 0.0);
        let half = ndcg_at_k(&ids(&["x", "a"]), &gains, 2).unwrap();
        let expect = (1.0 / 3f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((half - expect).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&ids(&["a"]), &BTreeMap::new(), 5).unwrap(), 0.0);
    }

    #[test]
    fn category_recall_examples() {
        let c = catalog(&[("a", "shoes"), ("b", "shoes"), ("c", "hats"), ("d", "shoes"), ("e", "bags")]);
        let g = set(&["a"]);
        let r = category_recall_at_k(&ids(&["b", "d", "c", "a"]), &g, &c, 4).unwrap();
        assert_eq!(r, Some(0.75));
        assert_eq!(category_recall_at_k(&ids(&["b", "d"]), &g, &c, 4).unwrap(), Some(1.0));
        let g2 = set(&["a", "e"]);
        assert_eq!(category_recall_at_k(&ids(&["e"]), &g2, &c, 4).unwrap(), Some(1.0));
        assert_eq!(category_recall_at_k(&[], &g, &c, 4).unwrap(), None);
    }

    fn run(name: &str, r: f64, c: f64) -> RunMetrics {
        RunMetrics {
            name: name.into(),
            k_values: vec![40],
            recall: [(40, r)].into(),
            category_recall: [(40, c)].into(),
            ndcg: BTreeMap::new(),
            queries: 10,
            skipped: 0,
            query_digest: "x".into(),
        }
    }

    #[test]
    fn compare_examples() {
        let base = run("base", 0.5, 0.0);
        let d = compare_runs(&base, &[base.clone()]).unwrap();
        assert_eq!(d[0].delta_pct, Some(0.0));
        assert_eq!(d[1].delta_text(), "n/a");
        let d = compare_runs(&base, &[run("cand", 0.55, 0.3)]).unwrap();
        assert_eq!(d[0].delta_text(), "+10.00%");
        let mut other = run("other", 0.5, 0.5);
        other.query_digest = "y".into();
        assert!(compare_runs(&base, &[other]).is_err());
    }

    #[test]
    fn report_renders() {
        let rep = EvalReport::new(
            vec![run("baseline", 0.5, 0.6), run("+pt_match", 0.505, 0.7)],
            ReportMetadata {
                k_values: vec![40],
                query_count: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let text = rep.render_text();
        assert!(text.contains("Cat Recall@40"));
        assert!(text.contains("+1.00%"));
        assert!(text.contains("+16.67%"));
        assert!(rep.to_csv().lines().count() == 5);
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), rep);
    }

    #[test]
    fn bench_modes_and_padding() {
        let c = generate_synthetic_corpus(&SynthConfig::new(2, 100, 20, 5)).unwrap();
        let cfg = ModelConfig::default();
        let vocab = Vocabulary::build(&c.catalog, c.engagement.queries(), &cfg.attributes, 16, 48);
        let model = TwoTowerModel::new(cfg, vocab).unwrap();
        let qs: Vec<String> = c.golden.entries.keys().cloned().collect();
        for mode in [PaddingMode::Fixed, PaddingMode::Dynamic] {
            let r = bench_encode_latency(&model, &qs, mode, 100).unwrap();
            assert_eq!(r.samples, 100);
            assert!(r.p50_us <= r.p99_us);
        }
        assert!(bench_encode_latency(&model, &qs, PaddingMode::Fixed, 99).is_err());
        for q in &qs {
            let t = model.query_tokens(q);
            let a = model.encode(&t).unwrap();
            let b = model.encode(&pad_to(&t, 16)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn category_recall_one_when_restricted_to_golden_pts() {
        let c = generate_synthetic_corpus(&SynthConfig::new(5, 300, 30, 6)).unwrap();
        let mut results = BTreeMap::new();
        for (q, g) in &c.golden.entries {
            let pt = &c.catalog.by_id(g.iter().next().unwrap()).unwrap().product_type;
            let same: Vec<String> = c
                .catalog
                .products()
                .iter()
                .filter(|p| &p.product_type == pt)
                .map(|p| p.id.clone())
                .collect();
            results.insert(q.clone(), same);
        }
        let m = evaluate_run("r", &results, &c.golden, &c.catalog, &[10, 40]).unwrap();
        assert_eq!(m.category_recall[&10], 1.0);
        assert_eq!(m.category_recall[&40], 1.0);
    }

    proptest! {
        #[test]
        fn recall_nondecreasing_in_k(
            retrieved in prop::collection::vec(0u8..30, 0..25),
            golden in prop::collection::btree_set(0u8..30, 1..8),
        ) {
            let r: Vec<String> = retrieved.iter().map(|x| x.to_string()).collect();
            let g: BTreeSet<String> = golden.iter().map(|x| x.to_string()).collect();
            let mut prev = 0.0;
            for k in 1..30 {
                let v = recall_at_k(&r, &g, k).unwrap();
                prop_assert!(v >= prev && v <= 1.0);
                prev = v;
            }
        }
    }
}
