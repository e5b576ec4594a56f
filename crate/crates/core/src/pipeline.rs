//! Artifact-level stages: each reads its declared inputs from disk and
//! writes its declared outputs, never touching an input file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{
    generate_synthetic_corpus, ingest_catalog, ingest_engagement, ingest_golden, write_catalog, write_engagement,
    write_golden, Catalog, EngagementTable, GoldenSet, SynthConfig,
};
use crate::encoder::{Metric, ModelConfig, TwoTowerModel, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluator::{
    bench_encode_latency, dense_retrieval, evaluate_run, EvalReport, LatencyReport, PaddingMode, ReportMetadata,
    RunMetrics,
};
use crate::federation::{DenseIndex, Federation, FederationConfig, RecallSet, SystemClock};
use crate::labeler::{label_all, read_labels, write_labels, LabelerConfig};
use crate::lexical::{build_lexical, InvertedIndex, LexicalConfig};
use crate::miner::{read_mined, run_mining_loop, write_mined, MinerConfig, RoundMetrics};
use crate::reranker::{rerank, train_ranker, FeatureContext, GbdtConfig, GbdtModel};
use crate::trainer::{train, write_training_log, TrainConfig, TrainingData};
use crate::vector_index::{ann_eval_csv, build_ann, embed_catalog, eval_ann, EmbeddingMatrix, ExactIndex, IvfIndex};

/// Artifact locations. Unset entries live under `root` with fixed names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub catalog: Option<PathBuf>,
    pub engagement: Option<PathBuf>,
    pub golden: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub indexes: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("artifacts"),
            catalog: None,
            engagement: None,
            golden: None,
            model: None,
            indexes: None,
            reports: None,
        }
    }
}

impl Paths {
    pub fn under(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            ..Self::default()
        }
    }

    fn or(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.root.join(name))
    }

    pub fn catalog(&self) -> PathBuf {
        self.or(&self.catalog, "catalog.jsonl")
    }
    pub fn engagement(&self) -> PathBuf {
        self.or(&self.engagement, "engagement.tsv")
    }
    pub fn golden(&self) -> PathBuf {
        self.or(&self.golden, "golden.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }
    pub fn model(&self) -> PathBuf {
        self.or(&self.model, "model.bin")
    }
    pub fn training_log(&self) -> PathBuf {
        self.root.join("training_log.jsonl")
    }
    pub fn mined_model(&self) -> PathBuf {
        self.root.join("model_mined.bin")
    }
    pub fn mined(&self) -> PathBuf {
        self.root.join("mined_negatives.jsonl")
    }
    pub fn mining_log(&self) -> PathBuf {
        self.root.join("mining_log.jsonl")
    }
    pub fn indexes(&self) -> PathBuf {
        self.or(&self.indexes, "indexes")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.indexes().join("embeddings.bin")
    }
    pub fn exact_index(&self) -> PathBuf {
        self.indexes().join("exact.bin")
    }
    pub fn ivf_index(&self) -> PathBuf {
        self.indexes().join("ivf.bin")
    }
    pub fn lexical_index(&self) -> PathBuf {
        self.indexes().join("lexical.bin")
    }
    pub fn index_manifest(&self) -> PathBuf {
        self.indexes().join("manifest.json")
    }
    pub fn ranker(&self) -> PathBuf {
        self.root.join("ranker.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.or(&self.reports, "reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// IVF cluster count; `None` = round(sqrt(catalog size)).
    pub n_clusters: Option<usize>,
    /// Clusters probed at search time; `None` = ceil(sqrt(n_clusters)).
    pub nprobe: Option<usize>,
    pub seed: u64,
    /// Index the mined model when it exists.
    pub prefer_mined_model: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            n_clusters: None,
            nprobe: None,
            seed: 7,
            prefer_mined_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_values: vec![10, 40] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub ann_queries: usize,
    pub k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 1000,
            ann_queries: 200,
            k: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides every module seed when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub labeler: LabelerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub miner: MinerConfig,
    pub lexical: LexicalConfig,
    pub index: IndexConfig,
    pub federation: FederationConfig,
    pub ranker: GbdtConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl PipelineConfig {
    /// Propagates the global seed into every module.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.index.seed = s;
        }
        self
    }
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn load_catalog(p: &Paths) -> Result<Catalog> {
    require(&p.catalog())?;
    Ok(ingest_catalog(&p.catalog())?.0)
}

fn load_engagement(p: &Paths) -> Result<EngagementTable> {
    require(&p.engagement())?;
    Ok(ingest_engagement(&p.engagement())?.0)
}

fn load_golden(p: &Paths, catalog: &Catalog) -> Result<GoldenSet> {
    require(&p.golden())?;
    Ok(ingest_golden(&p.golden(), catalog)?.0)
}

fn load_labels(p: &Paths) -> Result<Vec<crate::labeler::LabeledExample>> {
    require(&p.labels())?;
    read_labels(&p.labels())
}

fn load_model(path: &Path) -> Result<TwoTowerModel> {
    require(path)?;
    TwoTowerModel::load(path)
}

/// The model the index stage embeds with.
pub fn serving_model_path(cfg: &PipelineConfig) -> PathBuf {
    let mined = cfg.paths.mined_model();
    if cfg.index.prefer_mined_model && mined.exists() {
        mined
    } else {
        cfg.paths.model()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    codec::write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    codec::write_file(path, out.as_bytes())
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub products: usize,
    pub queries: usize,
    pub engagement_rows: usize,
    pub golden_queries: usize,
}

pub fn stage_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let c = generate_synthetic_corpus(&cfg.synth)?;
    let p = &cfg.paths;
    write_catalog(&p.catalog(), &c.catalog)?;
    write_engagement(&p.engagement(), &c.engagement)?;
    write_golden(&p.golden(), &c.golden)?;
    Ok(SynthSummary {
        products: c.catalog.len(),
        queries: c.engagement.queries().count(),
        engagement_rows: c.engagement.len(),
        golden_queries: c.golden.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub products: usize,
    pub rejected_products: usize,
    pub engagement_rows: usize,
    pub rejected_engagement_rows: usize,
    pub golden_queries: usize,
    pub golden_dropped_ids: usize,
}

/// Validates external inputs and writes canonical copies into the artifact
/// paths. A source that already is its destination is only validated.
pub fn stage_ingest(cfg: &PipelineConfig, catalog: &Path, engagement: &Path, golden: Option<&Path>) -> Result<IngestSummary> {
    let p = &cfg.paths;
    for f in [catalog, engagement].into_iter().chain(golden) {
        require(f)?;
    }
    let (cat, cs) = ingest_catalog(catalog)?;
    let (eng, es) = ingest_engagement(engagement)?;
    let same = |a: &Path, b: &Path| a.canonicalize().ok().zip(b.canonicalize().ok()).is_some_and(|(x, y)| x == y);
    if !same(catalog, &p.catalog()) {
        write_catalog(&p.catalog(), &cat)?;
    }
    if !same(engagement, &p.engagement()) {
        write_engagement(&p.engagement(), &eng)?;
    }
    let (golden_queries, golden_dropped_ids) = match golden {
        Some(g) => {
            let (gold, gs) = ingest_golden(g, &cat)?;
            if !same(g, &p.golden()) {
                write_golden(&p.golden(), &gold)?;
            }
            (gs.entries, gs.dropped)
        }
        None => (0, 0),
    };
    Ok(IngestSummary {
        products: cs.count,
        rejected_products: cs.rejected,
        engagement_rows: eng.len(),
        rejected_engagement_rows: es.rejected,
        golden_queries,
        golden_dropped_ids,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelSummary {
    pub labels: usize,
    pub queries: usize,
    pub by_tier: BTreeMap<String, usize>,
}

pub fn stage_label(cfg: &PipelineConfig) -> Result<LabelSummary> {
    let eng = load_engagement(&cfg.paths)?;
    let labels = label_all(&eng, &cfg.labeler)?;
    write_labels(&cfg.paths.labels(), &labels)?;
    let mut by_tier = BTreeMap::new();
    for l in &labels {
        *by_tier.entry(format!("{:?}", l.tier).to_lowercase()).or_insert(0) += 1;
    }
    Ok(LabelSummary {
        labels: labels.len(),
        queries: labels.iter().map(|l| l.query.as_str()).collect::<BTreeSet<_>>().len(),
        by_tier,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_recall_at_1: f64,
    pub sigma: f64,
    pub model_sha256: String,
}

fn fresh_model(cfg: &PipelineConfig, catalog: &Catalog, labels: &[crate::labeler::LabeledExample]) -> Result<TwoTowerModel> {
    let queries: BTreeSet<&str> = labels.iter().map(|l| l.query.as_str()).collect();
    let m = &cfg.model;
    let vocab = Vocabulary::build(catalog, queries.into_iter(), &m.attributes, m.query_max_len, m.product_max_len);
    TwoTowerModel::new(m.clone(), vocab)
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let p = &cfg.paths;
    let catalog = load_catalog(p)?;
    let labels = load_labels(p)?;
    let model = fresh_model(cfg, &catalog, &labels)?;
    let data = TrainingData::new(&model, &catalog, &labels)?;
    let out = train(&model, &data, &[], &cfg.train)?;
    write_training_log(&p.training_log(), &out.metrics)?;
    let bytes = out.model.to_bytes()?;
    codec::write_file(&p.model(), &bytes)?;
    let best = &out.metrics[out.best_epoch];
    Ok(TrainSummary {
        epochs: out.metrics.len() - 1,
        best_epoch: out.best_epoch,
        final_recall_at_1: best.in_batch_recall_at_1,
        sigma: best.sigma,
        model_sha256: codec::digest_hex(&bytes),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MineSummary {
    pub rounds: Vec<RoundMetrics>,
    pub negatives: usize,
    pub model_sha256: String,
}

pub fn stage_mine(cfg: &PipelineConfig) -> Result<MineSummary> {
    let p = &cfg.paths;
    let catalog = load_catalog(p)?;
    let labels = load_labels(p)?;
    let golden = load_golden(p, &catalog)?;
    let model = load_model(&p.model())?;
    let data = TrainingData::new(&model, &catalog, &labels)?;
    let out = run_mining_loop(&model, &data, &catalog, &golden, &cfg.train, &cfg.miner, None)?;
    write_mined(&p.mined(), &out.mined, cfg.miner.strategy)?;
    write_jsonl(&p.mining_log(), &out.rounds)?;
    let bytes = out.model.to_bytes()?;
    codec::write_file(&p.mined_model(), &bytes)?;
    Ok(MineSummary {
        negatives: read_mined(&p.mined())?.values().map(Vec::len).sum(),
        rounds: out.rounds,
        model_sha256: codec::digest_hex(&bytes),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    /// Serving model, relative to the artifact root when it lies inside it.
    pub model: PathBuf,
    pub model_sha256: String,
    pub embeddings_sha256: String,
    pub exact_sha256: String,
    pub ivf_sha256: Option<String>,
    pub lexical_sha256: String,
    pub n_clusters: Option<usize>,
    pub nprobe: Option<usize>,
    pub products: usize,
}

pub fn stage_build_index(cfg: &PipelineConfig) -> Result<IndexManifest> {
    let p = &cfg.paths;
    let catalog = load_catalog(p)?;
    let model_path = serving_model_path(cfg);
    let model = load_model(&model_path)?;
    info!("indexing with {}", model_path.display());
    let emb = embed_catalog(&model, &catalog)?;
    let store = emb.to_store_bytes();
    codec::write_file(&p.embeddings(), &store)?;
    let exact = ExactIndex::build(&emb, model.config.metric).to_bytes();
    codec::write_file(&p.exact_index(), &exact)?;
    let lexical = build_lexical(&catalog, cfg.lexical)?.to_bytes();
    codec::write_file(&p.lexical_index(), &lexical)?;
    let (ivf_sha256, n_clusters, nprobe) = if model.config.metric == Metric::Cosine {
        let n = cfg
            .index
            .n_clusters
            .unwrap_or_else(|| ((catalog.len() as f64).sqrt().round() as usize).clamp(1, catalog.len()));
        let mut ivf = build_ann(&emb, Metric::Cosine, n, cfg.index.seed)?;
        if let Some(np) = cfg.index.nprobe {
            if np == 0 || np > n {
                return Err(Error::Config(format!("nprobe must lie in [1, {n}], got {np}")));
            }
            ivf.nprobe = np;
        }
        let bytes = ivf.to_bytes();
        codec::write_file(&p.ivf_index(), &bytes)?;
        (Some(codec::digest_hex(&bytes)), Some(n), Some(ivf.nprobe))
    } else {
        info!("inner-product metric: IVF skipped, dense search is exact");
        if p.ivf_index().exists() {
            std::fs::remove_file(p.ivf_index()).map_err(|e| Error::io(p.ivf_index(), e))?;
        }
        (None, None, None)
    };
    let manifest = IndexManifest {
        model: model_path.strip_prefix(&p.root).map(Path::to_path_buf).unwrap_or_else(|_| model_path.clone()),
        model_sha256: codec::digest_hex(&codec::read_file(&model_path)?),
        embeddings_sha256: codec::digest_hex(&store),
        exact_sha256: codec::digest_hex(&exact),
        ivf_sha256,
        lexical_sha256: codec::digest_hex(&lexical),
        n_clusters,
        nprobe,
        products: catalog.len(),
    };
    write_json(&p.index_manifest(), &manifest)?;
    Ok(manifest)
}

/// Serving-side state assembled from built artifacts.
pub struct Serving {
    pub federation: Federation,
    pub catalog: Catalog,
    pub engagement: EngagementTable,
    pub store: EmbeddingMatrix,
}

impl Serving {
    pub fn load(cfg: &PipelineConfig, nprobe: Option<usize>) -> Result<Self> {
        let p = &cfg.paths;
        let catalog = load_catalog(p)?;
        let engagement = load_engagement(p)?;
        require(&p.index_manifest())?;
        let manifest: IndexManifest =
            serde_json::from_slice(&codec::read_file(&p.index_manifest())?).map_err(|e| Error::corrupt("index manifest", e.to_string()))?;
        let model = load_model(&p.root.join(&manifest.model))?;
        require(&p.lexical_index())?;
        let lexical = InvertedIndex::load(&p.lexical_index())?;
        let dense = if p.ivf_index().exists() {
            let index = IvfIndex::load(&p.ivf_index())?;
            let nprobe = nprobe.or(cfg.index.nprobe).unwrap_or(index.nprobe);
            DenseIndex::Ivf { index, nprobe }
        } else {
            require(&p.exact_index())?;
            DenseIndex::Exact(ExactIndex::from_bytes(&codec::read_file(&p.exact_index())?)?)
        };
        require(&p.embeddings())?;
        let store = EmbeddingMatrix::load_store(&p.embeddings())?;
        let federation = Federation::new(
            model,
            lexical,
            dense,
            engagement.query_impressions(),
            cfg.federation.clone(),
            Box::new(SystemClock),
        )?;
        Ok(Self {
            federation,
            catalog,
            engagement,
            store,
        })
    }

    pub fn features(&self, alpha: f64) -> Result<FeatureContext<'_>> {
        FeatureContext::new(&self.catalog, &self.engagement, &self.store, &self.federation.model, alpha)
    }

    pub fn search(&self, query: &str, k: Option<usize>) -> Result<RecallSet> {
        let c = &self.federation.config;
        self.federation
            .hybrid_retrieve(query, k.unwrap_or(c.k_lexical), k.unwrap_or(c.k_ann))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankerSummary {
    pub examples: usize,
    pub queries: usize,
    pub trees: usize,
}

/// Trains the ranker on hybrid recall sets of every labeled query; labels
/// are labeler scores, unlabeled recall entries count 0.
pub fn train_ranker_from_serving(
    serving: &Serving,
    labels: &[crate::labeler::LabeledExample],
    cfg: &PipelineConfig,
) -> Result<(GbdtModel, RankerSummary)> {
    let ctx = serving.features(cfg.labeler.alpha)?;
    let mut by_query: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for l in labels {
        by_query.entry(&l.query).or_default().insert(&l.product_id, l.score);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (q, scores) in &by_query {
        let set = serving.federation.retrieve(q)?;
        x.extend(ctx.extract_set(&set)?);
        y.extend(set.entries.iter().map(|e| scores.get(e.id.as_str()).copied().unwrap_or(0.0)));
    }
    let model = train_ranker(&x, &y, &cfg.ranker)?;
    let summary = RankerSummary {
        examples: x.len(),
        queries: by_query.len(),
        trees: model.trees.len(),
    };
    Ok((model, summary))
}

pub fn stage_train_ranker(cfg: &PipelineConfig) -> Result<RankerSummary> {
    let serving = Serving::load(cfg, None)?;
    let labels = load_labels(&cfg.paths)?;
    let (model, summary) = train_ranker_from_serving(&serving, &labels, cfg)?;
    model.save(&cfg.paths.ranker())?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Exact dense search with the serving model.
    Dense,
    /// IVF dense search.
    Ann,
    Lexical,
    Hybrid,
    /// Hybrid recall ordered by the trained ranker.
    Rerank,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown eval mode {s:?} (dense|ann|lexical|hybrid|rerank)")))
    }
}

/// Runs one retrieval mode over the golden queries and scores it.
pub fn stage_eval_run(cfg: &PipelineConfig, name: &str, mode: EvalMode, nprobe: Option<usize>) -> Result<RunMetrics> {
    let serving = Serving::load(cfg, nprobe)?;
    let golden = load_golden(&cfg.paths, &serving.catalog)?;
    let k = *cfg.eval.k_values.iter().max().ok_or_else(|| Error::Config("eval.k_values is empty".into()))?;
    let queries: Vec<String> = golden.entries.keys().cloned().collect();
    let fed = &serving.federation;
    let results: BTreeMap<String, Vec<String>> = match mode {
        EvalMode::Dense => {
            let exact = ExactIndex::from_bytes(&codec::read_file(&cfg.paths.exact_index())?)?;
            dense_retrieval(&fed.model, &exact, queries, k)?
        }
        EvalMode::Ann => {
            let mut out = BTreeMap::new();
            for q in queries {
                let ids = fed.model.query_tokens(&q);
                let hits = if ids.is_empty() {
                    Vec::new()
                } else {
                    fed.dense.search(fed.model.encode(&ids)?.as_slice(), k)?.into_iter().map(|h| h.0).collect()
                };
                out.insert(q, hits);
            }
            out
        }
        EvalMode::Lexical => queries
            .into_iter()
            .map(|q| {
                let ids = fed.lexical.lexical_retrieve(&q, k).into_iter().map(|h| h.0).collect();
                (q, ids)
            })
            .collect(),
        EvalMode::Hybrid => {
            let mut out = BTreeMap::new();
            for q in queries {
                let ids = fed.hybrid_retrieve(&q, k, k)?.ids();
                out.insert(q, ids);
            }
            out
        }
        EvalMode::Rerank => {
            require(&cfg.paths.ranker())?;
            let ranker = GbdtModel::load(&cfg.paths.ranker())?;
            let ctx = serving.features(cfg.labeler.alpha)?;
            let mut out = BTreeMap::new();
            for q in queries {
                let set = fed.hybrid_retrieve(&q, k, k)?;
                out.insert(q, rerank(&ranker, &ctx, &set)?.into_iter().map(|r| r.0).collect());
            }
            out
        }
    };
    evaluate_run(name, &results, &golden, &serving.catalog, &cfg.eval.k_values)
}

pub fn read_run(path: &Path) -> Result<RunMetrics> {
    require(path)?;
    serde_json::from_slice(&codec::read_file(path)?).map_err(|e| Error::corrupt(format!("run file {}", path.display()), e.to_string()))
}

/// Comparison report of saved runs; the first is the baseline.
pub fn compare_run_files(cfg: &PipelineConfig, baseline: &Path, candidates: &[PathBuf]) -> Result<EvalReport> {
    let mut runs = vec![read_run(baseline)?];
    for c in candidates {
        runs.push(read_run(c)?);
    }
    let manifest: Option<IndexManifest> = codec::read_file(&cfg.paths.index_manifest())
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let metadata = ReportMetadata {
        model_hash: manifest.as_ref().map(|m| m.model_sha256.clone()),
        index_hash: manifest.as_ref().and_then(|m| m.ivf_sha256.clone().or(Some(m.exact_sha256.clone()))),
        k_values: runs[0].k_values.clone(),
        query_count: runs[0].queries,
    };
    EvalReport::new(runs, metadata)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub latency: Vec<LatencyReport>,
    pub ann_csv: Option<String>,
}

/// Query-encode latency for fixed and dynamic padding, plus the IVF
/// recall/latency/storage sweep when an IVF index exists.
pub fn stage_bench(cfg: &PipelineConfig) -> Result<BenchSummary> {
    let p = &cfg.paths;
    let labels = load_labels(p)?;
    let model = load_model(&serving_model_path(cfg))?;
    let queries: Vec<String> = labels
        .iter()
        .map(|l| l.query.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let latency = vec![
        bench_encode_latency(&model, &queries, PaddingMode::Fixed, cfg.bench.repetitions)?,
        bench_encode_latency(&model, &queries, PaddingMode::Dynamic, cfg.bench.repetitions)?,
    ];
    let ann_csv = if p.ivf_index().exists() {
        let ivf = IvfIndex::load(&p.ivf_index())?;
        let exact = ExactIndex::from_bytes(&codec::read_file(&p.exact_index())?)?;
        let mut qv = Vec::new();
        for q in queries.iter().take(cfg.bench.ann_queries) {
            let ids = model.query_tokens(q);
            if !ids.is_empty() {
                qv.push(model.encode(&ids)?.0);
            }
        }
        let n = ivf.lists().len();
        let mut probes: Vec<usize> = std::iter::successors(Some(1usize), |x| Some(x * 2)).take_while(|&x| x < n).collect();
        probes.push(n);
        let rows = eval_ann(&ivf, &exact, &qv, cfg.bench.k, &probes)?;
        Some(ann_eval_csv(&rows))
    } else {
        None
    };
    Ok(BenchSummary { latency, ann_csv })
}

/// synth → label → train → mine → build-index, all under `cfg.paths`.
pub fn run_offline(cfg: &PipelineConfig) -> Result<IndexManifest> {
    stage_synth(cfg)?;
    stage_label(cfg)?;
    stage_train(cfg)?;
    stage_mine(cfg)?;
    stage_build_index(cfg)
}
