//! Iterative hard-negative mining.
//!
//! Each round retrieves the top-k catalog products for every training query
//! with the current model, drops products already labeled for the query,
//! filters the rest by strategy and feeds the survivors back to the trainer
//! as score-0 examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{Catalog, GoldenSet, Product};
use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::evaluator::{dense_retrieval, evaluate_run};
use crate::lexical::{build_lexical, document_tokens, InvertedIndex, LexicalConfig};
use crate::text::tokenize;
use crate::trainer::{train, MinedNegatives, TrainConfig, TrainingData};
use crate::vector_index::{embed_catalog, ExactIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PtMatch,
    PtPlusTokenMatch,
    StudentTeacher,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::PtMatch => "pt_match",
            Strategy::PtPlusTokenMatch => "pt_plus_token_match",
            Strategy::StudentTeacher => "student_teacher",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pt" | "pt_match" => Ok(Strategy::PtMatch),
            "pt+token" | "pt_plus_token_match" => Ok(Strategy::PtPlusTokenMatch),
            "teacher" | "student_teacher" => Ok(Strategy::StudentTeacher),
            other => Err(Error::Config(format!("unknown mining strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerConfig {
    pub k: usize,
    /// Top-m labeled items (by score) whose product types are protected.
    pub m: usize,
    /// Token-overlap threshold; candidates at or above it are discarded.
    pub t: f64,
    pub rounds: usize,
    pub strategy: Strategy,
    /// Cutoff for the per-round golden-set metrics.
    pub eval_k: usize,
    /// Training epochs after each mining pass.
    pub epochs_per_round: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            k: 40,
            m: 5,
            t: 0.5,
            rounds: 2,
            strategy: Strategy::PtMatch,
            eval_k: 40,
            epochs_per_round: 10,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.eval_k == 0 {
            return Err(Error::Config("miner k, m and eval_k must be >= 1".into()));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Config(format!("t must lie in (0, 1], got {}", self.t)));
        }
        Ok(())
    }
}

/// Scores a (query, product) pair with full access to both texts.
pub trait TeacherScorer: Sync {
    fn score(&self, query: &str, product: &Product) -> Result<f64>;
}

/// Reference cross-interaction teacher: BM25 of the query against the
/// product document plus the student model's cosine, equally weighted.
pub struct BlendTeacher<'a> {
    model: &'a TwoTowerModel,
    lexical: InvertedIndex,
}

impl<'a> BlendTeacher<'a> {
    pub fn new(model: &'a TwoTowerModel, catalog: &Catalog) -> Result<Self> {
        let lexical = build_lexical(
            catalog,
            LexicalConfig {
                include_attributes: true,
                ..LexicalConfig::default()
            },
        )?;
        Ok(Self { model, lexical })
    }
}

impl TeacherScorer for BlendTeacher<'_> {
    fn score(&self, query: &str, product: &Product) -> Result<f64> {
        let bm25 = self.lexical.score_tokens(&tokenize(query), &document_tokens(product, true));
        let q = self.model.query_tokens(query);
        let cosine = if q.is_empty() {
            0.0
        } else {
            crate::encoder::score_pair(self.model, &self.model.encode(&q)?, &self.model.encode_product(product)?)?
        };
        Ok(0.5 * bm25 + 0.5 * cosine)
    }
}

/// Removes candidates whose product type is in `allowed_pts`. Candidates
/// with an empty product type never match.
pub fn pt_match_filter<'a>(candidates: &[&'a Product], allowed_pts: &BTreeSet<String>) -> Vec<&'a Product> {
    candidates
        .iter()
        .copied()
        .filter(|p| p.product_type.is_empty() || !allowed_pts.contains(&p.product_type))
        .collect()
}

/// |query tokens ∩ candidate tokens| / |query tokens|, candidate tokens
/// taken from the title and attribute values.
pub fn token_overlap(query_tokens: &BTreeSet<String>, product: &Product) -> Result<f64> {
    if query_tokens.is_empty() {
        return Err(Error::invalid("token overlap needs a non-empty query token set"));
    }
    let doc: BTreeSet<String> = document_tokens(product, true).into_iter().collect();
    Ok(query_tokens.intersection(&doc).count() as f64 / query_tokens.len() as f64)
}

/// Keeps candidates whose overlap is strictly below `t`.
pub fn token_match_filter<'a>(
    candidates: &[&'a Product],
    query_tokens: &BTreeSet<String>,
    t: f64,
) -> Result<Vec<&'a Product>> {
    let mut out = Vec::new();
    for &p in candidates {
        if token_overlap(query_tokens, p)? < t {
            out.push(p);
        }
    }
    Ok(out)
}

/// Mining filter for `strategy`: the product-type filter, followed by the
/// token filter for `PtPlusTokenMatch`.
pub fn filter_candidates<'a>(
    strategy: Strategy,
    candidates: &[&'a Product],
    allowed_pts: &BTreeSet<String>,
    query_tokens: &BTreeSet<String>,
    t: f64,
) -> Result<Vec<&'a Product>> {
    let survivors = pt_match_filter(candidates, allowed_pts);
    if strategy == Strategy::PtPlusTokenMatch && !query_tokens.is_empty() {
        token_match_filter(&survivors, query_tokens, t)
    } else {
        Ok(survivors)
    }
}

/// Product types of the query's top-m labeled items; ties by ordinal.
fn allowed_pts(catalog: &Catalog, positives: &[(u32, f64)], m: usize) -> BTreeSet<String> {
    let mut ranked = positives.to_vec();
    ranked.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
    ranked
        .iter()
        .take(m)
        .map(|&(o, _)| catalog.get(o as usize).product_type.clone())
        .filter(|pt| !pt.is_empty())
        .collect()
}

/// One mining pass over every training query. The student strategies
/// retrieve by exact search over the full catalog; the teacher strategy
/// ranks the catalog by teacher score and applies the product-type filter.
pub fn mine_round(
    model: &TwoTowerModel,
    teacher: Option<&dyn TeacherScorer>,
    data: &TrainingData,
    catalog: &Catalog,
    config: &MinerConfig,
) -> Result<MinedNegatives> {
    config.validate()?;
    let index = match config.strategy {
        Strategy::StudentTeacher => None,
        _ => Some(ExactIndex::build(&embed_catalog(model, catalog)?, model.config.metric)),
    };
    if config.strategy == Strategy::StudentTeacher && teacher.is_none() {
        return Err(Error::invalid("student_teacher mining needs a teacher scorer"));
    }
    let per_query: Vec<(String, Vec<String>)> = data
        .queries
        .par_iter()
        .map(|q| -> Result<(String, Vec<String>)> {
            let top: Vec<u32> = match (&index, teacher) {
                (Some(index), _) => {
                    let e = model.encode(&q.tokens)?;
                    index.exact_search(e.as_slice(), config.k)?.iter().map(|h| h.ordinal).collect()
                }
                (None, Some(t)) => {
                    let mut scored = Vec::with_capacity(catalog.len());
                    for (o, p) in catalog.products().iter().enumerate() {
                        scored.push((o as u32, t.score(&q.text, p)?));
                    }
                    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
                    scored.into_iter().take(config.k).map(|(o, _)| o).collect()
                }
                (None, None) => unreachable!(),
            };
            let candidates: Vec<&Product> = top
                .into_iter()
                .filter(|&o| !q.is_labeled(o))
                .map(|o| catalog.get(o as usize))
                .collect();
            let qt: BTreeSet<String> = tokenize(&q.text).into_iter().collect();
            let allowed = allowed_pts(catalog, &q.positives, config.m);
            let survivors = filter_candidates(config.strategy, &candidates, &allowed, &qt, config.t)?;
            Ok((q.text.clone(), survivors.iter().map(|p| p.id.clone()).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().filter(|(_, n)| !n.is_empty()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub strategy: Strategy,
    pub negatives: usize,
    pub recall: f64,
    pub category_recall: f64,
    pub k: usize,
}

pub struct MiningOutcome {
    pub model: TwoTowerModel,
    pub rounds: Vec<RoundMetrics>,
    /// Per-round mined negatives, in round order.
    pub mined: Vec<MinedNegatives>,
}

/// Union of negatives across rounds, first occurrence order.
pub fn merge_negatives(into: &mut MinedNegatives, more: &MinedNegatives) {
    for (q, ids) in more {
        let entry = into.entry(q.clone()).or_default();
        let seen: BTreeSet<String> = entry.iter().cloned().collect();
        entry.extend(ids.iter().filter(|id| !seen.contains(*id)).cloned());
    }
}

/// Golden-set Recall@k and Category-Recall@k of dense exact retrieval.
pub fn golden_metrics(model: &TwoTowerModel, catalog: &Catalog, golden: &GoldenSet, k: usize) -> Result<(f64, f64)> {
    let index = ExactIndex::build(&embed_catalog(model, catalog)?, model.config.metric);
    let results = dense_retrieval(model, &index, golden.entries.keys().cloned(), k)?;
    let m = evaluate_run("dense", &results, golden, catalog, &[k])?;
    Ok((m.recall[&k], m.category_recall[&k]))
}

/// Alternates mining and training, resuming from the latest checkpoint.
/// Negatives accumulate across rounds. Stops early when a round mines
/// nothing. With the teacher strategy and no explicit teacher, the
/// reference blend teacher is rebuilt from the current model each round.
#[allow(clippy::too_many_arguments)]
pub fn run_mining_loop(
    model: &TwoTowerModel,
    data: &TrainingData,
    catalog: &Catalog,
    golden: &GoldenSet,
    train_config: &TrainConfig,
    config: &MinerConfig,
    teacher: Option<&dyn TeacherScorer>,
) -> Result<MiningOutcome> {
    config.validate()?;
    let mut current = model.clone();
    let mut all = MinedNegatives::new();
    let mut rounds = Vec::new();
    let mut mined_rounds = Vec::new();
    for round in 1..=config.rounds {
        let mined = match (config.strategy, teacher) {
            (Strategy::StudentTeacher, None) => {
                let t = BlendTeacher::new(&current, catalog)?;
                mine_round(&current, Some(&t), data, catalog, config)?
            }
            _ => mine_round(&current, teacher, data, catalog, config)?,
        };
        let count: usize = mined.values().map(Vec::len).sum();
        if count == 0 {
            warn!("mining round {round} produced no negatives; stopping");
            break;
        }
        merge_negatives(&mut all, &mined);
        mined_rounds.push(mined);
        let resolved = data.resolve_negatives(catalog, &all);
        let round_cfg = TrainConfig {
            seed: train_config.seed.wrapping_add(round as u64),
            max_epochs: config.epochs_per_round,
            ..train_config.clone()
        };
        current = train(&current, data, &resolved, &round_cfg)?.model;
        let (recall, category_recall) = golden_metrics(&current, catalog, golden, config.eval_k)?;
        info!(
            "round {round}: {count} negatives, Recall@{k} {recall:.4}, Cat Recall@{k} {category_recall:.4}",
            k = config.eval_k
        );
        rounds.push(RoundMetrics {
            round,
            strategy: config.strategy,
            negatives: count,
            recall,
            category_recall,
            k: config.eval_k,
        });
    }
    Ok(MiningOutcome {
        model: current,
        rounds,
        mined: mined_rounds,
    })
}

#[derive(Serialize, Deserialize)]
struct NegativeLine {
    query: String,
    negatives: Vec<String>,
    round: usize,
    strategy: Strategy,
}

pub fn write_mined(path: &Path, rounds: &[MinedNegatives], strategy: Strategy) -> Result<()> {
    let mut out = String::new();
    for (i, mined) in rounds.iter().enumerate() {
        for (query, negatives) in mined {
            let line = NegativeLine {
                query: query.clone(),
                negatives: negatives.clone(),
                round: i + 1,
                strategy,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line)?);
        }
    }
    codec::write_file(path, out.as_bytes())
}

/// All negatives in the file merged into one map.
pub fn read_mined(path: &Path) -> Result<MinedNegatives> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = MinedNegatives::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: NegativeLine = serde_json::from_str(line)?;
        merge_negatives(&mut out, &BTreeMap::from([(l.query, l.negatives)]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};
    use crate::encoder::{ModelConfig, Vocabulary};
    use crate::labeler::{label_all, LabelerConfig};

    fn product(id: &str, title: &str, pt: &str) -> Product {
        Product {
            id: id.into(),
            title: title.into(),
            product_type: pt.into(),
            attributes: Default::default(),
            description: None,
        }
    }

    fn pts(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pt_filter_examples() {
        let a = product("a", "runner", "shoes");
        let b = product("b", "cap", "hats");
        let c = product("c", "thing", "");
        let cands = [&a, &b, &c];
        let out: Vec<&str> = pt_match_filter(&cands, &pts(&["shoes"])).iter().map(|p| p.id.as_str()).collect();
        assert_eq!(out, vec!["b", "c"]);
        assert_eq!(pt_match_filter(&cands, &BTreeSet::new()).len(), 3);
        assert!(pt_match_filter(&[&a], &pts(&["shoes"])).is_empty());
    }

    #[test]
    fn token_filter_examples() {
        let q = pts(&["red", "shoes"]);
        let hat = product("h", "red hat", "hats");
        assert_eq!(token_overlap(&q, &hat).unwrap(), 0.5);
        assert!(token_match_filter(&[&hat], &q, 0.5).unwrap().is_empty());
        assert_eq!(token_match_filter(&[&hat], &q, 0.51).unwrap().len(), 1);
        let none = product("n", "blue cap", "hats");
        assert_eq!(token_match_filter(&[&none], &q, 0.5).unwrap().len(), 1);
        let all = product("s", "red running shoes", "shoes");
        assert_eq!(token_overlap(&q, &all).unwrap(), 1.0);
        assert!(token_overlap(&BTreeSet::new(), &all).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("pt".parse::<Strategy>().unwrap(), Strategy::PtMatch);
        assert_eq!("pt+token".parse::<Strategy>().unwrap(), Strategy::PtPlusTokenMatch);
        assert_eq!("teacher".parse::<Strategy>().unwrap(), Strategy::StudentTeacher);
        assert!("bogus".parse::<Strategy>().is_err());
        assert!(MinerConfig { t: 0.0, ..MinerConfig::default() }.validate().is_err());
        assert!(MinerConfig { t: 1.0, ..MinerConfig::default() }.validate().is_ok());
    }

    fn setup() -> (TwoTowerModel, TrainingData, crate::corpus::SyntheticCorpus) {
        let c = generate_synthetic_corpus(&SynthConfig::new(11, 400, 40, 8)).unwrap();
        let labels = label_all(&c.engagement, &LabelerConfig::default()).unwrap();
        let cfg = ModelConfig {
            d_token: 16,
            d_out: 8,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::build(&c.catalog, c.engagement.queries(), &cfg.attributes, 16, 48);
        let model = TwoTowerModel::new(cfg, vocab).unwrap();
        let data = TrainingData::new(&model, &c.catalog, &labels).unwrap();
        (model, data, c)
    }

    #[test]
    fn mined_negatives_are_never_labeled_and_deterministic() {
        let (model, data, c) = setup();
        for strategy in [Strategy::PtMatch, Strategy::PtPlusTokenMatch, Strategy::StudentTeacher] {
            let cfg = MinerConfig {
                k: 20,
                strategy,
                ..MinerConfig::default()
            };
            let teacher = BlendTeacher::new(&model, &c.catalog).unwrap();
            let a = mine_round(&model, Some(&teacher), &data, &c.catalog, &cfg).unwrap();
            let b = mine_round(&model, Some(&teacher), &data, &c.catalog, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(!a.is_empty(), "{strategy:?} mined nothing");
            for (q, negs) in &a {
                let tq = &data.queries[data.query_index(q).unwrap()];
                let allowed = allowed_pts(&c.catalog, &tq.positives, cfg.m);
                assert!(negs.len() <= cfg.k);
                for id in negs {
                    let o = c.catalog.ordinal(id).unwrap() as u32;
                    assert!(!tq.is_labeled(o));
                    assert!(!allowed.contains(&c.catalog.get(o as usize).product_type));
                }
            }
        }
    }

    #[test]
    fn token_strategy_is_subset_of_pt() {
        let (model, data, c) = setup();
        let pt = mine_round(&model, None, &data, &c.catalog, &MinerConfig::default()).unwrap();
        let tok = mine_round(
            &model,
            None,
            &data,
            &c.catalog,
            &MinerConfig {
                strategy: Strategy::PtPlusTokenMatch,
                ..MinerConfig::default()
            },
        )
        .unwrap();
        for (q, negs) in &tok {
            let base: BTreeSet<&String> = pt[q].iter().collect();
            assert!(negs.iter().all(|n| base.contains(n)));
        }
    }

    #[test]
    fn loop_rounds_and_file_roundtrip() {
        let (model, data, c) = setup();
        let tc = TrainConfig {
            max_epochs: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let zero = run_mining_loop(&model, &data, &c.catalog, &c.golden, &tc, &MinerConfig { rounds: 0, ..MinerConfig::default() }, None)
            .unwrap();
        assert_eq!(zero.model.to_bytes().unwrap(), model.to_bytes().unwrap());
        assert!(zero.rounds.is_empty());

        let out = run_mining_loop(&model, &data, &c.catalog, &c.golden, &tc, &MinerConfig::default(), None).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert_eq!(out.mined.len(), 2);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_mined(f.path(), &out.mined, Strategy::PtMatch).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""strategy":"pt_match""#));
        let mut merged = MinedNegatives::new();
        for m in &out.mined {
            merge_negatives(&mut merged, m);
        }
        assert_eq!(read_mined(f.path()).unwrap(), merged);
    }
}
