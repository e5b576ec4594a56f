//! Feature extraction for recall-set entries and a pointwise gradient
//! boosted tree ranker (squared loss).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{Catalog, EngagementTable};
use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::federation::{RecallEntry, RecallSet, Source};
use crate::labeler::smoothed_rate;
use crate::text::tokenize;
use crate::vector_index::EmbeddingMatrix;

pub const FEATURE_NAMES: [&str; 10] = [
    "query_length",
    "title_length",
    "bm25_score",
    "cosine_similarity",
    "query_item_order_rate",
    "item_total_orders",
    "item_rating",
    "source_lexical",
    "source_ann",
    "attribute_match",
];

pub type FeatureVector = [f64; 10];

/// Everything feature extraction reads; all of it is immutable.
pub struct FeatureContext<'a> {
    pub catalog: &'a Catalog,
    pub engagement: &'a EngagementTable,
    pub store: &'a EmbeddingMatrix,
    pub model: &'a TwoTowerModel,
    pub alpha: f64,
    rows: HashMap<&'a str, usize>,
    item_orders: HashMap<String, u64>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(
        catalog: &'a Catalog,
        engagement: &'a EngagementTable,
        store: &'a EmbeddingMatrix,
        model: &'a TwoTowerModel,
        alpha: f64,
    ) -> Result<Self> {
        if store.dim != model.d_out() {
            return Err(Error::DimensionMismatch {
                expected: model.d_out(),
                actual: store.dim,
            });
        }
        Ok(Self {
            catalog,
            engagement,
            store,
            model,
            alpha,
            rows: store.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect(),
            item_orders: engagement.product_orders(),
        })
    }

    /// Unit-norm query embedding, `None` for a query without tokens.
    pub fn query_embedding(&self, query: &str) -> Result<Option<Vec<f64>>> {
        let ids = self.model.query_tokens(query);
        if ids.is_empty() {
            return Ok(None);
        }
        Ok(Some(unit(self.model.encode(&ids)?.as_slice())))
    }

    pub fn extract(&self, query: &str, entry: &RecallEntry, query_emb: Option<&[f64]>) -> Result<FeatureVector> {
        let product = self
            .catalog
            .by_id(&entry.id)
            .ok_or_else(|| Error::UnknownProduct(entry.id.clone()))?;
        let row = *self
            .rows
            .get(entry.id.as_str())
            .ok_or_else(|| Error::UnknownProduct(format!("{} (not in embedding store)", entry.id)))?;
        let q_tokens = tokenize(query);
        let cosine = match query_emb {
            Some(q) => {
                let p = unit(self.store.row(row));
                q.iter().zip(&p).map(|(a, b)| a * b).sum()
            }
            None => 0.0,
        };
        let counts = self.engagement.get(query, &entry.id).unwrap_or_default();
        let attr_tokens: BTreeSet<String> = product.attributes.values().flat_map(|v| tokenize(v)).collect();
        let attribute_match = if q_tokens.is_empty() {
            0.0
        } else {
            q_tokens.iter().filter(|t| attr_tokens.contains(*t)).count() as f64 / q_tokens.len() as f64
        };
        Ok([
            q_tokens.len() as f64,
            tokenize(&product.title).len() as f64,
            entry.lexical_score.unwrap_or(0.0),
            cosine,
            smoothed_rate(counts.orders, counts.impressions, self.alpha)?,
            (*self.item_orders.get(&entry.id).unwrap_or(&0) as f64).ln_1p(),
            product.attribute("rating").and_then(|r| r.parse().ok()).unwrap_or(0.0),
            entry.sources.contains(&Source::Lexical) as u8 as f64,
            entry.sources.contains(&Source::Ann) as u8 as f64,
            attribute_match,
        ])
    }

    pub fn extract_set(&self, set: &RecallSet) -> Result<Vec<FeatureVector>> {
        let q = self.query_embedding(&set.query)?;
        set.entries.iter().map(|e| self.extract(&set.query, e, q.as_deref())).collect()
    }
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| x as f64 / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtConfig {
    pub max_depth: usize,
    pub n_trees: usize,
    pub eta: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            n_trees: 50,
            eta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub feature_names: Vec<String>,
    pub base_score: f64,
    pub eta: f64,
    pub max_depth: usize,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score + self.eta * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        for t in &m.trees {
            for n in &t.nodes {
                if let Node::Split { feature, left, right, .. } = n {
                    if *feature >= m.feature_names.len() || *left >= t.nodes.len() || *right >= t.nodes.len() {
                        return Err(Error::corrupt("ranker model", "split references a missing feature or node"));
                    }
                }
            }
        }
        Ok(m)
    }
}

struct TreeBuilder<'a> {
    x: &'a [FeatureVector],
    sorted: &'a [Vec<u32>],
    residual: &'a [f64],
    max_depth: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, members: &[bool], count: usize, depth: usize) -> usize {
        let (sum, _) = self.totals(members);
        let leaf_value = sum / count as f64;
        let split = if depth < self.max_depth && count >= 2 {
            self.best_split(members, count, sum)
        } else {
            None
        };
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: leaf_value });
        if let Some((feature, threshold)) = split {
            let left_mask: Vec<bool> = (0..members.len())
                .map(|i| members[i] && self.x[i][feature] <= threshold)
                .collect();
            let right_mask: Vec<bool> = (0..members.len())
                .map(|i| members[i] && self.x[i][feature] > threshold)
                .collect();
            let nl = left_mask.iter().filter(|&&b| b).count();
            let left = self.build(&left_mask, nl, depth + 1);
            let right = self.build(&right_mask, count - nl, depth + 1);
            self.nodes[id] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        id
    }

    fn totals(&self, members: &[bool]) -> (f64, usize) {
        members
            .iter()
            .zip(self.residual)
            .filter(|(m, _)| **m)
            .fold((0.0, 0), |(s, n), (_, r)| (s + r, n + 1))
    }

    /// Largest squared-error reduction; ties keep the earliest feature and
    /// the smallest threshold.
    fn best_split(&self, members: &[bool], count: usize, sum: f64) -> Option<(usize, f64)> {
        let parent = sum * sum / count as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut left_n = 0usize;
            let rows: Vec<usize> = order.iter().map(|&i| i as usize).filter(|&i| members[i]).collect();
            for w in 0..rows.len() - 1 {
                let i = rows[w];
                left_sum += self.residual[i];
                left_n += 1;
                let v = self.x[i][f];
                if self.x[rows[w + 1]][f] == v {
                    continue;
                }
                let right_sum = sum - left_sum;
                let right_n = count - left_n;
                let gain = left_sum * left_sum / left_n as f64 + right_sum * right_sum / right_n as f64 - parent;
                if gain > 1e-12 && best.map_or(true, |(g, ..)| gain > g) {
                    best = Some((gain, f, v));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Squared-loss boosting: base score = mean label, each tree fits the
/// current residuals, leaves hold residual means.
pub fn train_ranker(x: &[FeatureVector], y: &[f64], config: &GbdtConfig) -> Result<GbdtModel> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid("ranker training needs equally many non-empty features and labels"));
    }
    if !(config.eta > 0.0 && config.eta <= 1.0) {
        return Err(Error::Config(format!("eta must lie in (0, 1], got {}", config.eta)));
    }
    if let Some(bad) = x.iter().flatten().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite ranker input {bad}")));
    }
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let mut model = GbdtModel {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        base_score: base,
        eta: config.eta,
        max_depth: config.max_depth,
        trees: Vec::new(),
    };
    if y.iter().all(|&v| v == y[0]) {
        return Ok(model);
    }
    let sorted: Vec<Vec<u32>> = (0..FEATURE_NAMES.len())
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.len() as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut pred = vec![base; y.len()];
    let all = vec![true; y.len()];
    for _ in 0..config.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(a, p)| a - p).collect();
        let mut b = TreeBuilder {
            x,
            sorted: &sorted,
            residual: &residual,
            max_depth: config.max_depth,
            nodes: Vec::new(),
        };
        b.build(&all, y.len(), 0);
        let tree = Tree { nodes: b.nodes };
        for (p, xi) in pred.iter_mut().zip(x) {
            *p += config.eta * tree.predict(xi);
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Recall-set ids by descending predicted score, ties by ascending id.
pub fn rerank(model: &GbdtModel, ctx: &FeatureContext, set: &RecallSet) -> Result<Vec<(String, f64)>> {
    let features = ctx.extract_set(set)?;
    let mut scored: Vec<(String, f64)> = set
        .entries
        .iter()
        .zip(&features)
        .map(|(e, f)| (e.id.clone(), model.predict(f)))
        .collect();
    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Recall-set ids ordered by BM25 alone (dense-only entries last), ties by id.
pub fn bm25_order(set: &RecallSet) -> Vec<String> {
    let mut v: Vec<(&str, f64)> = set
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e.lexical_score.unwrap_or(f64::NEG_INFINITY)))
        .collect();
    v.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(id, _)| id.to_string()).collect()
}
