//! Two-tower training with a score-weighted sampled softmax.
//!
//! For query `i` with candidate products `j = 1..N`, cosine (or dot) scores
//! `c_ij`, graded labels `S_ij` and temperature `σ = exp(θ)`:
//!
//! ```text
//! loss_i = -Σ_j S_ij · log( exp(c_ij/σ) / Σ_k exp(c_ik/σ) )
//! ```
//!
//! Negatives carry `S = 0` and only enter through the normalizer. The batch
//! loss is the mean over queries. Gradients are derived by hand:
//!
//! ```text
//! p_ij     = softmax_j(c_ij / σ)
//! ∂L/∂c_ij = -(S_ij - S_i· p_ij) / σ
//! ∂L/∂θ    = Σ_j (S_ij - S_i· p_ij) · c_ij / σ
//! ```
//!
//! and checked against central finite differences by [`gradient_check`].
//!
//! Memory scales with `batch_size × n_slots`; raising `n_slots` at a fixed
//! memory budget means lowering `batch_size`, which also shrinks the in-batch
//! negative pool. The two are configured independently.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::Catalog;
use crate::encoder::{Forward, Gradients, Metric, TwoTowerModel};
use crate::error::{Error, Result};
use crate::labeler::LabeledExample;

/// Query → mined negative product ids.
pub type MinedNegatives = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InBatchMode {
    Random,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Product slots per query (N).
    pub n_slots: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Positives sampled per query per epoch (P).
    pub positives_per_epoch: usize,
    pub in_batch_mode: InBatchMode,
    /// In-batch negatives per query; `None` fills every remaining slot.
    pub in_batch_count: Option<usize>,
    /// Mined negatives placed per query per epoch.
    pub mined_per_query: usize,
    pub freeze_token_embeddings: bool,
    pub seed: u64,
    /// Epochs without in-batch recall improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 40,
            n_slots: 20,
            learning_rate: 1e-3,
            max_epochs: 30,
            positives_per_epoch: 5,
            in_batch_mode: InBatchMode::Random,
            in_batch_count: None,
            mined_per_query: 5,
            freeze_token_embeddings: false,
            seed: 7,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_slots == 0 {
            return Err(Error::Config("batch_size and n_slots must be >= 1".into()));
        }
        if self.positives_per_epoch == 0 {
            return Err(Error::Config("positives_per_epoch must be >= 1".into()));
        }
        let fixed = self.positives_per_epoch + self.mined_per_query + self.in_batch_count.unwrap_or(0);
        if fixed > self.n_slots {
            return Err(Error::Config(format!(
                "positives ({}) + mined ({}) + in-batch ({}) exceed n_slots ({})",
                self.positives_per_epoch,
                self.mined_per_query,
                self.in_batch_count.unwrap_or(0),
                self.n_slots
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Positive,
    MinedNegative,
    InBatchNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slot {
    pub product: u32,
    pub score: f64,
    pub source: SlotSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchQuery {
    /// Index into [`TrainingData::queries`].
    pub query: usize,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingBatch {
    pub queries: Vec<BatchQuery>,
}

#[derive(Debug, Clone)]
pub struct TrainingQuery {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Labeled products with S > 0, ascending ordinal.
    pub positives: Vec<(u32, f64)>,
    labeled: HashSet<u32>,
}

impl TrainingQuery {
    pub fn is_labeled(&self, ordinal: u32) -> bool {
        self.labeled.contains(&ordinal)
    }
}

/// Tokenized labels ready for batching.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub queries: Vec<TrainingQuery>,
    pub product_tokens: Vec<Vec<u32>>,
}

impl TrainingData {
    pub fn new(model: &TwoTowerModel, catalog: &Catalog, labels: &[LabeledExample]) -> Result<Self> {
        let product_tokens = catalog
            .products()
            .iter()
            .map(|p| model.product_tokens(p))
            .collect::<Result<Vec<_>>>()?;
        let mut grouped: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
        let mut unknown = 0usize;
        for l in labels {
            match catalog.ordinal(&l.product_id) {
                Some(o) if l.score > 0.0 => {
                    grouped.entry(&l.query).or_default().insert(o as u32, l.score);
                }
                Some(_) => {}
                None => unknown += 1,
            }
        }
        if unknown > 0 {
            warn!("{unknown} labeled examples reference unknown products; ignored");
        }
        let mut queries = Vec::new();
        for (q, pos) in grouped {
            let tokens = model.query_tokens(q);
            if tokens.is_empty() || product_tokens.iter().all(Vec::is_empty) {
                warn!("query {q:?} has no tokens; skipped");
                continue;
            }
            let positives: Vec<(u32, f64)> = pos
                .into_iter()
                .filter(|&(o, _)| !product_tokens[o as usize].is_empty())
                .collect();
            if positives.is_empty() {
                warn!("query {q:?} has no usable positives; skipped");
                continue;
            }
            queries.push(TrainingQuery {
                text: q.to_string(),
                tokens,
                labeled: positives.iter().map(|&(o, _)| o).collect(),
                positives,
            });
        }
        if queries.is_empty() {
            return Err(Error::invalid("no trainable queries in the labeled data"));
        }
        Ok(Self {
            queries,
            product_tokens,
        })
    }

    pub fn query_index(&self, text: &str) -> Option<usize> {
        self.queries.binary_search_by(|q| q.text.as_str().cmp(text)).ok()
    }

    /// Mined negatives as ordinals; labeled items and unknown ids dropped.
    pub fn resolve_negatives(&self, catalog: &Catalog, mined: &MinedNegatives) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.queries.len()];
        for (q, ids) in mined {
            let Some(qi) = self.query_index(q) else { continue };
            let tq = &self.queries[qi];
            let mut seen = BTreeSet::new();
            for id in ids {
                if let Some(o) = catalog.ordinal(id) {
                    let o = o as u32;
                    if !tq.is_labeled(o) && !self.product_tokens[o as usize].is_empty() && seen.insert(o) {
                        out[qi].push(o);
                    }
                }
            }
        }
        out
    }
}

/// Picks `count` pool members. Random mode samples uniformly without
/// replacement; hard mode keeps the highest-scoring members (ties by
/// ascending ordinal). A pool smaller than `count` is returned whole.
pub fn select_in_batch_negatives(
    pool: &[(u32, f64)],
    mode: InBatchMode,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    match mode {
        InBatchMode::Random => pool.choose_multiple(rng, count).map(|&(o, _)| o).collect(),
        InBatchMode::Hard => {
            let mut sorted = pool.to_vec();
            sorted.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
            sorted.into_iter().take(count).map(|(o, _)| o).collect()
        }
    }
}

fn sample_positives(q: &TrainingQuery, p: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, f64)> {
    if q.positives.len() <= p {
        return q.positives.clone();
    }
    let mut picked: Vec<(u32, f64)> = q
        .positives
        .choose_multiple_weighted(rng, p, |&(_, s)| s)
        .expect("scores are positive and finite")
        .copied()
        .collect();
    picked.sort_by_key(|&(o, _)| o);
    picked
}

/// Forward passes for a set of products, keyed by ordinal.
fn encode_products(model: &TwoTowerModel, data: &TrainingData, ordinals: &BTreeSet<u32>) -> Result<BTreeMap<u32, Forward>> {
    ordinals
        .iter()
        .map(|&o| Ok((o, model.forward(&data.product_tokens[o as usize])?)))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Assembles one batch for `query_ids`: up to P positives sampled by score,
/// up to `mined_per_query` mined negatives, then in-batch negatives drawn
/// from the other queries' products. In hard mode the model ranks the pool.
pub fn build_batch(
    model: &TwoTowerModel,
    data: &TrainingData,
    mined: &[Vec<u32>],
    query_ids: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let mut queries = Vec::with_capacity(query_ids.len());
    for &qi in query_ids {
        let q = &data.queries[qi];
        if q.positives.is_empty() {
            warn!("query {:?} has no positives; skipped", q.text);
            continue;
        }
        let mut slots: Vec<Slot> = sample_positives(q, config.positives_per_epoch, rng)
            .into_iter()
            .map(|(product, score)| Slot {
                product,
                score,
                source: SlotSource::Positive,
            })
            .collect();
        let negs = mined.get(qi).map(Vec::as_slice).unwrap_or(&[]);
        slots.extend(negs.choose_multiple(rng, config.mined_per_query).map(|&product| Slot {
            product,
            score: 0.0,
            source: SlotSource::MinedNegative,
        }));
        queries.push(BatchQuery { query: qi, slots });
    }

    let hard = config.in_batch_mode == InBatchMode::Hard;
    let forwards = if hard {
        let all: BTreeSet<u32> = queries.iter().flat_map(|bq| bq.slots.iter().map(|s| s.product)).collect();
        encode_products(model, data, &all)?
    } else {
        BTreeMap::new()
    };

    let owned: Vec<BTreeSet<u32>> = queries
        .iter()
        .map(|bq| bq.slots.iter().map(|s| s.product).collect())
        .collect();
    let mut fills = Vec::with_capacity(queries.len());
    for (i, bq) in queries.iter().enumerate() {
        let q = &data.queries[bq.query];
        let room = config.n_slots.saturating_sub(bq.slots.len());
        let count = config.in_batch_count.map_or(room, |c| c.min(room));
        let candidates: BTreeSet<u32> = owned
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, s)| s.iter().copied())
            .filter(|o| !owned[i].contains(o) && !q.is_labeled(*o))
            .collect();
        let pool: Vec<(u32, f64)> = if hard {
            let qf = model.forward(&q.tokens)?;
            candidates
                .into_iter()
                .map(|o| (o, dot(&qf.output, &forwards[&o].output)))
                .collect()
        } else {
            candidates.into_iter().map(|o| (o, 0.0)).collect()
        };
        fills.push(select_in_batch_negatives(&pool, config.in_batch_mode, count, rng));
    }
    for (bq, fill) in queries.iter_mut().zip(fills) {
        bq.slots.extend(fill.into_iter().map(|product| Slot {
            product,
            score: 0.0,
            source: SlotSource::InBatchNegative,
        }));
    }
    Ok(TrainingBatch { queries })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_loss_inputs(cosines: &[f64], scores: &[f64], sigma: f64) -> Result<()> {
    if cosines.len() != scores.len() || cosines.is_empty() {
        return Err(Error::invalid("cosines and scores must be non-empty and equally long"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(c) = cosines.iter().find(|c| !c.is_finite()) {
        return Err(Error::Numerical(format!("non-finite similarity {c}")));
    }
    if !scores.iter().any(|&s| s > 0.0) {
        return Err(Error::invalid("at least one score must be positive"));
    }
    Ok(())
}

/// Loss contribution of one query.
pub fn softmax_loss(cosines: &[f64], scores: &[f64], sigma: f64) -> Result<f64> {
    check_loss_inputs(cosines, scores, sigma)?;
    let logits: Vec<f64> = cosines.iter().map(|c| c / sigma).collect();
    let lse = log_sum_exp(&logits);
    Ok(-scores
        .iter()
        .zip(&logits)
        .filter(|(s, _)| **s != 0.0)
        .map(|(s, l)| s * (l - lse))
        .sum::<f64>())
}

/// Loss, ∂loss/∂c_j and ∂loss/∂θ for one query.
pub fn softmax_loss_grad(cosines: &[f64], scores: &[f64], sigma: f64) -> Result<(f64, Vec<f64>, f64)> {
    let loss = softmax_loss(cosines, scores, sigma)?;
    let logits: Vec<f64> = cosines.iter().map(|c| c / sigma).collect();
    let lse = log_sum_exp(&logits);
    let total: f64 = scores.iter().sum();
    let mut d_cos = Vec::with_capacity(cosines.len());
    let mut d_theta = 0.0;
    for (&s, &u) in scores.iter().zip(&logits) {
        let r = s - total * (u - lse).exp();
        d_cos.push(-r / sigma);
        d_theta += r * u;
    }
    Ok((loss, d_cos, d_theta))
}

/// Mean batch loss and its gradient with respect to every parameter group.
/// Token-embedding gradients are left at zero when `freeze_tokens` is set;
/// the temperature gradient is zero under the inner-product metric.
pub fn batch_gradients(
    model: &TwoTowerModel,
    data: &TrainingData,
    batch: &TrainingBatch,
    freeze_tokens: bool,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(model);
    if batch.queries.is_empty() {
        return Ok((0.0, grads));
    }
    let products: BTreeSet<u32> = batch.queries.iter().flat_map(|q| q.slots.iter().map(|s| s.product)).collect();
    let forwards = encode_products(model, data, &products)?;
    let d_out = model.d_out();
    let mut d_products: BTreeMap<u32, Vec<f64>> = products.iter().map(|&o| (o, vec![0.0; d_out])).collect();
    let (sigma, trains_sigma) = match model.config.metric {
        Metric::Cosine => (model.sigma(), true),
        Metric::InnerProduct => (1.0, false),
    };
    let scale = 1.0 / batch.queries.len() as f64;
    let mut loss = 0.0;
    for bq in &batch.queries {
        let qf = model.forward(&data.queries[bq.query].tokens)?;
        let cos: Vec<f64> = bq.slots.iter().map(|s| dot(&qf.output, &forwards[&s.product].output)).collect();
        let scores: Vec<f64> = bq.slots.iter().map(|s| s.score).collect();
        let (l, d_cos, d_theta) = softmax_loss_grad(&cos, &scores, sigma)?;
        loss += l * scale;
        if trains_sigma {
            grads.theta_sigma += d_theta * scale;
        }
        let mut d_query = vec![0.0; d_out];
        for (slot, g) in bq.slots.iter().zip(&d_cos) {
            let g = g * scale;
            let pf = &forwards[&slot.product];
            let dp = d_products.get_mut(&slot.product).unwrap();
            for k in 0..d_out {
                d_query[k] += g * pf.output[k];
                dp[k] += g * qf.output[k];
            }
        }
        model.backward(&qf, &d_query, &mut grads, !freeze_tokens);
    }
    for (o, dp) in &d_products {
        model.backward(&forwards[o], dp, &mut grads, !freeze_tokens);
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("batch loss is {loss}")));
    }
    Ok((loss, grads))
}

pub fn batch_loss(model: &TwoTowerModel, data: &TrainingData, batch: &TrainingBatch) -> Result<f64> {
    Ok(batch_gradients(model, data, batch, true)?.0)
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step `h`) over every trainable parameter. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`, so components below 1e-6 are compared
/// on an absolute scale.
pub fn gradient_check(model: &TwoTowerModel, data: &TrainingData, batch: &TrainingBatch, h: f64) -> Result<f64> {
    let (_, analytic) = batch_gradients(model, data, batch, false)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    let central = |probe: &mut TwoTowerModel, get: &dyn Fn(&mut TwoTowerModel) -> &mut f64| -> Result<f64> {
        let orig = *get(probe);
        *get(probe) = orig + h;
        let up = batch_loss(probe, data, batch)?;
        *get(probe) = orig - h;
        let down = batch_loss(probe, data, batch)?;
        *get(probe) = orig;
        Ok((up - down) / (2.0 * h))
    };
    for i in 0..model.token_embeddings.len() {
        let n = central(&mut probe, &|m| &mut m.token_embeddings[i])?;
        compare(analytic.token_embeddings[i], n);
    }
    for i in 0..model.projection.len() {
        let n = central(&mut probe, &|m| &mut m.projection[i])?;
        compare(analytic.projection[i], n);
    }
    if model.config.metric == Metric::Cosine {
        let n = central(&mut probe, &|m| &mut m.theta_sigma)?;
        compare(analytic.theta_sigma, n);
    }
    Ok(worst)
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(model: &TwoTowerModel) -> Self {
        Self {
            m: Gradients::zeros(model),
            v: Gradients::zeros(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TwoTowerModel, g: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        let eps = cfg.epsilon;
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        if !cfg.freeze_token_embeddings {
            update(
                &mut model.token_embeddings,
                &mut self.m.token_embeddings,
                &mut self.v.token_embeddings,
                &g.token_embeddings,
            );
        }
        update(
            &mut model.projection,
            &mut self.m.projection,
            &mut self.v.projection,
            &g.projection,
        );
        if model.config.metric == Metric::Cosine {
            update(
                std::slice::from_mut(&mut model.theta_sigma),
                std::slice::from_mut(&mut self.m.theta_sigma),
                std::slice::from_mut(&mut self.v.theta_sigma),
                &[g.theta_sigma],
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "in_batch_recall@1")]
    pub in_batch_recall_at_1: f64,
    pub sigma: f64,
}

pub struct TrainOutcome {
    /// Best in-batch recall checkpoint.
    pub model: TwoTowerModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64))
}

/// Fixed evaluation batches: every query with up to P positives, no
/// negatives. Recall@1 ranks all products in the batch for each query.
fn eval_batches(data: &TrainingData, config: &TrainConfig) -> Vec<TrainingBatch> {
    let mut rng = epoch_rng(config.seed ^ 0xE7A1, usize::MAX);
    let ids: Vec<usize> = (0..data.queries.len()).collect();
    ids.chunks(config.batch_size)
        .map(|chunk| TrainingBatch {
            queries: chunk
                .iter()
                .map(|&qi| BatchQuery {
                    query: qi,
                    slots: sample_positives(&data.queries[qi], config.positives_per_epoch, &mut rng)
                        .into_iter()
                        .map(|(product, score)| Slot {
                            product,
                            score,
                            source: SlotSource::Positive,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect()
}

/// Fraction of queries whose top-scoring product among all products in the
/// batch is labeled for that query.
pub fn in_batch_recall_at_1(model: &TwoTowerModel, data: &TrainingData, batches: &[TrainingBatch]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in batches {
        let products: BTreeSet<u32> = b.queries.iter().flat_map(|q| q.slots.iter().map(|s| s.product)).collect();
        let forwards = encode_products(model, data, &products)?;
        for bq in &b.queries {
            let q = &data.queries[bq.query];
            let qf = model.forward(&q.tokens)?;
            let mut best: Option<(u32, f64)> = None;
            for (&o, f) in &forwards {
                let s = dot(&qf.output, &f.output);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((o, s));
                }
            }
            total += 1;
            if best.is_some_and(|(o, _)| q.is_labeled(o)) {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Trains a copy of `model`. Stops after `max_epochs` or when in-batch
/// recall@1 has not improved for `patience` epochs, and returns the best
/// trained checkpoint (ties go to the later epoch). The starting model is
/// returned only when `max_epochs` is 0.
pub fn train(
    model: &TwoTowerModel,
    data: &TrainingData,
    mined: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut current = model.clone();
    let mut adam = Adam::new(&current);
    let evals = eval_batches(data, config);
    let eval_loss = |m: &TwoTowerModel| -> Result<f64> {
        let mut total = 0.0;
        for b in &evals {
            total += batch_loss(m, data, b)?;
        }
        Ok(total / evals.len().max(1) as f64)
    };

    let initial_recall = in_batch_recall_at_1(&current, data, &evals)?;
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        loss: eval_loss(&current)?,
        in_batch_recall_at_1: initial_recall,
        sigma: current.sigma(),
    }];
    let mut best = (current.clone(), initial_recall, 0usize);
    let mut best_strict = initial_recall;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..data.queries.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = build_batch(&current, data, mined, chunk, config, &mut rng)?;
            let (loss, grads) = batch_gradients(&current, data, &batch, config.freeze_token_embeddings)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {n_batches}: {e}")))?;
            adam.step(&mut current, &grads, config);
            loss_sum += loss;
            n_batches += 1;
        }
        let recall = in_batch_recall_at_1(&current, data, &evals)?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            in_batch_recall_at_1: recall,
            sigma: current.sigma(),
        };
        info!(
            "epoch {epoch}: loss {:.5} recall@1 {:.4} sigma {:.4}",
            m.loss, m.in_batch_recall_at_1, m.sigma
        );
        metrics.push(m);
        if epoch == 1 || recall >= best.1 {
            best = (current.clone(), recall, epoch);
        }
        if recall > best_strict {
            best_strict = recall;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        metrics,
        best_epoch: best.2,
    })
}

pub fn write_training_log(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        let _ = writeln!(out, "{}", serde_json::to_string(m)?);
    }
    codec::write_file(path, out.as_bytes())
}
