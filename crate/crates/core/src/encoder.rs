//! Siamese bag-of-token-embeddings encoder.
//!
//! Both towers share one token-embedding table and one projection. A
//! sequence is pooled (mean or per-component max, padding excluded),
//! projected to `d_out`, and L2-normalized when the metric is cosine:
//!
//! ```text
//! h = pool(E[tokens])      (d_token)
//! z = h · P                (d_out)
//! e = z / |z|              (cosine only)
//! ```
//!
//! Parameters are `f64` so finite-difference gradient checks are meaningful;
//! emitted [`EmbeddingVector`]s are `f32`, the serving precision.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::corpus::{Catalog, Product};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
const PAD_TOKEN: &str = "[pad]";
const OOV_TOKEN: &str = "[oov]";

const MODEL_MAGIC: &[u8; 8] = b"HRMODEL\0";
pub const MODEL_VERSION: u32 = 1;

/// Pseudo-attribute that reads `Product::product_type`.
pub const PRODUCT_TYPE_ATTR: &str = "product_type";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    InnerProduct,
}

fn prefix_token(attr: &str) -> String {
    format!("[attr:{attr}]")
}

/// Token → id map. Ids 0 and 1 are padding and out-of-vocabulary, followed
/// by one prefix token per registered attribute, then text tokens in
/// lexicographic order. Prefix tokens contain brackets, which the text
/// tokenizer never emits, so they cannot collide with text.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    attributes: Vec<String>,
    pub query_max_len: usize,
    pub product_max_len: usize,
}

impl Vocabulary {
    pub fn new(
        attributes: &[String],
        text_tokens: impl IntoIterator<Item = String>,
        query_max_len: usize,
        product_max_len: usize,
    ) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        tokens.extend(attributes.iter().map(|a| prefix_token(a)));
        let text: BTreeSet<String> = text_tokens.into_iter().collect();
        tokens.extend(text);
        Self::from_parts(tokens, attributes.to_vec(), query_max_len, product_max_len)
    }

    fn from_parts(
        tokens: Vec<String>,
        attributes: Vec<String>,
        query_max_len: usize,
        product_max_len: usize,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            attributes,
            query_max_len,
            product_max_len,
        }
    }

    /// Vocabulary over catalog titles, registered attribute values and the
    /// given query strings.
    pub fn build<'a>(
        catalog: &Catalog,
        queries: impl IntoIterator<Item = &'a str>,
        attributes: &[String],
        query_max_len: usize,
        product_max_len: usize,
    ) -> Self {
        let mut text = Vec::new();
        for p in catalog.products() {
            text.extend(tokenize(&p.title));
            for a in attributes {
                if let Some(v) = attribute_value(p, a) {
                    text.extend(tokenize(v));
                }
            }
        }
        for q in queries {
            text.extend(tokenize(q));
        }
        Self::new(attributes, text, query_max_len, product_max_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn prefix_id(&self, attr: &str) -> Result<u32> {
        if !self.attributes.iter().any(|a| a == attr) {
            return Err(Error::UnregisteredAttribute(attr.to_string()));
        }
        Ok(self.index[&prefix_token(attr)])
    }

    pub fn query_tokens(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.truncate(self.query_max_len);
        ids
    }
}

fn attribute_value<'a>(p: &'a Product, attr: &str) -> Option<&'a str> {
    if attr == PRODUCT_TYPE_ATTR {
        Some(p.product_type.as_str())
    } else {
        p.attribute(attr)
    }
}

/// Title tokens, then `[attr:<name>] value tokens` for every listed
/// attribute the product has; truncated to the product max length.
pub fn compose_product_text(vocab: &Vocabulary, product: &Product, attributes: &[String]) -> Result<Vec<u32>> {
    let mut ids: Vec<u32> = tokenize(&product.title).iter().map(|t| vocab.id(t)).collect();
    for attr in attributes {
        let prefix = vocab.prefix_id(attr)?;
        if let Some(v) = attribute_value(product, attr) {
            ids.push(prefix);
            ids.extend(tokenize(v).iter().map(|t| vocab.id(t)));
        }
    }
    ids.truncate(vocab.product_max_len);
    Ok(ids)
}

/// Right-pads (or truncates) a sequence to a fixed length.
pub fn pad_to(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = ids.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_token: usize,
    pub d_out: usize,
    pub pooling: Pooling,
    pub metric: Metric,
    /// Number of query-side embeddings for multi-embedding scoring.
    pub multi_m: Option<usize>,
    /// Product attributes composed after the title.
    pub attributes: Vec<String>,
    pub query_max_len: usize,
    pub product_max_len: usize,
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_token: 64,
            d_out: 32,
            pooling: Pooling::Mean,
            metric: Metric::Cosine,
            multi_m: None,
            attributes: vec!["brand".into(), "color".into(), "gender".into()],
            query_max_len: 16,
            product_max_len: 48,
            init_sigma: 0.1,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_token == 0 || self.d_out == 0 {
            return Err(Error::Config("embedding dimensions must be >= 1".into()));
        }
        if self.query_max_len == 0 || self.product_max_len == 0 {
            return Err(Error::Config("max lengths must be >= 1".into()));
        }
        if self.multi_m == Some(0) {
            return Err(Error::Config("multi_m must be >= 1".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::Config("init_sigma must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// `vocab.len() × d_token`, row-major.
    pub token_embeddings: Vec<f64>,
    /// `d_token × d_out`, row-major.
    pub projection: Vec<f64>,
    /// σ = exp(theta_sigma).
    pub theta_sigma: f64,
}

/// Cached forward pass for one sequence, consumed by backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<u32>,
    pooled: Vec<f64>,
    /// For max pooling: the position that won each component.
    winners: Vec<usize>,
    norm: f64,
    pub output: Vec<f64>,
}

/// Gradient accumulator, same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub token_embeddings: Vec<f64>,
    pub projection: Vec<f64>,
    pub theta_sigma: f64,
}

impl Gradients {
    pub fn zeros(model: &TwoTowerModel) -> Self {
        Self {
            token_embeddings: vec![0.0; model.token_embeddings.len()],
            projection: vec![0.0; model.projection.len()],
            theta_sigma: 0.0,
        }
    }
}

impl TwoTowerModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embeddings = (0..vocab.len() * config.d_token)
            .map(|_| rng.gen_range(-0.05..=0.05))
            .collect();
        let mut projection = vec![0.0; config.d_token * config.d_out];
        for i in 0..config.d_token.min(config.d_out) {
            projection[i * config.d_out + i] = 1.0;
        }
        let theta_sigma = match config.metric {
            Metric::Cosine => config.init_sigma.ln(),
            Metric::InnerProduct => 0.0,
        };
        Ok(Self {
            config,
            vocab,
            token_embeddings,
            projection,
            theta_sigma,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.theta_sigma.exp()
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn query_tokens(&self, text: &str) -> Vec<u32> {
        self.vocab.query_tokens(text)
    }

    pub fn product_tokens(&self, product: &Product) -> Result<Vec<u32>> {
        compose_product_text(&self.vocab, product, &self.config.attributes)
    }

    fn row(&self, id: u32) -> &[f64] {
        let d = self.config.d_token;
        &self.token_embeddings[id as usize * d..(id as usize + 1) * d]
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let d_out = self.config.d_out;
        let mut z = vec![0.0; d_out];
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let row = &self.projection[i * d_out..(i + 1) * d_out];
            for (zk, &p) in z.iter_mut().zip(row) {
                *zk += hi * p;
            }
        }
        z
    }

    fn finish(&self, z: Vec<f64>) -> (Vec<f64>, f64) {
        match self.config.metric {
            Metric::Cosine => {
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    (z, 0.0)
                } else {
                    (z.iter().map(|v| v / norm).collect(), norm)
                }
            }
            Metric::InnerProduct => (z, 1.0),
        }
    }

    /// Full forward pass; padding positions are ignored.
    pub fn forward(&self, ids: &[u32]) -> Result<Forward> {
        let tokens: Vec<u32> = ids.iter().copied().filter(|&t| t != PAD).collect();
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let d = self.config.d_token;
        let mut pooled = vec![0.0; d];
        let mut winners = Vec::new();
        match self.config.pooling {
            Pooling::Mean => {
                for &t in &tokens {
                    for (acc, &v) in pooled.iter_mut().zip(self.row(t)) {
                        *acc += v;
                    }
                }
                let n = tokens.len() as f64;
                pooled.iter_mut().for_each(|v| *v /= n);
            }
            Pooling::Max => {
                pooled.copy_from_slice(self.row(tokens[0]));
                winners = vec![0; d];
                for (pos, &t) in tokens.iter().enumerate().skip(1) {
                    for (i, &v) in self.row(t).iter().enumerate() {
                        if v > pooled[i] {
                            pooled[i] = v;
                            winners[i] = pos;
                        }
                    }
                }
            }
        }
        let z = self.project(&pooled);
        let (output, norm) = self.finish(z);
        Ok(Forward {
            tokens,
            pooled,
            winners,
            norm,
            output,
        })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the emitted embedding).
    /// Token-embedding gradients are skipped when `token_grads` is false.
    pub fn backward(&self, fwd: &Forward, d_output: &[f64], grads: &mut Gradients, token_grads: bool) {
        let d = self.config.d_token;
        let d_out = self.config.d_out;
        let dz: Vec<f64> = match self.config.metric {
            Metric::Cosine => {
                if fwd.norm == 0.0 {
                    return;
                }
                let dot: f64 = fwd.output.iter().zip(d_output).map(|(e, g)| e * g).sum();
                fwd.output
                    .iter()
                    .zip(d_output)
                    .map(|(e, g)| (g - e * dot) / fwd.norm)
                    .collect()
            }
            Metric::InnerProduct => d_output.to_vec(),
        };
        let mut dh = vec![0.0; d];
        for i in 0..d {
            let row = &self.projection[i * d_out..(i + 1) * d_out];
            let grow = &mut grads.projection[i * d_out..(i + 1) * d_out];
            let hi = fwd.pooled[i];
            let mut acc = 0.0;
            for k in 0..d_out {
                grow[k] += hi * dz[k];
                acc += row[k] * dz[k];
            }
            dh[i] = acc;
        }
        if !token_grads {
            return;
        }
        match self.config.pooling {
            Pooling::Mean => {
                let n = fwd.tokens.len() as f64;
                for &t in &fwd.tokens {
                    let g = &mut grads.token_embeddings[t as usize * d..(t as usize + 1) * d];
                    for (gi, &v) in g.iter_mut().zip(&dh) {
                        *gi += v / n;
                    }
                }
            }
            Pooling::Max => {
                for (i, &pos) in fwd.winners.iter().enumerate() {
                    let t = fwd.tokens[pos] as usize;
                    grads.token_embeddings[t * d + i] += dh[i];
                }
            }
        }
    }

    pub fn encode(&self, ids: &[u32]) -> Result<EmbeddingVector> {
        let fwd = self.forward(ids)?;
        if self.config.metric == Metric::Cosine && fwd.norm == 0.0 {
            return Err(Error::Numerical("embedding has zero norm".into()));
        }
        Ok(EmbeddingVector(fwd.output.iter().map(|&v| v as f32).collect()))
    }

    pub fn encode_query(&self, text: &str) -> Result<EmbeddingVector> {
        self.encode(&self.query_tokens(text))
    }

    pub fn encode_product(&self, product: &Product) -> Result<EmbeddingVector> {
        self.encode(&self.product_tokens(product)?)
    }

    /// One embedding per leading token (first `m` tokens, the last token
    /// repeated for shorter sequences), each projected and normalized.
    pub fn multi_encode(&self, ids: &[u32], m: usize) -> Result<Vec<EmbeddingVector>> {
        if m == 0 {
            return Err(Error::invalid("multi-embedding count m must be >= 1"));
        }
        let tokens: Vec<u32> = ids.iter().copied().filter(|&t| t != PAD).collect();
        let Some(&last) = tokens.last() else {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        };
        (0..m)
            .map(|d| self.encode(&[tokens.get(d).copied().unwrap_or(last)]))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.str(&serde_json::to_string(&self.config)?);
        w.u64(self.vocab.tokens.len() as u64);
        for t in &self.vocab.tokens {
            w.str(t);
        }
        w.u64(self.vocab.attributes.len() as u64);
        for a in &self.vocab.attributes {
            w.str(a);
        }
        w.u64(self.vocab.query_max_len as u64);
        w.u64(self.vocab.product_max_len as u64);
        w.f64s(&self.token_embeddings);
        w.f64s(&self.projection);
        w.f64(self.theta_sigma);
        Ok(codec::seal(MODEL_MAGIC, MODEL_VERSION, w.bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "model";
        let payload = codec::unseal(MODEL_MAGIC, MODEL_VERSION, WHAT, bytes)?;
        let mut r = Reader::new(payload, WHAT);
        let config: ModelConfig = serde_json::from_str(&r.str()?)?;
        config.validate()?;
        let n_tokens = r.u64()? as usize;
        let tokens = (0..n_tokens).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_attrs = r.u64()? as usize;
        let attributes = (0..n_attrs).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let query_max_len = r.u64()? as usize;
        let product_max_len = r.u64()? as usize;
        let token_embeddings = r.f64s()?;
        let projection = r.f64s()?;
        let theta_sigma = r.f64()?;
        r.finish()?;
        if token_embeddings.len() != n_tokens * config.d_token
            || projection.len() != config.d_token * config.d_out
        {
            return Err(Error::corrupt(WHAT, "parameter shapes disagree with config"));
        }
        let vocab = Vocabulary::from_parts(tokens, attributes, query_max_len, product_max_len);
        Ok(Self {
            config,
            vocab,
            token_embeddings,
            projection,
            theta_sigma,
        })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn score_with_metric(metric: Metric, q: &EmbeddingVector, p: &EmbeddingVector) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: p.dim(),
        });
    }
    match metric {
        Metric::InnerProduct => Ok(dot(&q.0, &p.0)),
        Metric::Cosine => {
            let (nq, np) = (q.norm(), p.norm());
            if nq == 0.0 || np == 0.0 {
                return Err(Error::Numerical("cosine of a zero-norm vector".into()));
            }
            Ok((dot(&q.0, &p.0) / (nq * np)).clamp(-1.0, 1.0))
        }
    }
}

pub fn score_pair(model: &TwoTowerModel, q: &EmbeddingVector, p: &EmbeddingVector) -> Result<f64> {
    score_with_metric(model.config.metric, q, p)
}

/// Max over query embeddings of the cosine with `p`.
pub fn multi_score(q_embs: &[EmbeddingVector], p: &EmbeddingVector) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for q in q_embs {
        best = best.max(score_with_metric(Metric::Cosine, q, p)?);
    }
    if q_embs.is_empty() {
        return Err(Error::invalid("no query embeddings"));
    }
    Ok(best)
}
