//! Okapi BM25 over an inverted index of product text.
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = Σ_t∈q idf(t) · tf·(k1 + 1) / (tf + k1·(1 - b + b·|d|/avgdl))
//! ```
//!
//! Query terms are summed with multiplicity, so repeating a term never
//! lowers a score.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::corpus::{Catalog, Product};
use crate::error::{Error, Result};
use crate::text::tokenize;

const LEXICAL_MAGIC: &[u8; 8] = b"HRLEXIX\0";
pub const LEXICAL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexicalConfig {
    pub k1: f64,
    pub b: f64,
    /// Index attribute values in addition to the title.
    pub include_attributes: bool,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            include_attributes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub config: LexicalConfig,
    ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

pub fn document_tokens(product: &Product, include_attributes: bool) -> Vec<String> {
    let mut toks = tokenize(&product.title);
    if include_attributes {
        for v in product.attributes.values() {
            toks.extend(tokenize(v));
        }
    }
    toks
}

pub fn build_lexical(catalog: &Catalog, config: LexicalConfig) -> Result<InvertedIndex> {
    if catalog.is_empty() {
        return Err(Error::invalid("cannot build a lexical index over an empty catalog"));
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lens = Vec::with_capacity(catalog.len());
    for (ordinal, p) in catalog.products().iter().enumerate() {
        let toks = document_tokens(p, config.include_attributes);
        doc_lens.push(toks.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in toks {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t).or_default().push(Posting {
                ordinal: ordinal as u32,
                tf: n,
            });
        }
    }
    let avg_len = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64;
    Ok(InvertedIndex {
        config,
        ids: catalog.products().iter().map(|p| p.id.clone()).collect(),
        doc_lens,
        avg_len,
        postings,
    })
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.ids.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: f64, doc_len: f64) -> f64 {
        let LexicalConfig { k1, b, .. } = self.config;
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / self.avg_len))
    }

    pub fn bm25_score(&self, query_tokens: &[String], ordinal: usize) -> f64 {
        let doc_len = self.doc_lens[ordinal] as f64;
        let mut score = 0.0;
        for t in query_tokens {
            let list = self.postings(t);
            if let Ok(i) = list.binary_search_by_key(&(ordinal as u32), |p| p.ordinal) {
                score += self.term_weight(self.idf(t), list[i].tf as f64, doc_len);
            }
        }
        score
    }

    /// BM25 of an arbitrary token bag against this index's statistics.
    pub fn score_tokens(&self, query_tokens: &[String], doc_tokens: &[String]) -> f64 {
        let doc_len = doc_tokens.len() as f64;
        query_tokens
            .iter()
            .map(|t| {
                let tf = doc_tokens.iter().filter(|d| *d == t).count() as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.term_weight(self.idf(t), tf, doc_len)
                }
            })
            .sum()
    }

    /// Top-k `(ordinal, score)` by descending score, ties by ascending
    /// ordinal (= ascending product id). Only documents sharing a term.
    pub fn retrieve_ordinals(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let toks = tokenize(query);
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for t in &toks {
            let idf = self.idf(t);
            for p in self.postings(t) {
                let w = self.term_weight(idf, p.tf as f64, self.doc_lens[p.ordinal as usize] as f64);
                *acc.entry(p.ordinal).or_default() += w;
            }
        }
        let mut hits: Vec<(usize, f64)> = acc.into_iter().map(|(o, s)| (o as usize, s)).collect();
        hits.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }

    pub fn lexical_retrieve(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        self.retrieve_ordinals(query, k)
            .into_iter()
            .map(|(o, s)| (self.ids[o].clone(), s))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.f64(self.config.k1);
        w.f64(self.config.b);
        w.u8(self.config.include_attributes as u8);
        w.u64(self.ids.len() as u64);
        for id in &self.ids {
            w.str(id);
        }
        w.u32s(&self.doc_lens);
        w.f64(self.avg_len);
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.str(term);
            w.u64(list.len() as u64);
            for p in list {
                w.u32(p.ordinal);
                w.u32(p.tf);
            }
        }
        codec::seal(LEXICAL_MAGIC, LEXICAL_VERSION, w.bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "lexical index";
        let payload = codec::unseal(LEXICAL_MAGIC, LEXICAL_VERSION, WHAT, bytes)?;
        let mut r = Reader::new(payload, WHAT);
        let config = LexicalConfig {
            k1: r.f64()?,
            b: r.f64()?,
            include_attributes: r.u8()? != 0,
        };
        let n = r.u64()? as usize;
        let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let doc_lens = r.u32s()?;
        let avg_len = r.f64()?;
        let n_terms = r.u64()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.str()?;
            let len = r.u64()? as usize;
            let mut list = Vec::with_capacity(len.min(n));
            for _ in 0..len {
                let ordinal = r.u32()?;
                if ordinal as usize >= n {
                    return Err(Error::corrupt(WHAT, "posting ordinal out of range"));
                }
                list.push(Posting { ordinal, tf: r.u32()? });
            }
            postings.insert(term, list);
        }
        r.finish()?;
        if doc_lens.len() != n {
            return Err(Error::corrupt(WHAT, "document length table size mismatch"));
        }
        Ok(Self {
            config,
            ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}
