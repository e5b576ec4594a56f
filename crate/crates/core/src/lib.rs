//! Hybrid lexical + semantic product retrieval.
//!
//! The offline side turns engagement logs into graded labels, trains a
//! Siamese two-tower encoder with a score-weighted softmax loss and mined
//! hard negatives, and builds a BM25 inverted index plus an IVF vector index.
//! The online side gates tail queries into the semantic leg, federates both
//! legs into one deduplicated recall set, and re-ranks it with a small GBDT.

pub mod codec;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod federation;
pub mod labeler;
pub mod lexical;
pub mod miner;
pub mod pipeline;
pub mod reranker;
pub mod text;
pub mod trainer;
pub mod vector_index;

pub use error::{Error, Result};
