//! Okapi BM25 over item text.

use std::collections::{BTreeSet, HashMap};

use crate::ranking::{sort_scored, ScoredItem};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Inverted index with term frequencies. Each distinct query term
/// contributes once; IDF is `ln(1 + (N - df + 0.5) / (df + 0.5))`, which is
/// always positive, so any document containing a query term scores above 0.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn new<'a>(docs: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        Self::with_params(docs, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params<'a>(docs: impl IntoIterator<Item = (&'a str, String)>, k1: f64, b: f64) -> Self {
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (doc_idx, (id, text)) in docs.into_iter().enumerate() {
            let tokens = tokenize(&text);
            doc_lens.push(tokens.len());
            doc_ids.push(id.to_string());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((doc_idx, count));
            }
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            total as f64 / doc_lens.len() as f64
        };
        Self {
            k1,
            b,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// All documents with a positive score, best first, cut to `k`.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredItem> {
        if self.avg_len == 0.0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(posting.len());
            for &(doc, tf) in posting {
                let tf = tf as f64;
                let len_norm = 1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_len;
                *scores.entry(doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
            }
        }
        let mut out: Vec<ScoredItem> = scores
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(doc, s)| ScoredItem::new(self.doc_ids[doc].clone(), s))
            .collect();
        sort_scored(&mut out);
        out.truncate(k);
        out
    }
}
