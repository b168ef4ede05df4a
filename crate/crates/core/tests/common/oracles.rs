//! Brute-force reference implementations. They share no code with the
//! engine beyond the catalog data model and the stored vectors.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use macf_core::catalog::Catalog;
use macf_core::embedding::VectorIndex;
use macf_core::ranking::ScoredItem;

pub const SCORE_TOL: f64 = 1e-9;

fn item_set(catalog: &Catalog, user: &str) -> BTreeSet<String> {
    catalog.users()[user].events.iter().map(|e| e.item_id.clone()).collect()
}

fn sort_desc(mut v: Vec<(String, f64)>) -> Vec<(String, f64)> {
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    v
}

/// ItemCF with the target's own row left out of every count.
pub fn item_cf(catalog: &Catalog, user: &str) -> Vec<(String, f64)> {
    let mine = item_set(catalog, user);
    let others: Vec<BTreeSet<String>> = catalog
        .users()
        .keys()
        .filter(|u| u.as_str() != user)
        .map(|u| item_set(catalog, u))
        .collect();
    let holders = |id: &str| others.iter().filter(|h| h.contains(id)).count() as f64;
    let n_mine: Vec<(&String, f64)> = mine.iter().map(|j| (j, holders(j))).collect();
    let mut out = Vec::new();
    for c in catalog.items().keys() {
        if mine.contains(c) {
            continue;
        }
        let n_c = holders(c);
        if n_c == 0.0 {
            continue;
        }
        let mut score = 0.0;
        for &(j, n_j) in &n_mine {
            let both = others.iter().filter(|h| h.contains(j) && h.contains(c)).count() as f64;
            if both > 0.0 {
                score += both / (n_j * n_c).sqrt();
            }
        }
        if score > 0.0 {
            out.push((c.clone(), score));
        }
    }
    sort_desc(out)
}

/// UserCF: each overlapping user votes for their items with
/// `|Hu ∩ Hv| / sqrt(|Hu| |Hv|)`.
pub fn user_cf(catalog: &Catalog, user: &str) -> Vec<(String, f64)> {
    let mine = item_set(catalog, user);
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for v in catalog.users().keys().filter(|u| u.as_str() != user) {
        let theirs = item_set(catalog, v);
        let overlap = mine.intersection(&theirs).count() as f64;
        if overlap == 0.0 {
            continue;
        }
        let w = overlap / ((mine.len() * theirs.len()) as f64).sqrt();
        for c in theirs.difference(&mine) {
            *scores.entry(c.clone()).or_insert(0.0) += w;
        }
    }
    sort_desc(scores.into_iter().filter(|(_, s)| *s > 0.0).collect())
}

fn cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Full scan by cosine against the stored vectors.
pub fn top_k(index: &VectorIndex, query: &[f64], k: usize, exclude: &BTreeSet<String>) -> Vec<(String, f64)> {
    let all: Vec<(String, f64)> = index
        .entries()
        .iter()
        .filter(|(id, _)| !exclude.contains(*id))
        .filter_map(|(id, v)| cos(query, v.components()).map(|s| (id.clone(), s)))
        .collect();
    sort_desc(all).into_iter().take(k).collect()
}

pub fn user_vector(catalog: &Catalog, index: &VectorIndex, user: &str) -> Vec<f64> {
    let events = &catalog.users()[user].events;
    let mut acc = vec![0.0; index.dim()];
    for e in events {
        for (a, x) in acc.iter_mut().zip(index.get(&e.item_id).unwrap().components()) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / events.len() as f64).collect()
}

pub fn similar_users(catalog: &Catalog, index: &VectorIndex, user: &str, n: usize) -> Vec<(String, f64)> {
    let me = user_vector(catalog, index, user);
    let all: Vec<(String, f64)> = catalog
        .users()
        .iter()
        .filter(|(u, h)| u.as_str() != user && !h.events.is_empty())
        .filter_map(|(u, _)| cos(&me, &user_vector(catalog, index, u)).map(|s| (u.clone(), s)))
        .collect();
    sort_desc(all).into_iter().take(n).collect()
}

pub fn relevant_items(catalog: &Catalog, index: &VectorIndex, user: &str, query: &[f64], n: usize) -> Vec<(String, f64)> {
    let all: Vec<(String, f64)> = item_set(catalog, user)
        .into_iter()
        .filter_map(|id| cos(query, index.get(&id).unwrap().components()).map(|s| (id, s)))
        .collect();
    sort_desc(all).into_iter().take(n).collect()
}

pub fn by_item(index: &VectorIndex, anchor: &str, k: usize, exclude: &BTreeSet<String>) -> Vec<(String, f64)> {
    let mut skip = exclude.clone();
    skip.insert(anchor.to_string());
    top_k(index, index.get(anchor).unwrap().components(), k, &skip)
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Okapi BM25 straight from the formula, every document scored.
pub fn bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|(_, t)| words(t)).collect();
    let n = docs.len() as f64;
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: BTreeSet<String> = words(query).into_iter().collect();
    let mut out = Vec::new();
    for ((id, _), toks) in docs.iter().zip(&tokenized) {
        let mut tf: HashMap<&str, f64> = HashMap::new();
        for t in toks {
            *tf.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        let dl = toks.len() as f64;
        let mut score = 0.0;
        for term in &terms {
            let f = tf.get(term.as_str()).copied().unwrap_or(0.0);
            if f == 0.0 {
                continue;
            }
            let df = tokenized.iter().filter(|d| d.iter().any(|t| t == term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dl / avgdl));
        }
        if score > 0.0 {
            out.push((id.clone(), score));
        }
    }
    sort_desc(out)
}

/// Same ids in the same order, scores within `tol`. Adjacent entries whose
/// scores sit within `tol` of each other may swap, since their order then
/// hangs on the last bits of the arithmetic.
pub fn same_ranking(actual: &[ScoredItem], expected: &[(String, f64)], tol: f64) -> Result<(), String> {
    if actual.len() != expected.len() {
        return Err(format!("length {} vs oracle {}", actual.len(), expected.len()));
    }
    let want: BTreeMap<&str, f64> = expected.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    for (pos, (got, (oid, os))) in actual.iter().zip(expected).enumerate() {
        let Some(&ws) = want.get(got.item_id.as_str()) else {
            return Err(format!("position {pos}: {} not in oracle ranking", got.item_id));
        };
        if (ws - got.score).abs() > tol {
            return Err(format!("{}: score {} vs oracle {}", got.item_id, got.score, ws));
        }
        if &got.item_id != oid && (got.score - os).abs() > tol {
            return Err(format!("position {pos}: {} vs oracle {oid}", got.item_id));
        }
    }
    Ok(())
}

pub fn to_scored(v: &[(String, f64)]) -> Vec<ScoredItem> {
    v.iter().map(|(id, s)| ScoredItem::new(id.clone(), *s)).collect()
}
