//! Synthetic catalogs: random ones for oracle checks, and a planted-signal
//! corpus whose targets are reachable through exactly one evidence path.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{AttrValue, Catalog, Interaction, InteractionHistory, Item, QueryCase};

const CONSONANTS: &[u8] = b"bdfgklmnprstvzh";
const VOWELS: &[u8] = b"aeiou";

/// A pronounceable three-syllable word, distinct for every `n` below 75^3.
pub fn word(n: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = n % base.pow(3);
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let syl = n % base;
        n /= base;
        out.push(CONSONANTS[syl / VOWELS.len()] as char);
        out.push(VOWELS[syl % VOWELS.len()] as char);
    }
    out
}

fn item(item_id: String, title: String, category: String, description: String) -> Item {
    Item { item_id, title, category, attributes: BTreeMap::new(), description }
}

fn history(user_id: &str, item_ids: &[String], start: i64) -> InteractionHistory {
    InteractionHistory {
        user_id: user_id.to_string(),
        events: item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| Interaction { item_id: id.clone(), timestamp: start + i as i64, rating: None })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomCatalogSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub vocabulary: usize,
    pub max_events: usize,
}

impl Default for RandomCatalogSpec {
    fn default() -> Self {
        Self { users: 60, items: 150, categories: 6, vocabulary: 40, max_events: 12 }
    }
}

/// Items titled from a small shared vocabulary; each user gets 1..=max_events
/// events on random items (repeats allowed, timestamps distinct).
pub fn random_catalog(spec: &RandomCatalogSpec, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..spec.vocabulary.max(1)).map(|i| word(i * 7 + 3)).collect();
    let categories: Vec<String> = (0..spec.categories.max(1)).map(|i| format!("cat{i}")).collect();
    let items: Vec<Item> = (0..spec.items)
        .map(|i| {
            let title_len = rng.random_range(1..=4);
            let title: Vec<&str> = (0..title_len).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect();
            let desc_len = rng.random_range(0..=6);
            let desc: Vec<&str> = (0..desc_len).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect();
            let mut it = item(
                format!("i{i:04}"),
                title.join(" "),
                categories.choose(&mut rng).unwrap().clone(),
                desc.join(" "),
            );
            if rng.random_bool(0.3) {
                it.attributes.insert("price".into(), AttrValue::Number(rng.random_range(1..500u32).into()));
            }
            it
        })
        .collect();
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let histories: Vec<InteractionHistory> = (0..spec.users)
        .map(|u| {
            let n = rng.random_range(1..=spec.max_events.max(1));
            let chosen: Vec<String> = (0..n).map(|_| ids.choose(&mut rng).unwrap().clone()).collect();
            history(&format!("u{u:03}"), &chosen, rng.random_range(0..1000))
        })
        .collect();
    Catalog::new(items, histories).expect("generated catalog is valid")
}

/// Which evidence path reaches a planted target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedPath {
    /// Only a neighbor's favourite category leads to the target.
    Neighbor,
    /// Only expansion around a relevant history item leads to the target.
    Anchor,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub catalog: Catalog,
    pub cases: Vec<QueryCase>,
    pub paths: BTreeMap<String, PlantedPath>,
}

/// Embedding width the planted corpus is tuned for. Narrower hash
/// embeddings let unrelated cases collide often enough to blur the signal.
pub const PLANTED_DIM: usize = 512;

const DECOYS: usize = 14;
const NEIGHBOR_ITEMS: usize = 4;
const COMPANIONS: usize = 4;
const NEIGHBORS: usize = 3;

impl PlantedCorpus {
    /// Expected H@K of a ranker that draws K items uniformly from those
    /// outside the user's history, averaged over cases.
    pub fn random_hit_rate(&self, k: usize) -> f64 {
        let total = self.catalog.num_items();
        let sum: f64 = self
            .cases
            .iter()
            .map(|case| {
                let history = self.catalog.get_history(&case.user_id).map(|h| h.item_set()).unwrap_or_default();
                let eligible = total - history.len();
                let relevant = case.relevant_item_ids.difference(&history).count();
                if eligible == 0 || relevant == 0 {
                    return 0.0;
                }
                let draws = k.min(eligible);
                // 1 - C(eligible - relevant, draws) / C(eligible, draws)
                let miss: f64 = (0..draws)
                    .map(|i| (eligible - relevant).saturating_sub(i) as f64 / (eligible - i) as f64)
                    .product();
                1.0 - miss
            })
            .sum();
        sum / self.cases.len().max(1) as f64
    }
}

/// Builds `cases` planted cases, alternating neighbor and anchor paths, plus
/// background users with random histories.
///
/// Every case has its own query words. Decoys match the query better than
/// the target does, so plain query retrieval never reaches it. In a
/// neighbor case the target carries the neighbors' favourite category; in
/// an anchor case it is the nearest item to a relevant history item.
pub fn planted_corpus(cases: usize, seed: u64) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut histories = Vec::new();
    let mut query_cases = Vec::new();
    let mut paths = BTreeMap::new();

    for c in 0..cases {
        let w = |role: usize| word(c * 8 + role + 11);
        let (qa, qb, theme, decoy_cat, s1, s2, anchor_word) = (w(0), w(1), w(2), w(3), w(4), w(5), w(6));
        let path = if c % 2 == 0 { PlantedPath::Neighbor } else { PlantedPath::Anchor };
        let id = |kind: &str, j: usize| format!("p{c:03}-{kind}{j}");
        let target = id("t", 0);
        let anchor = id("a", 0);
        let shared = [id("s", 0), id("s", 1)];

        for j in 0..DECOYS {
            items.push(item(id("d", j), format!("{qa} {qb} d{j}"), decoy_cat.clone(), String::new()));
        }
        let neighbor_items: Vec<String> = (0..NEIGHBOR_ITEMS).map(|j| id("r", j)).collect();
        for (j, rid) in neighbor_items.iter().enumerate() {
            items.push(item(rid.clone(), format!("{qa} {qb} {theme} r{j} rr{j}"), theme.clone(), String::new()));
        }
        for sid in &shared {
            items.push(item(sid.clone(), format!("{s1} {s2}"), theme.clone(), String::new()));
        }
        match path {
            PlantedPath::Neighbor => {
                items.push(item(target.clone(), format!("{qa} {qb} {theme} {theme}"), theme.clone(), String::new()));
                items.push(item(anchor.clone(), format!("{qa} {qb} {anchor_word}"), decoy_cat.clone(), String::new()));
            }
            PlantedPath::Anchor => {
                let anchor_cat = format!("{anchor_word}x");
                items.push(item(
                    target.clone(),
                    format!("{qa} {qb} {anchor_word} {anchor_word} {anchor_cat}"),
                    anchor_cat.clone(),
                    String::new(),
                ));
                items.push(item(anchor.clone(), format!("{qa} {qb} {anchor_word}"), anchor_cat.clone(), String::new()));
                for j in 0..COMPANIONS {
                    items.push(item(
                        id("c", j),
                        format!("{qa} {qb} {anchor_word} c{j}"),
                        anchor_cat.clone(),
                        String::new(),
                    ));
                }
            }
        }

        let user = format!("p{c:03}-user");
        let mut own = shared.to_vec();
        own.push(anchor);
        histories.push(history(&user, &own, 100));
        for v in 0..NEIGHBORS {
            let mut theirs = shared.to_vec();
            theirs.extend(neighbor_items.iter().cloned());
            histories.push(history(&format!("p{c:03}-nb{v}"), &theirs, 100));
        }
        query_cases.push(QueryCase {
            case_id: format!("p{c:03}"),
            user_id: user,
            query: format!("{qa} {qb}"),
            relevant_item_ids: BTreeSet::from([target]),
        });
        paths.insert(format!("p{c:03}"), path);
    }

    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    for b in 0..cases / 2 {
        let mut picks: Vec<String> = ids.choose_multiple(&mut rng, 4).cloned().collect();
        picks.shuffle(&mut rng);
        histories.push(history(&format!("bg{b:03}"), &picks, 1));
    }

    PlantedCorpus {
        catalog: Catalog::new(items, histories).expect("planted catalog is valid"),
        cases: query_cases,
        paths,
    }
}
