#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::sync::Arc;

use macf_core::catalog::{Catalog, Interaction, InteractionHistory, Item};
use macf_core::embedding::{build_index, EmbeddingProvider, HashEmbedder};
use macf_core::tools::Retrieval;

pub fn retrieval(catalog: Catalog, dim: usize) -> Arc<Retrieval> {
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::new(dim));
    let (index, _) = build_index(&catalog, provider.as_ref(), None).expect("index builds");
    Arc::new(Retrieval::new(Arc::new(catalog), Arc::new(index), provider).expect("retrieval builds"))
}

pub fn item(id: &str, title: &str, category: &str) -> Item {
    Item {
        item_id: id.into(),
        title: title.into(),
        category: category.into(),
        attributes: BTreeMap::new(),
        description: String::new(),
    }
}

pub fn history(user: &str, items: &[&str]) -> InteractionHistory {
    InteractionHistory {
        user_id: user.into(),
        events: items
            .iter()
            .enumerate()
            .map(|(t, id)| Interaction { item_id: (*id).into(), timestamp: t as i64, rating: None })
            .collect(),
    }
}

/// Three items and four users; u4 holds only `a`.
pub fn toy_catalog() -> Catalog {
    Catalog::new(
        vec![item("a", "alpha", "x"), item("b", "beta", "x"), item("c", "gamma", "y")],
        vec![
            history("u1", &["a", "b"]),
            history("u2", &["a", "b", "c"]),
            history("u3", &["b", "c"]),
            history("u4", &["a"]),
        ],
    )
    .expect("toy catalog is valid")
}
