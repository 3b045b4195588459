//! Interaction datasets: loading, behavior merging, stratified splitting,
//! noise injection, degree bucketing and planted-cluster synthetic corpora.

mod io;
mod noise;
mod split;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};

pub(crate) use io::write_atomic;
pub use io::{load_interactions, parse_interactions, read_prepared, write_prepared, Format, LoadOptions};
pub use noise::{inject_noise, NoiseSpec};
pub use split::split_dataset;
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

/// One raw interaction row.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub weight: f64,
    pub behavior: Option<String>,
}

impl InteractionRecord {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            weight: 1.0,
            behavior: None,
        }
    }

    pub fn with_behavior(mut self, behavior: impl Into<String>) -> Self {
        self.behavior = Some(behavior.into());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Edge-weight regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Edge present iff any interaction occurred; weight 1.
    #[default]
    Binary,
    /// Repeated interactions aggregate into the edge weight.
    Weighted,
}

/// How weighted mode aggregates repeated `(user, item)` rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Number of rows (behaviors) observed.
    #[default]
    Count,
    /// Sum of the row weights.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
    pub split: Split,
}

/// Deduplicated bipartite interaction data with contiguous integer ids.
///
/// Edges are kept sorted by `(user, item)`; each pair appears once.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    edges: Vec<Interaction>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Canonical summary written next to a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub splits: SplitCounts,
    pub checksum: String,
}

impl InteractionDataset {
    /// Builds a dataset, sorting edges and rejecting duplicates or bad indices.
    pub fn new(user_ids: Vec<String>, item_ids: Vec<String>, mut edges: Vec<Interaction>) -> Result<Self> {
        edges.sort_by_key(|e| (e.user, e.item));
        for w in edges.windows(2) {
            if (w[0].user, w[0].item) == (w[1].user, w[1].item) {
                return contract(format!("duplicate edge ({}, {})", w[0].user, w[0].item));
            }
        }
        if let Some(e) = edges
            .iter()
            .find(|e| e.user >= user_ids.len() || e.item >= item_ids.len())
        {
            return contract(format!("edge ({}, {}) references an unknown id", e.user, e.item));
        }
        if let Some(e) = edges.iter().find(|e| !(e.weight >= 0.0 && e.weight.is_finite())) {
            return contract(format!("edge ({}, {}) has invalid weight {}", e.user, e.item, e.weight));
        }
        Ok(Self {
            user_ids,
            item_ids,
            edges,
        })
    }

    /// Dataset over anonymous ids `u0..`, `i0..` with every edge in train.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edges = pairs
            .iter()
            .map(|&(user, item)| Interaction {
                user,
                item,
                weight: 1.0,
                split: Split::Train,
            })
            .collect();
        Self::new(
            (0..n_users).map(|u| format!("u{u}")).collect(),
            (0..n_items).map(|i| format!("i{i}")).collect(),
            edges,
        )
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn split_edges(&self, split: Split) -> impl Iterator<Item = &Interaction> {
        self.edges.iter().filter(move |e| e.split == split)
    }

    pub fn train_edges(&self) -> impl Iterator<Item = &Interaction> {
        self.split_edges(Split::Train)
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.edges {
            match e.split {
                Split::Train => c.train += 1,
                Split::Valid => c.valid += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    /// Sorted item lists per user for one split.
    pub fn positives(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for e in self.split_edges(split) {
            out[e.user].push(e.item);
        }
        out
    }

    pub fn user_degrees(&self, split: Split) -> Vec<usize> {
        let mut d = vec![0; self.n_users()];
        for e in self.split_edges(split) {
            d[e.user] += 1;
        }
        d
    }

    pub fn item_degrees(&self, split: Split) -> Vec<usize> {
        let mut d = vec![0; self.n_items()];
        for e in self.split_edges(split) {
            d[e.item] += 1;
        }
        d
    }

    /// Copy with new split tags, one per edge in storage order.
    pub fn with_splits(&self, splits: &[Split]) -> Result<Self> {
        if splits.len() != self.edges.len() {
            return contract("one split tag per edge required");
        }
        let mut out = self.clone();
        for (e, &s) in out.edges.iter_mut().zip(splits) {
            e.split = s;
        }
        Ok(out)
    }

    /// SHA-256 over counts and the canonical edge list (ids, weight bits, split).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{} {}\n", self.n_users(), self.n_items()));
        for e in &self.edges {
            h.update(format!(
                "{}\t{}\t{:016x}\t{}\n",
                e.user,
                e.item,
                e.weight.to_bits(),
                e.split.as_str()
            ));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            n_users: self.n_users(),
            n_items: self.n_items(),
            n_interactions: self.len(),
            splits: self.split_counts(),
            checksum: self.checksum(),
        }
    }
}

/// Collapses raw records into one edge per `(user, item)`.
///
/// Ids are remapped to `0..n` in order of first appearance. In binary mode
/// every edge has weight 1; in weighted mode the weight is the configured
/// aggregation of the merged rows.
pub fn merge_behaviors(records: &[InteractionRecord], regime: Regime, aggregation: Aggregation) -> Result<InteractionDataset> {
    let mut user_index = std::collections::HashMap::new();
    let mut item_index = std::collections::HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut merged: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    for r in records {
        if r.user_id.is_empty() || r.item_id.is_empty() {
            return contract("interaction ids must be nonempty");
        }
        if !(r.weight >= 0.0 && r.weight.is_finite()) {
            return contract(format!("negative or non-finite weight {}", r.weight));
        }
        let u = *user_index.entry(r.user_id.clone()).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            user_ids.len() - 1
        });
        let i = *item_index.entry(r.item_id.clone()).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            item_ids.len() - 1
        });
        let slot = merged.entry((u, i)).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += r.weight;
    }
    let edges = merged
        .into_iter()
        .map(|((user, item), (count, sum))| Interaction {
            user,
            item,
            weight: match (regime, aggregation) {
                (Regime::Binary, _) => 1.0,
                (Regime::Weighted, Aggregation::Count) => count as f64,
                (Regime::Weighted, Aggregation::Sum) => sum,
            },
            split: Split::Train,
        })
        .collect();
    InteractionDataset::new(user_ids, item_ids, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    User,
    Item,
}

/// Ids whose train degree lies in `[lower, upper)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DegreeBucket {
    pub lower: usize,
    pub upper: Option<usize>,
    pub ids: Vec<usize>,
}

impl DegreeBucket {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("[{},{})", self.lower, u),
            None => format!("[{},inf)", self.lower),
        }
    }
}

/// Partitions user or item ids by train degree. `boundaries = [b1, .., bk]`
/// yields `k + 1` buckets `[0,b1), [b1,b2), .., [bk,∞)`.
pub fn bucket_by_degree(ds: &InteractionDataset, axis: Axis, boundaries: &[usize]) -> Result<Vec<DegreeBucket>> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return contract("bucket boundaries must be strictly increasing");
    }
    let degrees = match axis {
        Axis::User => ds.user_degrees(Split::Train),
        Axis::Item => ds.item_degrees(Split::Train),
    };
    let mut buckets: Vec<DegreeBucket> = std::iter::once(0)
        .chain(boundaries.iter().copied())
        .enumerate()
        .map(|(k, lower)| DegreeBucket {
            lower,
            upper: boundaries.get(k).copied(),
            ids: Vec::new(),
        })
        .collect();
    for (id, &d) in degrees.iter().enumerate() {
        let k = boundaries.partition_point(|&b| b <= d);
        buckets[k].ids.push(id);
    }
    Ok(buckets)
}
