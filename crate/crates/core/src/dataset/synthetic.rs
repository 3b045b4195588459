use std::collections::BTreeSet;

use super::{Interaction, InteractionDataset, Split};
use crate::error::{contract, Result};
use crate::numerics::RngStream;

/// Planted-cluster bipartite generator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub edges_per_user: usize,
    /// Probability that an edge leaves the user's cluster.
    pub cross_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_users: usize, n_items: usize, n_clusters: usize, edges_per_user: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            n_clusters,
            edges_per_user,
            cross_fraction: 0.1,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: InteractionDataset,
    pub user_clusters: Vec<usize>,
    pub item_clusters: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn within_cluster_fraction(&self) -> f64 {
        let e = self.dataset.edges();
        let inside = e
            .iter()
            .filter(|x| self.user_clusters[x.user] == self.item_clusters[x.item])
            .count();
        inside as f64 / e.len().max(1) as f64
    }
}

/// Contiguous blocks; the remainder is folded into the last cluster.
fn assign(n: usize, k: usize) -> Vec<usize> {
    let per = n / k;
    (0..n).map(|i| (i / per).min(k - 1)).collect()
}

/// Generates a planted-cluster corpus: each user draws `edges_per_user`
/// distinct items, each inside its own cluster with probability
/// `1 − cross_fraction` and uniformly among other clusters' items otherwise.
pub fn generate_synthetic(spec: SyntheticSpec) -> Result<SyntheticCorpus> {
    let SyntheticSpec {
        n_users,
        n_items,
        n_clusters: k,
        edges_per_user,
        cross_fraction,
        seed,
    } = spec;
    if k == 0 || k > n_users || k > n_items {
        return contract(format!("cluster count {k} must be in 1..=min(users, items)"));
    }
    if !(0.0..=1.0).contains(&cross_fraction) {
        return contract("cross_fraction must lie in [0, 1]");
    }
    let user_clusters = assign(n_users, k);
    let item_clusters = assign(n_items, k);
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..n_items).filter(|&i| item_clusters[i] == c).collect())
        .collect();
    let smallest = members.iter().map(Vec::len).min().unwrap_or(0);
    if edges_per_user > smallest {
        return contract(format!(
            "edges_per_user {edges_per_user} exceeds the smallest cluster's {smallest} items"
        ));
    }
    let root = RngStream::new(seed);
    let mut edges = Vec::with_capacity(n_users * edges_per_user);
    for u in 0..n_users {
        let mut rng = root.derive(&[u as u64]);
        let own = &members[user_clusters[u]];
        let outside = n_items - own.len();
        let mut picked = BTreeSet::new();
        while picked.len() < edges_per_user {
            let cross = k > 1 && rng.bernoulli(cross_fraction) && picked.iter().filter(|&&i| item_clusters[i] != user_clusters[u]).count() < outside;
            let item = if cross {
                loop {
                    let i = rng.below(n_items);
                    if item_clusters[i] != user_clusters[u] {
                        break i;
                    }
                }
            } else {
                own[rng.below(own.len())]
            };
            picked.insert(item);
        }
        edges.extend(picked.into_iter().map(|item| Interaction {
            user: u,
            item,
            weight: 1.0,
            split: Split::Train,
        }));
    }
    let dataset = InteractionDataset::new(
        (0..n_users).map(|u| format!("u{u}")).collect(),
        (0..n_items).map(|i| format!("i{i}")).collect(),
        edges,
    )?;
    Ok(SyntheticCorpus {
        dataset,
        user_clusters,
        item_clusters,
    })
}
