//! Normalised bipartite adjacency and per-layer edge masks.

use std::sync::Arc;

use crate::dataset::InteractionDataset;
use crate::error::{contract, Result};
use crate::numerics::{CsrMatrix, SparsePattern};

/// `Ã = D_u^{-1/2} A D_v^{-1/2}` over the training edges, `n_users × n_items`.
///
/// Entries are stored in the row-major order of the shared pattern; that
/// order is the canonical edge index used by masks and soft views.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
    user_degree: Vec<f64>,
    item_degree: Vec<f64>,
    raw_weights: Vec<f64>,
    weighted: bool,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        self.matrix.pattern()
    }

    pub fn values(&self) -> &[f64] {
        self.matrix.values()
    }

    pub fn n_users(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_items(&self) -> usize {
        self.matrix.cols()
    }

    pub fn n_edges(&self) -> usize {
        self.matrix.nnz()
    }

    /// Weighted degrees (edge counts in binary mode).
    pub fn user_degree(&self) -> &[f64] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[f64] {
        &self.item_degree
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw_weights
    }

    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    /// User endpoint of each edge.
    pub fn edge_users(&self) -> &[usize] {
        self.pattern().edge_rows()
    }

    /// Item endpoint of each edge.
    pub fn edge_items(&self) -> &[usize] {
        self.pattern().indices()
    }

    /// Items adjacent to user `u`.
    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        let p = self.pattern();
        &p.indices()[p.offsets()[u]..p.offsets()[u + 1]]
    }

    /// Users adjacent to item `i`.
    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        let p = self.pattern();
        &p.t_indices()[p.t_offsets()[i]..p.t_offsets()[i + 1]]
    }

    /// Per-edge values `1/deg_u` (row mean) and `1/deg_i` (column mean) on
    /// the unweighted topology; multiplying by them averages neighbours.
    pub fn mean_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.pattern();
        let rows: Vec<f64> = p
            .edge_rows()
            .iter()
            .map(|&u| 1.0 / (p.offsets()[u + 1] - p.offsets()[u]) as f64)
            .collect();
        let cols: Vec<f64> = p
            .indices()
            .iter()
            .map(|&i| 1.0 / (p.t_offsets()[i + 1] - p.t_offsets()[i]) as f64)
            .collect();
        (rows, cols)
    }
}

/// Builds `Ã` from the train split. Binary mode uses `w = 1`; weighted mode
/// uses edge weights in both `A` and the degrees. Isolated nodes get empty
/// rows/columns.
pub fn build_normalized_adjacency(ds: &InteractionDataset, use_weights: bool) -> Result<NormalizedAdjacency> {
    let train: Vec<_> = ds.train_edges().collect();
    if train.is_empty() {
        return contract("training split is empty");
    }
    let pairs: Vec<(usize, usize)> = train.iter().map(|e| (e.user, e.item)).collect();
    let (pattern, order) = SparsePattern::from_pairs(ds.n_users(), ds.n_items(), &pairs)?;
    let raw_weights: Vec<f64> = order
        .iter()
        .map(|&k| if use_weights { train[k].weight } else { 1.0 })
        .collect();
    let mut user_degree = vec![0.0; ds.n_users()];
    let mut item_degree = vec![0.0; ds.n_items()];
    for (k, (&u, &i)) in pattern.edge_rows().iter().zip(pattern.indices()).enumerate() {
        user_degree[u] += raw_weights[k];
        item_degree[i] += raw_weights[k];
    }
    let values = pattern
        .edge_rows()
        .iter()
        .zip(pattern.indices())
        .zip(&raw_weights)
        .map(|((&u, &i), &w)| {
            let den = (user_degree[u] * item_degree[i]).sqrt();
            if den > 0.0 {
                w / den
            } else {
                0.0
            }
        })
        .collect();
    Ok(NormalizedAdjacency {
        matrix: CsrMatrix::new(Arc::new(pattern), values)?,
        user_degree,
        item_degree,
        raw_weights,
        weighted: use_weights,
    })
}

/// `A^l = Ã ⊙ M^l` restricted to the existing edges.
#[derive(Clone, Debug)]
pub struct MaskedAdjacency {
    pub layer: usize,
    pub mask: Vec<f64>,
    pub matrix: CsrMatrix,
    /// `‖M^l‖₀`, the number of edges with a nonzero mask.
    pub nonzero: usize,
}

pub fn apply_edge_mask(adj: &NormalizedAdjacency, layer: usize, mask: &[f64]) -> Result<MaskedAdjacency> {
    if mask.len() != adj.n_edges() {
        return contract(format!(
            "mask has {} values for {} edges",
            mask.len(),
            adj.n_edges()
        ));
    }
    if let Some(bad) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return contract(format!("mask value {bad} outside [0, 1]"));
    }
    let values = adj.values().iter().zip(mask).map(|(a, m)| a * m).collect();
    Ok(MaskedAdjacency {
        layer,
        mask: mask.to_vec(),
        matrix: adj.matrix().with_values(values)?,
        nonzero: mask.iter().filter(|&&m| m != 0.0).count(),
    })
}
