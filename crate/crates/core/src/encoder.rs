//! Embedding tables, residual bipartite propagation, scoring and BPR.
//!
//! One propagation layer computes
//!
//! ```text
//! E_l^u = Ã E_{l-1}^v + E_{l-1}^u
//! E_l^v = Ãᵀ E_{l-1}^u + E_{l-1}^v
//! ```
//!
//! and the final representation is the sum of all layer outputs including
//! `l = 0`. Every layer may use its own edge values (masked views).

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use crate::dataset::InteractionDataset;
use crate::error::{contract, shape_err, Error, Result};
use crate::numerics::sparse::spmm_pattern;
use crate::numerics::tensor::dot;
use crate::numerics::{CsrMatrix, RngStream, SparsePattern, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PropagationConfig {
    pub layers: usize,
    pub dim: usize,
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return contract("embedding width must be at least 1");
        }
        Ok(())
    }
}

/// Learnable ID embedding tables `E0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingState {
    pub user: Tensor,
    pub item: Tensor,
}

impl EmbeddingState {
    /// `Normal(0, (0.1/√d)²)` initialisation.
    pub fn init(n_users: usize, n_items: usize, dim: usize, rng: &mut RngStream) -> Self {
        let std = 0.1 / (dim as f64).sqrt();
        Self {
            user: Tensor::randn(n_users, dim, std, rng),
            item: Tensor::randn(n_items, dim, std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    pub fn checksum(&self) -> u64 {
        self.user.checksum() ^ self.item.checksum().rotate_left(17)
    }
}

/// Layer outputs and their sums.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub user_layers: Vec<Tensor>,
    pub item_layers: Vec<Tensor>,
    pub user: Tensor,
    pub item: Tensor,
}

/// Propagates `e0` through one layer per entry of `layers`.
pub fn propagate(layers: &[&CsrMatrix], e0: &EmbeddingState) -> Result<Propagation> {
    let (n, m) = (e0.user.rows(), e0.item.rows());
    if e0.user.cols() != e0.item.cols() {
        return shape_err("propagate", "user and item widths differ");
    }
    let mut user_layers = vec![e0.user.clone()];
    let mut item_layers = vec![e0.item.clone()];
    let mut user = e0.user.clone();
    let mut item = e0.item.clone();
    for a in layers {
        if a.rows() != n || a.cols() != m {
            return shape_err(
                "propagate",
                format!("adjacency {}x{} for {n} users and {m} items", a.rows(), a.cols()),
            );
        }
        let (pu, pv) = (user_layers.last().unwrap(), item_layers.last().unwrap());
        let mut nu = spmm_pattern(a.pattern(), a.values(), pv, false)?;
        let mut nv = spmm_pattern(a.pattern(), a.values(), pu, true)?;
        nu.add_assign_scaled(pu, 1.0)?;
        nv.add_assign_scaled(pv, 1.0)?;
        user.add_assign_scaled(&nu, 1.0)?;
        item.add_assign_scaled(&nv, 1.0)?;
        user_layers.push(nu);
        item_layers.push(nv);
    }
    Ok(Propagation {
        user_layers,
        item_layers,
        user,
        item,
    })
}

/// [`propagate`] with the same adjacency at every layer.
pub fn propagate_uniform(adj: &CsrMatrix, e0: &EmbeddingState, layers: usize) -> Result<Propagation> {
    propagate(&vec![adj; layers], e0)
}

/// One differentiable layer on a tape; `values` is the `nnz × 1` edge column.
pub fn propagate_layer(tape: &Tape, pattern: &Arc<SparsePattern>, values: Var, user: Var, item: Var) -> Result<(Var, Var)> {
    let nu = tape.spmm(pattern, values, item, false)?;
    let nv = tape.spmm(pattern, values, user, true)?;
    Ok((tape.add(nu, user)?, tape.add(nv, item)?))
}

/// Tape-side propagation result.
#[derive(Clone, Debug)]
pub struct TapePropagation {
    pub user_layers: Vec<Var>,
    pub item_layers: Vec<Var>,
    pub user: Var,
    pub item: Var,
}

/// Differentiable [`propagate`]; one value column per layer.
pub fn propagate_tape(tape: &Tape, pattern: &Arc<SparsePattern>, layer_values: &[Var], user: Var, item: Var) -> Result<TapePropagation> {
    let mut user_layers = vec![user];
    let mut item_layers = vec![item];
    let (mut su, mut sv) = (user, item);
    for &vals in layer_values {
        let (nu, nv) = propagate_layer(tape, pattern, vals, *user_layers.last().unwrap(), *item_layers.last().unwrap())?;
        su = tape.add(su, nu)?;
        sv = tape.add(sv, nv)?;
        user_layers.push(nu);
        item_layers.push(nv);
    }
    Ok(TapePropagation {
        user_layers,
        item_layers,
        user: su,
        item: sv,
    })
}

/// Predicted preference `⟨e_u, e_i⟩`.
pub fn score(e_u: &[f64], e_i: &[f64]) -> f64 {
    dot(e_u, e_i)
}

/// `(user, positive item, negative item)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Train edges and per-user positive sets for sampling.
#[derive(Clone, Debug)]
pub struct TrainIndex {
    n_items: usize,
    edges: Vec<(usize, usize)>,
    positives: Vec<Vec<usize>>,
}

impl TrainIndex {
    pub fn new(ds: &InteractionDataset) -> Self {
        let edges: Vec<_> = ds.train_edges().map(|e| (e.user, e.item)).collect();
        let mut positives = vec![Vec::new(); ds.n_users()];
        for &(u, i) in &edges {
            positives[u].push(i);
        }
        positives.iter_mut().for_each(|p| p.sort_unstable());
        Self {
            n_items: ds.n_items(),
            edges,
            positives,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn positives(&self, u: usize) -> &[usize] {
        &self.positives[u]
    }

    pub fn is_positive(&self, u: usize, i: usize) -> bool {
        self.positives[u].binary_search(&i).is_ok()
    }

    /// Uniform item not in `u`'s train positives.
    pub fn sample_negative(&self, u: usize, rng: &mut RngStream) -> Result<usize> {
        if self.positives[u].len() >= self.n_items {
            return Err(Error::Sampling(format!("user {u} has interacted with every item")));
        }
        for _ in 0..1000 {
            let j = rng.below(self.n_items);
            if !self.is_positive(u, j) {
                return Ok(j);
            }
        }
        // Dense user: pick uniformly among the complement directly.
        let free: Vec<usize> = (0..self.n_items).filter(|&j| !self.is_positive(u, j)).collect();
        Ok(free[rng.below(free.len())])
    }
}

/// `batch_size` triples: a uniformly drawn train edge plus one uniform
/// negative item for its user.
pub fn sample_bpr_triples(index: &TrainIndex, batch_size: usize, rng: &mut RngStream) -> Result<Vec<Triple>> {
    if batch_size > 0 && index.edges.is_empty() {
        return contract("training split is empty");
    }
    (0..batch_size)
        .map(|_| {
            let (user, pos) = index.edges[rng.below(index.edges.len())];
            let neg = index.sample_negative(user, rng)?;
            Ok(Triple { user, pos, neg })
        })
        .collect()
}

/// Mean over triples of `−ln σ(ŷ_ui − ŷ_uj)` on final embeddings.
pub fn bpr_loss(tape: &Tape, user: Var, item: Var, triples: &[Triple]) -> Result<Var> {
    if triples.is_empty() {
        return contract("bpr_loss needs at least one triple");
    }
    let idx = |f: fn(&Triple) -> usize| Arc::new(triples.iter().map(f).collect::<Vec<_>>());
    let eu = tape.gather_rows(user, idx(|t| t.user))?;
    let ei = tape.gather_rows(item, idx(|t| t.pos))?;
    let ej = tape.gather_rows(item, idx(|t| t.neg))?;
    let margin = tape.sub(tape.row_dot(eu, ei)?, tape.row_dot(eu, ej)?)?;
    let ll = tape.log_sigmoid(margin)?;
    tape.neg(tape.mean(ll)?)
}

/// Writes `(N, M, d, L)` as little-endian `u64` followed by the user then
/// item tables as row-major little-endian `f64`.
pub fn write_checkpoint(path: &Path, state: &EmbeddingState, layers: usize) -> Result<()> {
    let (n, m, d) = (state.user.rows(), state.item.rows(), state.dim());
    let mut bytes = Vec::with_capacity(32 + 8 * (n + m) * d);
    for h in [n, m, d, layers] {
        bytes.extend_from_slice(&(h as u64).to_le_bytes());
    }
    for v in state.user.data().iter().chain(state.item.data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::dataset::write_atomic(path, &bytes)
}

/// Inverse of [`write_checkpoint`]; returns the tables and `L`.
pub fn read_checkpoint(path: &Path) -> Result<(EmbeddingState, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return contract(format!("{}: truncated checkpoint header", path.display()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap()) as usize;
    let (n, m, d, l) = (word(0), word(1), word(2), word(3));
    let expected = 32 + 8 * (n + m) * d;
    if bytes.len() != expected {
        return contract(format!(
            "{}: checkpoint for N={n}, M={m}, d={d} should be {expected} bytes, found {}",
            path.display(),
            bytes.len()
        ));
    }
    let floats: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (u, i) = floats.split_at(n * d);
    Ok((
        EmbeddingState {
            user: Tensor::from_vec(n, d, u.to_vec())?,
            item: Tensor::from_vec(m, d, i.to_vec())?,
        },
        l,
    ))
}
