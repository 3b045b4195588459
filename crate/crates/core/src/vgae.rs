//! Variational graph autoencoder view generator.
//!
//! A two-layer GCN (residual bipartite aggregation, tanh, weights shared by
//! users and items) maps the backbone embeddings to a Gaussian latent. The
//! decoder scores a pair by `f(z_u ⊙ z_i) = (z_u ⊙ z_i)·w + b`, and the view
//! keeps every training edge with weight `Ã_ui · σ(f(z_u ⊙ z_i))`.

use std::sync::Arc;

use crate::encoder::EmbeddingState;
use crate::error::{contract, Result};
use crate::graph::NormalizedAdjacency;
use crate::numerics::{Bound, CsrMatrix, Params, RngStream, SparsePattern, Tape, Tensor, Var};

pub const STD_FLOOR: f64 = 1e-6;

const W1: usize = 0;
const W2: usize = 1;
const W_MEAN: usize = 2;
const B_MEAN: usize = 3;
const W_STD: usize = 4;
const B_STD: usize = 5;
const W_F: usize = 6;
const B_F: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Vgae {
    params: Params,
}

impl Vgae {
    pub fn new(dim: usize, rng: &mut RngStream) -> Self {
        let mut p = Params::new();
        p.add("gcn1", Tensor::glorot(dim, dim, rng));
        p.add("gcn2", Tensor::glorot(dim, dim, rng));
        p.add("mean_w", Tensor::glorot(dim, dim, rng));
        p.add("mean_b", Tensor::zeros(1, dim));
        p.add("std_w", Tensor::glorot(dim, dim, rng));
        // softplus(-3) ≈ 0.05: start with little sampling noise
        p.add("std_b", Tensor::full(1, dim, -3.0));
        p.add("dec_w", Tensor::glorot(dim, 1, rng));
        // σ(2) ≈ 0.88: initial views keep most edge mass
        p.add("dec_b", Tensor::scalar(2.0));
        Self { params: p }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.params.get(W1).rows()
    }
}

/// Mean, standard deviation and reparameterised sample for one node type.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub std: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeLatent {
    pub user: LatentVars,
    pub item: LatentVars,
}

fn head(tape: &Tape, b: &Bound, h: Var, noise: Option<&mut RngStream>) -> Result<LatentVars> {
    let mean = tape.add_row(tape.matmul(h, b.var(W_MEAN))?, b.var(B_MEAN))?;
    let pre = tape.add_row(tape.matmul(h, b.var(W_STD))?, b.var(B_STD))?;
    let std = tape.add_scalar(tape.softplus(pre)?, STD_FLOOR)?;
    let z = match noise {
        None => mean,
        Some(rng) => {
            let [n, d] = tape.shape(mean);
            let eps = tape.constant(Tensor::randn(n, d, 1.0, rng));
            tape.add(mean, tape.mul(std, eps)?)?
        }
    };
    Ok(LatentVars { mean, std, z })
}

/// GCN encoder and reparameterisation. `noise = None` sets `ε = 0`.
pub fn vgae_encode(
    tape: &Tape,
    b: &Bound,
    pattern: &Arc<SparsePattern>,
    adj: Var,
    x_user: Var,
    x_item: Var,
    mut noise: Option<&mut RngStream>,
) -> Result<TapeLatent> {
    let (mut hu, mut hv) = (x_user, x_item);
    for w in [W1, W2] {
        let (au, av) = crate::encoder::propagate_layer(tape, pattern, adj, hu, hv)?;
        hu = tape.tanh(tape.matmul(au, b.var(w))?)?;
        hv = tape.tanh(tape.matmul(av, b.var(w))?)?;
    }
    let user = head(tape, b, hu, noise.as_deref_mut())?;
    let item = head(tape, b, hv, noise)?;
    Ok(TapeLatent { user, item })
}

/// `−½ Σ_d (1 + 2 ln σ − μ² − σ²)` summed over all nodes of all parts and
/// divided by the node count.
pub fn kl_loss(tape: &Tape, parts: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut nodes = 0;
    for &(mean, std) in parts {
        nodes += tape.shape(mean)[0];
        let two_log = tape.scale(tape.log(std)?, 2.0)?;
        let inner = tape.sub(tape.add_scalar(two_log, 1.0)?, tape.add(tape.square(mean)?, tape.square(std)?)?)?;
        let s = tape.scale(tape.sum(inner)?, -0.5)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) if nodes > 0 => tape.scale(t, 1.0 / nodes as f64),
        _ => contract("kl_loss needs at least one node"),
    }
}

/// Decoder logits `f(z_u ⊙ z_i)` for the listed pairs.
pub fn pair_logits(tape: &Tape, b: &Bound, z_user: Var, z_item: Var, users: Arc<Vec<usize>>, items: Arc<Vec<usize>>) -> Result<Var> {
    let prod = tape.mul(tape.gather_rows(z_user, users)?, tape.gather_rows(z_item, items)?)?;
    tape.add_row(tape.matmul(prod, b.var(W_F))?, b.var(B_F))
}

/// Binary cross-entropy: mean over positives of `−ln σ(f)` plus mean over
/// negatives of `−ln(1 − σ(f))`.
pub fn discriminative_loss(tape: &Tape, b: &Bound, z_user: Var, z_item: Var, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<Var> {
    if pos.is_empty() || neg.is_empty() {
        return contract("discriminative_loss needs positive and negative pairs");
    }
    let split = |xs: &[(usize, usize)]| {
        (
            Arc::new(xs.iter().map(|p| p.0).collect::<Vec<_>>()),
            Arc::new(xs.iter().map(|p| p.1).collect::<Vec<_>>()),
        )
    };
    let (pu, pi) = split(pos);
    let (nu, ni) = split(neg);
    let lp = pair_logits(tape, b, z_user, z_item, pu, pi)?;
    let ln = pair_logits(tape, b, z_user, z_item, nu, ni)?;
    let l_pos = tape.mean(tape.softplus(tape.neg(lp)?)?)?;
    let l_neg = tape.mean(tape.softplus(ln)?)?;
    tape.add(l_pos, l_neg)
}

/// Soft view values `Ã_e · σ(f(z_u ⊙ z_i))` for every edge, as an `nnz × 1`
/// column in pattern order.
pub fn view_values(tape: &Tape, b: &Bound, latent: &TapeLatent, pattern: &Arc<SparsePattern>, adj: Var) -> Result<Var> {
    let users = Arc::new(pattern.edge_rows().to_vec());
    let items = Arc::new(pattern.indices().to_vec());
    let logits = pair_logits(tape, b, latent.user.z, latent.item.z, users, items)?;
    tape.mul(adj, tape.sigmoid(logits)?)
}

/// `L_gen = L_kl + L_dis + L_bpr + λ·‖Θ‖²`.
pub fn gen_loss(tape: &Tape, kl: Var, dis: Var, bpr: Var, reg: Var, lambda: f64) -> Result<Var> {
    let s = tape.add(tape.add(kl, dis)?, bpr)?;
    tape.add(s, tape.scale(reg, lambda)?)
}

/// Samples a latent from the current parameters and returns the soft view.
pub fn generate_view(vgae: &Vgae, adj: &NormalizedAdjacency, x: &EmbeddingState, rng: Option<&mut RngStream>) -> Result<CsrMatrix> {
    let tape = Tape::new();
    let b = vgae.params.bind(&tape, false);
    let a = tape.constant(Tensor::column(adj.values().to_vec()));
    let xu = tape.constant(x.user.clone());
    let xv = tape.constant(x.item.clone());
    let lat = vgae_encode(&tape, &b, adj.pattern(), a, xu, xv, rng)?;
    let vals = view_values(&tape, &b, &lat, adj.pattern(), a)?;
    let out = tape.value(vals).data().to_vec();
    adj.matrix().with_values(out)
}
