//! Relation-aware edge denoiser (second view generator).
//!
//! For an edge `(i, j)` at layer `l`, with embeddings from layer `l−1`:
//!
//! ```text
//! g       = σ(W_g [e_i; e_j] + b)
//! G(i, j) = g ⊙ tanh(W_embed [e_i; a_i]) + (1 − g) ⊙ e_i
//! s       = f_att(G(i, j) ⊕ G(j, i) ⊕ [e_i; e_j])
//! ```
//!
//! where `a_i` is the mean of `i`'s one-hop neighbours. The score drives a
//! hard-sigmoid-rectified concrete mask `m = hard_sigmoid((s + logit u)/θ)`
//! (training) or `hard_sigmoid(s/θ)` (evaluation), and layer `l` propagates
//! over `Ã ⊙ m`.
//!
//! The bracketed products are evaluated per node by splitting each weight
//! into its two halves, so the per-edge work is only gathers, the gate and
//! `f_att`.

use std::sync::Arc;

use crate::encoder::{propagate_layer, EmbeddingState, TapePropagation};
use crate::error::{contract, Result};
use crate::graph::{apply_edge_mask, MaskedAdjacency, NormalizedAdjacency};
use crate::numerics::{sigmoid, softplus, Bound, Params, RngStream, SparsePattern, Tape, Tensor, Var};

/// How a layer turns embeddings into an edge score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    /// Gated composition followed by the two-layer attention perceptron.
    Relational,
    /// `s = ⟨w ⊙ e_i, e_j⟩ + b`.
    Linear,
}

// relational slots per layer
const WG_A: usize = 0;
const WG_B: usize = 1;
const B_G: usize = 2;
const WE_A: usize = 3;
const WE_B: usize = 4;
const ATT_W1: usize = 5;
const ATT_B1: usize = 6;
const ATT_W2: usize = 7;
const ATT_B2: usize = 8;
const REL_THETA: usize = 9;
const REL_SLOTS: usize = 10;
// linear slots per layer
const LIN_W: usize = 0;
const LIN_B: usize = 1;
const LIN_THETA: usize = 2;
const LIN_SLOTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    kind: ScorerKind,
    layers: usize,
    dim: usize,
    params: Params,
}

impl Denoiser {
    pub fn new(kind: ScorerKind, layers: usize, dim: usize, att_hidden: usize, rng: &mut RngStream) -> Self {
        let mut p = Params::new();
        for l in 0..layers {
            match kind {
                ScorerKind::Relational => {
                    p.add(format!("l{l}.gate_a"), Tensor::glorot(dim, dim, rng));
                    p.add(format!("l{l}.gate_b"), Tensor::glorot(dim, dim, rng));
                    p.add(format!("l{l}.gate_bias"), Tensor::zeros(1, dim));
                    p.add(format!("l{l}.embed_a"), Tensor::glorot(dim, dim, rng));
                    p.add(format!("l{l}.embed_b"), Tensor::glorot(dim, dim, rng));
                    p.add(format!("l{l}.att_w1"), Tensor::glorot(4 * dim, att_hidden, rng));
                    p.add(format!("l{l}.att_b1"), Tensor::zeros(1, att_hidden));
                    p.add(format!("l{l}.att_w2"), Tensor::glorot(att_hidden, 1, rng));
                    // hard_sigmoid(3) = 1: start from the unmasked graph
                    p.add(format!("l{l}.att_b2"), Tensor::scalar(3.0));
                    p.add(format!("l{l}.log_theta"), Tensor::scalar(0.0));
                }
                ScorerKind::Linear => {
                    p.add(format!("l{l}.lin_w"), Tensor::glorot(dim, 1, rng));
                    p.add(format!("l{l}.lin_b"), Tensor::scalar(3.0));
                    p.add(format!("l{l}.log_theta"), Tensor::scalar(0.0));
                }
            }
        }
        Self {
            kind,
            layers,
            dim,
            params: p,
        }
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn slot(&self, layer: usize, s: usize) -> usize {
        match self.kind {
            ScorerKind::Relational => layer * REL_SLOTS + s,
            ScorerKind::Linear => layer * LIN_SLOTS + s,
        }
    }

    fn theta_slot(&self, layer: usize) -> usize {
        match self.kind {
            ScorerKind::Relational => self.slot(layer, REL_THETA),
            ScorerKind::Linear => self.slot(layer, LIN_THETA),
        }
    }

    /// Concrete temperature `θ^l`.
    pub fn theta(&self, layer: usize) -> f64 {
        self.params.get(self.theta_slot(layer)).data()[0].exp()
    }

    pub fn set_theta(&mut self, layer: usize, theta: f64) {
        let s = self.theta_slot(layer);
        *self.params.get_mut(s) = Tensor::scalar(theta.ln());
    }

    fn t(&self, layer: usize, s: usize) -> &Tensor {
        self.params.get(self.slot(layer, s))
    }

    /// `σ(W_g [e_i; e_j] + b)` evaluated directly.
    pub fn gate(&self, layer: usize, e_i: &[f64], e_j: &[f64]) -> Vec<f64> {
        let a = vec_mat(e_i, self.t(layer, WG_A));
        let b = vec_mat(e_j, self.t(layer, WG_B));
        let bias = self.t(layer, B_G).data();
        (0..self.dim).map(|k| sigmoid(a[k] + b[k] + bias[k])).collect()
    }

    /// `G(e_i, e_j) = g ⊙ tanh(W_embed [e_i; a_i]) + (1 − g) ⊙ e_i`.
    pub fn adaptive_compose(&self, layer: usize, e_i: &[f64], e_j: &[f64], a_i: &[f64]) -> Vec<f64> {
        let g = self.gate(layer, e_i, e_j);
        compose_with_gate(&g, &self.relational_branch(layer, e_i, a_i), e_i)
    }

    fn relational_branch(&self, layer: usize, e_i: &[f64], a_i: &[f64]) -> Vec<f64> {
        let a = vec_mat(e_i, self.t(layer, WE_A));
        let b = vec_mat(a_i, self.t(layer, WE_B));
        a.iter().zip(&b).map(|(x, y)| (x + y).tanh()).collect()
    }

    /// Edge score `s^l_{i,j}` evaluated directly, one edge at a time.
    pub fn edge_score(&self, layer: usize, e_i: &[f64], e_j: &[f64], a_i: &[f64], a_j: &[f64]) -> f64 {
        match self.kind {
            ScorerKind::Linear => {
                let w = self.t(layer, LIN_W).data();
                (0..self.dim).map(|k| w[k] * e_i[k] * e_j[k]).sum::<f64>() + self.t(layer, LIN_B).data()[0]
            }
            ScorerKind::Relational => {
                let gij = self.adaptive_compose(layer, e_i, e_j, a_i);
                let gji = self.adaptive_compose(layer, e_j, e_i, a_j);
                let input: Vec<f64> = [gij.as_slice(), &gji, e_i, e_j].concat();
                let h: Vec<f64> = vec_mat(&input, self.t(layer, ATT_W1))
                    .iter()
                    .zip(self.t(layer, ATT_B1).data())
                    .map(|(x, b)| (x + b).tanh())
                    .collect();
                vec_mat(&h, self.t(layer, ATT_W2))[0] + self.t(layer, ATT_B2).data()[0]
            }
        }
    }
}

fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (p, &x) in v.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += x * wv;
        }
    }
    out
}

/// `g ⊙ branch + (1 − g) ⊙ e`.
pub fn compose_with_gate(g: &[f64], branch: &[f64], e: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(branch)
        .zip(e)
        .map(|((g, b), e)| g * b + (1.0 - g) * e)
        .collect()
}

/// `clip(0.2x + 0.5, 0, 1)`.
pub fn hard_sigmoid(x: f64) -> f64 {
    (0.2 * x + 0.5).clamp(0.0, 1.0)
}

/// One mask value: with `rng`, `hard_sigmoid((s + logit u)/θ)` for
/// `u ~ U(0,1)`; without, `hard_sigmoid(s/θ)`.
pub fn concrete_sample(s: f64, theta: f64, rng: Option<&mut RngStream>) -> f64 {
    match rng {
        Some(r) => {
            let u = r.uniform_open();
            hard_sigmoid((s + (u / (1.0 - u)).ln()) / theta)
        }
        None => hard_sigmoid(s / theta),
    }
}

/// Expected training-mode mask, `(0.2/θ)[softplus(s + 2.5θ) − softplus(s − 2.5θ)]`.
pub fn retention_prob(s: f64, theta: f64) -> f64 {
    (0.2 / theta) * (softplus(s + 2.5 * theta) - softplus(s - 2.5 * theta))
}

/// Tape form of [`concrete_sample`] for a column of scores.
pub fn concrete_mask(tape: &Tape, s: Var, log_theta: Var, rng: Option<&mut RngStream>) -> Result<Var> {
    let x = match rng {
        Some(r) => {
            let n = tape.shape(s)[0];
            let noise = (0..n)
                .map(|_| {
                    let u = r.uniform_open();
                    (u / (1.0 - u)).ln()
                })
                .collect();
            tape.add(s, tape.constant(Tensor::column(noise)))?
        }
        None => s,
    };
    let inv = tape.exp(tape.neg(log_theta)?)?;
    let scaled = tape.mul_scalar(x, inv)?;
    tape.clamp(tape.add_scalar(tape.scale(scaled, 0.2)?, 0.5)?, 0.0, 1.0)
}

/// Tape form of [`retention_prob`].
pub fn retention_probs(tape: &Tape, s: Var, log_theta: Var) -> Result<Var> {
    let theta = tape.exp(log_theta)?;
    let n = tape.shape(s)[0];
    let shift = tape.mul_scalar(tape.constant(Tensor::full(n, 1, 2.5)), theta)?;
    let hi = tape.softplus(tape.add(s, shift)?)?;
    let lo = tape.softplus(tape.sub(s, shift)?)?;
    let coef = tape.scale(tape.exp(tape.neg(log_theta)?)?, 0.2)?;
    tape.mul_scalar(tape.sub(hi, lo)?, coef)
}

/// `L_c = Σ_l Σ_e (1 − p^l_e)`.
pub fn concrete_loss(tape: &Tape, probs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in probs {
        let s = tape.sum(tape.add_scalar(tape.neg(p)?, 1.0)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.map_or_else(|| contract("concrete_loss needs at least one layer"), Ok)
}

/// `L_den = L_c + L_bpr + λ·‖Θ‖²`.
pub fn den_loss(tape: &Tape, concrete: Var, bpr: Var, reg: Var, lambda: f64) -> Result<Var> {
    tape.add(tape.add(concrete, bpr)?, tape.scale(reg, lambda)?)
}

/// Constant tape inputs shared by every layer of the denoised propagation.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub pattern: Arc<SparsePattern>,
    /// `Ã` values as an `nnz × 1` column.
    pub adj: Var,
    /// `1/deg_u` per edge, averaging items into users.
    pub user_mean: Var,
    /// `1/deg_i` per edge, averaging users into items.
    pub item_mean: Var,
    pub edge_users: Arc<Vec<usize>>,
    pub edge_items: Arc<Vec<usize>>,
}

impl GraphInputs {
    pub fn new(tape: &Tape, adj: &NormalizedAdjacency) -> Self {
        let (um, im) = adj.mean_weights();
        Self {
            pattern: Arc::clone(adj.pattern()),
            adj: tape.constant(Tensor::column(adj.values().to_vec())),
            user_mean: tape.constant(Tensor::column(um)),
            item_mean: tape.constant(Tensor::column(im)),
            edge_users: Arc::new(adj.edge_users().to_vec()),
            edge_items: Arc::new(adj.edge_items().to_vec()),
        }
    }
}

/// Scores of every edge at `layer` from user/item embeddings `eu`, `ev`.
pub fn layer_scores(tape: &Tape, b: &Bound, den: &Denoiser, layer: usize, g: &GraphInputs, eu: Var, ev: Var) -> Result<Var> {
    let v = |s| b.var(den.slot(layer, s));
    let ru = tape.gather_rows(eu, Arc::clone(&g.edge_users))?;
    let rv = tape.gather_rows(ev, Arc::clone(&g.edge_items))?;
    if den.kind == ScorerKind::Linear {
        let prod = tape.mul(ru, rv)?;
        return tape.add_row(tape.matmul(prod, v(LIN_W))?, v(LIN_B));
    }
    let au = tape.spmm(&g.pattern, g.user_mean, ev, false)?;
    let av = tape.spmm(&g.pattern, g.item_mean, eu, true)?;
    // per-node halves of W_g and W_embed
    let (ga_u, gb_u) = (tape.matmul(eu, v(WG_A))?, tape.matmul(eu, v(WG_B))?);
    let (ga_v, gb_v) = (tape.matmul(ev, v(WG_A))?, tape.matmul(ev, v(WG_B))?);
    let qu = tape.tanh(tape.add(tape.matmul(eu, v(WE_A))?, tape.matmul(au, v(WE_B))?)?)?;
    let qv = tape.tanh(tape.add(tape.matmul(ev, v(WE_A))?, tape.matmul(av, v(WE_B))?)?)?;
    let gather_u = |x| tape.gather_rows(x, Arc::clone(&g.edge_users));
    let gather_v = |x| tape.gather_rows(x, Arc::clone(&g.edge_items));
    let gate_uv = tape.sigmoid(tape.add_row(tape.add(gather_u(ga_u)?, gather_v(gb_v)?)?, v(B_G))?)?;
    let gate_vu = tape.sigmoid(tape.add_row(tape.add(gather_v(ga_v)?, gather_u(gb_u)?)?, v(B_G))?)?;
    // g ⊙ q + (1 − g) ⊙ e  =  e + g ⊙ (q − e)
    let g_uv = tape.add(ru, tape.mul(gate_uv, tape.sub(gather_u(qu)?, ru)?)?)?;
    let g_vu = tape.add(rv, tape.mul(gate_vu, tape.sub(gather_v(qv)?, rv)?)?)?;
    let input = tape.concat_cols(&[g_uv, g_vu, ru, rv])?;
    let h = tape.tanh(tape.add_row(tape.matmul(input, v(ATT_W1))?, v(ATT_B1))?)?;
    tape.add_row(tape.matmul(h, v(ATT_W2))?, v(ATT_B2))
}

/// Result of propagating over the layer-wise masked view on a tape.
#[derive(Clone, Debug)]
pub struct DenoisedTape {
    pub scores: Vec<Var>,
    pub masks: Vec<Var>,
    pub probs: Vec<Var>,
    /// `Ã ⊙ m^l` per layer.
    pub layer_values: Vec<Var>,
    pub propagation: TapePropagation,
}

/// Builds the masked view layer by layer: scores at layer `l` come from the
/// view's own layer `l−1` embeddings.
pub fn denoised_propagation(
    tape: &Tape,
    b: &Bound,
    den: &Denoiser,
    g: &GraphInputs,
    eu0: Var,
    ev0: Var,
    mut rng: Option<&mut RngStream>,
) -> Result<DenoisedTape> {
    let mut out = DenoisedTape {
        scores: Vec::new(),
        masks: Vec::new(),
        probs: Vec::new(),
        layer_values: Vec::new(),
        propagation: TapePropagation {
            user_layers: vec![eu0],
            item_layers: vec![ev0],
            user: eu0,
            item: ev0,
        },
    };
    for l in 0..den.layers {
        let p = &mut out.propagation;
        let (eu, ev) = (*p.user_layers.last().unwrap(), *p.item_layers.last().unwrap());
        let s = layer_scores(tape, b, den, l, g, eu, ev)?;
        let log_theta = b.var(den.theta_slot(l));
        let m = concrete_mask(tape, s, log_theta, rng.as_deref_mut())?;
        let prob = retention_probs(tape, s, log_theta)?;
        let vals = tape.mul(g.adj, m)?;
        let (nu, nv) = propagate_layer(tape, &g.pattern, vals, eu, ev)?;
        p.user = tape.add(p.user, nu)?;
        p.item = tape.add(p.item, nv)?;
        p.user_layers.push(nu);
        p.item_layers.push(nv);
        out.scores.push(s);
        out.masks.push(m);
        out.probs.push(prob);
        out.layer_values.push(vals);
    }
    Ok(out)
}

/// Per-layer masked adjacencies `A^l = Ã ⊙ M^l` for the given embeddings.
pub fn generate_denoised_view(den: &Denoiser, adj: &NormalizedAdjacency, x: &EmbeddingState, rng: Option<&mut RngStream>) -> Result<Vec<MaskedAdjacency>> {
    let tape = Tape::new();
    let b = den.params.bind(&tape, false);
    let g = GraphInputs::new(&tape, adj);
    let eu = tape.constant(x.user.clone());
    let ev = tape.constant(x.item.clone());
    let d = denoised_propagation(&tape, &b, den, &g, eu, ev, rng)?;
    d.masks
        .iter()
        .enumerate()
        .map(|(l, &m)| apply_edge_mask(adj, l + 1, tape.value(m).data()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gate_weights_give_half() {
        let mut rng = RngStream::new(1);
        let mut den = Denoiser::new(ScorerKind::Relational, 1, 3, 4, &mut rng);
        for s in [WG_A, WG_B, B_G] {
            let k = den.slot(0, s);
            let shape = den.params.get(k).shape();
            *den.params_mut().get_mut(k) = Tensor::zeros(shape[0], shape[1]);
        }
        assert_eq!(den.gate(0, &[1.0, -2.0, 0.3], &[0.5, 0.5, 0.5]), vec![0.5; 3]);
    }

    #[test]
    fn compose_limits() {
        let e = [0.3, -0.7];
        let br = [0.9, 0.1];
        assert_eq!(compose_with_gate(&[0.0, 0.0], &br, &e), e.to_vec());
        assert_eq!(compose_with_gate(&[1.0, 1.0], &br, &e), br.to_vec());
        assert_eq!(compose_with_gate(&[0.5, 0.5], &e, &e), e.to_vec());
    }

    #[test]
    fn concrete_limits() {
        let mut rng = RngStream::new(3);
        assert_eq!(concrete_sample(1e9, 1.0, Some(&mut rng)), 1.0);
        assert_eq!(concrete_sample(-1e9, 1.0, Some(&mut rng)), 0.0);
        assert_eq!(concrete_sample(0.0, 1.0, None), 0.5);
    }

    #[test]
    fn concrete_loss_counts_drops() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::ones(10, 1));
        let zeros = tape.constant(Tensor::zeros(10, 1));
        assert_eq!(tape.item(concrete_loss(&tape, &[ones, ones]).unwrap()).unwrap(), 0.0);
        assert_eq!(tape.item(concrete_loss(&tape, &[zeros, zeros]).unwrap()).unwrap(), 20.0);
    }
}
