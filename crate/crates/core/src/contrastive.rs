//! Contrastive objectives: InfoNCE between views, the diffusion-enhanced
//! composite, the asymmetric contrastive loss and the information-bottleneck
//! loss built from it.

use std::sync::Arc;

use crate::encoder::EmbeddingState;
use crate::error::{contract, Result};
use crate::numerics::{Bound, Params, RngStream, Tape, Tensor, Var};

pub const NORM_FLOOR: f64 = 1e-12;

/// `mean_i −ln[exp(cos(a_i, b_i)/τ) / Σ_j exp(cos(a_i, b_j)/τ)]`, negatives
/// being every row of `b` (the positive included).
pub fn infonce_loss(tape: &Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return contract("temperature must be positive");
    }
    if tape.shape(a)[0] == 0 || tape.shape(a) != tape.shape(b) {
        return contract(format!(
            "infonce needs equal nonempty views, got {:?} and {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    let na = tape.normalize_rows(a, NORM_FLOOR)?;
    let nb = tape.normalize_rows(b, NORM_FLOOR)?;
    let sim = tape.scale(tape.matmul_nt(na, nb)?, 1.0 / tau)?;
    let pos = tape.scale(tape.row_dot(na, nb)?, 1.0 / tau)?;
    let lse = tape.logsumexp_rows(sim, None)?;
    tape.mean(tape.sub(lse, pos)?)
}

/// Batch rows of one view: user and item embeddings of the same nodes
/// across views.
#[derive(Clone, Copy, Debug)]
pub struct ViewRows {
    pub user: Var,
    pub item: Var,
}

/// InfoNCE summed over the user and item sides.
pub fn two_sided_infonce(tape: &Tape, a: ViewRows, b: ViewRows, tau: f64) -> Result<Var> {
    tape.add(infonce_loss(tape, a.user, b.user, tau)?, infonce_loss(tape, a.item, b.item, tau)?)
}

/// Components of the diffusion-enhanced contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct DiffSsl {
    pub ssl: Var,
    pub intra: Option<Var>,
    pub inter: Option<Var>,
    pub total: Var,
}

/// `L_ssl + λ1·L_intra + λ2·L_inter`. Without denoised views only `L_ssl`
/// is formed.
pub fn diff_ssl_loss(
    tape: &Tape,
    v1: ViewRows,
    v2: ViewRows,
    denoised: Option<(ViewRows, ViewRows)>,
    lambda1: f64,
    lambda2: f64,
    tau: f64,
) -> Result<DiffSsl> {
    let ssl = two_sided_infonce(tape, v1, v2, tau)?;
    let Some((d1, d2)) = denoised else {
        return Ok(DiffSsl {
            ssl,
            intra: None,
            inter: None,
            total: ssl,
        });
    };
    let intra = tape.scale(
        tape.add(two_sided_infonce(tape, v1, d1, tau)?, two_sided_infonce(tape, v2, d2, tau)?)?,
        0.5,
    )?;
    let inter = two_sided_infonce(tape, d1, d2, tau)?;
    let total = tape.add(ssl, tape.add(tape.scale(intra, lambda1)?, tape.scale(inter, lambda2)?)?)?;
    Ok(DiffSsl {
        ssl,
        intra: Some(intra),
        inter: Some(inter),
        total,
    })
}

/// Two-layer perceptron `g_φ: R^d → R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AclPredictor {
    params: Params,
}

impl AclPredictor {
    pub fn new(dim: usize, rng: &mut RngStream) -> Self {
        let mut p = Params::new();
        p.add("w1", Tensor::glorot(dim, dim, rng));
        p.add("b1", Tensor::zeros(1, dim));
        p.add("w2", Tensor::glorot(dim, dim, rng));
        p.add("b2", Tensor::zeros(1, dim));
        Self { params: p }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
}

pub fn predict(tape: &Tape, b: &Bound, x: Var) -> Result<Var> {
    let h = tape.tanh(tape.add_row(tape.matmul(x, b.var(0))?, b.var(1))?)?;
    tape.add_row(tape.matmul(h, b.var(2))?, b.var(3))
}

/// Anchors and their neighbourhoods for one ACL evaluation.
#[derive(Clone, Debug)]
pub struct AclBatch {
    /// Identity representation `v` per anchor, `a × d`.
    pub identity: Var,
    /// Predictor output `p = g_φ(v)` per anchor, `a × d`.
    pub predicted: Var,
    /// Context table `u`, indexed by `neighbors`.
    pub context: Var,
    /// Neighbour rows of `context` for each anchor.
    pub neighbors: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AclOutput {
    pub loss: Var,
    /// Anchors without neighbours, left out of the average.
    pub skipped: usize,
}

/// `−(1/|V|) Σ_v (1/|N(v)|) Σ_{u∈N(v)} ln[e^{pᵀu/τ} / (e^{pᵀu/τ} + Σ_{v⁻} e^{vᵀv⁻/τ})]`
/// with the other anchors of the batch as `v⁻`. Each term is evaluated as
/// `softplus(lse_neg − pᵀu/τ)`.
pub fn acl_loss(tape: &Tape, batch: &AclBatch, tau: f64) -> Result<AclOutput> {
    if tau <= 0.0 {
        return contract("temperature must be positive");
    }
    let a = tape.shape(batch.identity)[0];
    if batch.neighbors.len() != a || tape.shape(batch.predicted)[0] != a {
        return contract("acl_loss: anchors, predictions and neighbour lists disagree");
    }
    let active: Vec<usize> = (0..a).filter(|&k| !batch.neighbors[k].is_empty()).collect();
    let skipped = a - active.len();
    if active.is_empty() {
        return contract("acl_loss: every anchor is isolated");
    }
    let n_active = active.len();
    let mut pair_anchor = Vec::new();
    let mut pair_ctx = Vec::new();
    let mut weight = Vec::new();
    for (slot, &k) in active.iter().enumerate() {
        let nb = &batch.neighbors[k];
        for &u in nb {
            pair_anchor.push(slot);
            pair_ctx.push(u);
            weight.push(1.0 / (nb.len() as f64 * n_active as f64));
        }
    }
    let active = Arc::new(active);
    let ident = tape.gather_rows(batch.identity, Arc::clone(&active))?;
    let pred = tape.gather_rows(batch.predicted, active)?;
    let pair_anchor = Arc::new(pair_anchor);
    let p = tape.gather_rows(pred, Arc::clone(&pair_anchor))?;
    let u = tape.gather_rows(batch.context, Arc::new(pair_ctx))?;
    let pos = tape.scale(tape.row_dot(p, u)?, 1.0 / tau)?;
    let terms = if n_active > 1 {
        let sim = tape.scale(tape.matmul_nt(ident, ident)?, 1.0 / tau)?;
        let mask: Vec<bool> = (0..n_active * n_active)
            .map(|k| k / n_active != k % n_active)
            .collect();
        let lse = tape.logsumexp_rows(sim, Some(Arc::new(mask)))?;
        let lse_pairs = tape.gather_rows(lse, pair_anchor)?;
        tape.softplus(tape.sub(lse_pairs, pos)?)?
    } else {
        // empty negative sum: ln(e^a / e^a) = 0
        tape.scale(pos, 0.0)?
    };
    let loss = tape.sum(tape.mul(terms, tape.constant(Tensor::column(weight)))?)?;
    Ok(AclOutput { loss, skipped })
}

/// `L_IB = L_A(G-view) + λ_ratio · L_A(D-view)`.
pub fn ib_loss(tape: &Tape, gen_side: &AclBatch, den_side: &AclBatch, lambda_ratio: f64, tau: f64) -> Result<Var> {
    let g = acl_loss(tape, gen_side, tau)?.loss;
    if lambda_ratio == 0.0 {
        return Ok(g);
    }
    let d = acl_loss(tape, den_side, tau)?.loss;
    tape.add(g, tape.scale(d, lambda_ratio)?)
}

/// EMA copy `y*` of the embedding tables, refreshed at epoch boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalState {
    decay: f64,
    state: EmbeddingState,
}

impl HistoricalState {
    pub fn new(current: &EmbeddingState, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return contract(format!("EMA decay {decay} outside [0, 1)"));
        }
        Ok(Self {
            decay,
            state: current.clone(),
        })
    }

    pub fn state(&self) -> &EmbeddingState {
        &self.state
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `y* ← decay·y* + (1 − decay)·current`.
    pub fn update(&mut self, current: &EmbeddingState) -> Result<()> {
        let d = self.decay;
        self.state.user = self.state.user.zip_map(&current.user, |y, c| d * y + (1.0 - d) * c)?;
        self.state.item = self.state.item.zip_map(&current.item, |y, c| d * y + (1.0 - d) * c)?;
        Ok(())
    }
}
