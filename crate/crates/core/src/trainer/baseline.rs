//! Plain BPR matrix factorisation with the same step budget as the full
//! model; no propagation, no views.

use serde_json::json;

use super::{Adam, TrainConfig, KS};
use crate::dataset::{InteractionDataset, Split};
use crate::encoder::{bpr_loss, sample_bpr_triples, EmbeddingState, TrainIndex};
use crate::error::Result;
use crate::eval::{all_ranking_evaluate, MetricReport};
use crate::numerics::{Params, RngStream, Tape};

pub struct BaselineOutcome {
    pub embeddings: EmbeddingState,
    pub best_epoch: Option<usize>,
    pub best_valid: MetricReport,
    pub log: Vec<String>,
}

impl BaselineOutcome {
    pub fn evaluate(&self, ds: &InteractionDataset, split: Split) -> Result<MetricReport> {
        Ok(all_ranking_evaluate(&self.embeddings.user, &self.embeddings.item, ds, split, &KS)?.0)
    }
}

/// `cfg.epochs × cfg.phase1_steps` Adam steps on the mean BPR loss plus
/// `λ4·‖Θ‖²`, keeping the best validation Recall@20.
pub fn train_bpr_mf(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let index = TrainIndex::new(ds);
    let root = RngStream::new(cfg.seed).derive(&[0xba5e]);
    let e0 = EmbeddingState::init(ds.n_users(), ds.n_items(), cfg.dim, &mut root.derive(&[0]));
    let mut params = Params::new();
    params.add("user", e0.user.clone());
    params.add("item", e0.item.clone());
    let mut opt = Adam::new(cfg.lr);
    let mut best: Option<(usize, MetricReport, EmbeddingState)> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..cfg.phase1_steps {
            let mut rng = root.derive(&[1, epoch as u64, step as u64]);
            let tape = Tape::new();
            let b = params.bind(&tape, true);
            let triples = sample_bpr_triples(&index, cfg.batch_size, &mut rng)?;
            let mut loss = bpr_loss(&tape, b.var(0), b.var(1), &triples)?;
            if cfg.lambda4 > 0.0 {
                loss = tape.add(loss, tape.scale(b.l2(&tape)?, cfg.lambda4)?)?;
            }
            total += tape.item(loss)?;
            let mut grads = tape.backward(loss)?;
            let g = b.grads(&mut grads, &params);
            opt.step(&mut params, &g)?;
        }
        let state = EmbeddingState {
            user: params.get(0).clone(),
            item: params.get(1).clone(),
        };
        let valid = all_ranking_evaluate(&state.user, &state.item, ds, Split::Valid, &KS)?.0;
        log.push(serde_json::to_string(&json!({
            "epoch": epoch,
            "variant": "bpr-mf",
            "loss": total / cfg.phase1_steps.max(1) as f64,
            "valid": { "users": valid.users, "metrics": valid.metrics },
        }))?);
        if best.as_ref().is_none_or(|b| valid.recall(20) > b.1.recall(20)) {
            best = Some((epoch, valid, state));
        }
    }
    Ok(match best {
        Some((epoch, valid, embeddings)) => BaselineOutcome {
            embeddings,
            best_epoch: Some(epoch),
            best_valid: valid,
            log,
        },
        None => BaselineOutcome {
            embeddings: e0,
            best_epoch: None,
            best_valid: MetricReport::default(),
            log,
        },
    })
}
