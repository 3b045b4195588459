use std::collections::HashSet;

use super::{Interaction, InteractionDataset, Split};
use crate::error::{contract, Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// Replaces `⌊ratio·|train|⌋` uniformly chosen train edges with uniformly
/// sampled `(user, item)` pairs absent from the original graph. Valid and
/// test edges are untouched and the train count is preserved.
pub fn inject_noise(ds: &InteractionDataset, spec: NoiseSpec) -> Result<InteractionDataset> {
    if !(0.0..=0.5).contains(&spec.ratio) {
        return contract(format!("noise ratio {} outside [0, 0.5]", spec.ratio));
    }
    if spec.ratio == 0.0 {
        return Ok(ds.clone());
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&k| ds.edges()[k].split == Split::Train).collect();
    let count = (spec.ratio * train.len() as f64).floor() as usize;
    if count == 0 {
        return contract(format!(
            "noise ratio {} replaces no edge out of {} train edges",
            spec.ratio,
            train.len()
        ));
    }
    let mut rng = RngStream::new(spec.seed);
    let mut chosen = train;
    rng.shuffle(&mut chosen);
    let removed: HashSet<usize> = chosen[..count].iter().copied().collect();

    let mut occupied: HashSet<(usize, usize)> = ds.edges().iter().map(|e| (e.user, e.item)).collect();
    let mut added = Vec::with_capacity(count);
    let budget = 100 * count + 1000;
    let mut attempts = 0;
    while added.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Sampling(format!(
                "graph too dense: placed {} of {count} replacement edges",
                added.len()
            )));
        }
        let u = rng.below(ds.n_users());
        let i = rng.below(ds.n_items());
        if occupied.insert((u, i)) {
            added.push(Interaction {
                user: u,
                item: i,
                weight: 1.0,
                split: Split::Train,
            });
        }
    }
    let edges = ds
        .edges()
        .iter()
        .enumerate()
        .filter(|(k, _)| !removed.contains(k))
        .map(|(_, e)| *e)
        .chain(added)
        .collect();
    InteractionDataset::new(ds.user_ids().to_vec(), ds.item_ids().to_vec(), edges)
}
