use super::{InteractionDataset, Split};
use crate::error::{contract, Result};
use crate::numerics::RngStream;

/// Per-user stratified random split.
///
/// Users with fewer than three interactions keep everything in train. For
/// the rest, `round(f_valid·n)` and `round(f_test·n)` edges go to valid and
/// test (shrunk if needed so at least one edge stays in train).
pub fn split_dataset(ds: &InteractionDataset, fractions: [f64; 3], seed: u64) -> Result<InteractionDataset> {
    if ds.is_empty() {
        return contract("cannot split an empty dataset");
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return contract(format!("split fractions {fractions:?} must be nonnegative and sum to 1"));
    }
    let root = RngStream::new(seed);
    let mut tags = vec![Split::Train; ds.len()];
    let edges = ds.edges();
    let mut start = 0;
    while start < edges.len() {
        let user = edges[start].user;
        let end = start + edges[start..].iter().take_while(|e| e.user == user).count();
        let n = end - start;
        if n >= 3 {
            let mut n_valid = (fractions[1] * n as f64).round() as usize;
            let mut n_test = (fractions[2] * n as f64).round() as usize;
            while n_valid + n_test >= n {
                if n_test > 0 {
                    n_test -= 1;
                } else {
                    n_valid -= 1;
                }
            }
            let mut slots: Vec<usize> = (start..end).collect();
            root.derive(&[user as u64]).shuffle(&mut slots);
            for &k in &slots[..n_test] {
                tags[k] = Split::Test;
            }
            for &k in &slots[n_test..n_test + n_valid] {
                tags[k] = Split::Valid;
            }
        }
        start = end;
    }
    ds.with_splits(&tags)
}
