//! Tape gradients of every primitive op against central differences.

mod common;

use std::sync::Arc;

use common::{grad_error, randn, uniform};
use proptest::prelude::*;
use radar::numerics::{RngStream, SparsePattern, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

/// Values at least 0.1 away from zero, for ops with a kink there.
fn off_kink(rows: usize, cols: usize, seed: u64) -> Tensor {
    randn(rows, cols, 1.0, seed).map(|x| x.signum() * (0.1 + x.abs()))
}

fn random_pattern(rows: usize, cols: usize, seed: u64) -> Arc<SparsePattern> {
    let mut rng = RngStream::new(seed);
    let mut pairs: Vec<(usize, usize)> = (0..rows).map(|r| (r, rng.below(cols))).collect();
    for _ in 0..rows * cols / 2 {
        pairs.push((rng.below(rows), rng.below(cols)));
    }
    pairs.sort_unstable();
    pairs.dedup();
    Arc::new(SparsePattern::from_pairs(rows, cols, &pairs).unwrap().0)
}

type Unary = fn(&Tape, Var) -> radar::Result<Var>;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smooth_unary_ops(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let ops: [(&str, Unary); 7] = [
            ("neg", |t, a| t.neg(a)),
            ("sigmoid", |t, a| t.sigmoid(a)),
            ("tanh", |t, a| t.tanh(a)),
            ("exp", |t, a| t.exp(a)),
            ("softplus", |t, a| t.softplus(a)),
            ("log_sigmoid", |t, a| t.log_sigmoid(a)),
            ("square", |t, a| t.square(a)),
        ];
        let x = randn(r, c, 1.0, seed);
        let w = randn(r, c, 1.0, seed ^ 1);
        for (name, op) in ops {
            let e = grad_error(&[x.clone(), w.clone()], |t, v| t.sum(t.mul(op(t, v[0])?, v[1])?));
            prop_assert!(e < TOL, "{name}: {e}");
        }
    }

    #[test]
    fn positive_domain_ops(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let x = uniform(r, c, 0.5, 2.0, seed);
        let w = randn(r, c, 1.0, seed ^ 2);
        let e = grad_error(&[x.clone(), w.clone()], |t, v| t.sum(t.mul(t.log(v[0])?, v[1])?));
        prop_assert!(e < TOL, "log: {e}");
        let e = grad_error(&[x, w], |t, v| t.sum(t.mul(t.sqrt(v[0])?, v[1])?));
        prop_assert!(e < TOL, "sqrt: {e}");
    }

    #[test]
    fn piecewise_ops_away_from_kinks(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let x = off_kink(r, c, seed);
        let w = randn(r, c, 1.0, seed ^ 3);
        let e = grad_error(&[x.clone(), w.clone()], |t, v| t.sum(t.mul(t.relu(v[0])?, v[1])?));
        prop_assert!(e < TOL, "relu: {e}");
        let e = grad_error(&[x.clone(), w.clone()], |t, v| t.sum(t.mul(t.leaky_relu(v[0], 0.2)?, v[1])?));
        prop_assert!(e < TOL, "leaky_relu: {e}");
        // kinks of clamp(−0.05, 0.05) are inside the excluded band
        let e = grad_error(&[x.clone(), w.clone()], |t, v| t.sum(t.mul(t.clamp(v[0], -0.05, 0.05)?, v[1])?));
        prop_assert!(e < TOL, "clamp saturated: {e}");
        let inner = x.map(|v| 0.01 * v);
        let e = grad_error(&[inner, w], |t, v| t.sum(t.mul(t.clamp(v[0], -0.5, 0.5)?, v[1])?));
        prop_assert!(e < TOL, "clamp interior: {e}");
    }

    #[test]
    fn binary_and_broadcast_ops(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let a = randn(r, c, 1.0, seed);
        let b = randn(r, c, 1.0, seed ^ 4);
        let row = randn(1, c, 1.0, seed ^ 5);
        let col = randn(r, 1, 1.0, seed ^ 6);
        let s = randn(1, 1, 1.0, seed ^ 7);
        let e = grad_error(&[a.clone(), b.clone()], |t, v| t.sum(t.square(t.sub(t.add(v[0], v[1])?, t.mul(v[0], v[1])?)?)?));
        prop_assert!(e < TOL, "add/sub/mul: {e}");
        let e = grad_error(&[a.clone(), row], |t, v| t.sum(t.square(t.add_row(v[0], v[1])?)?));
        prop_assert!(e < TOL, "add_row: {e}");
        let e = grad_error(&[a.clone(), col], |t, v| t.sum(t.square(t.mul_col(v[0], v[1])?)?));
        prop_assert!(e < TOL, "mul_col: {e}");
        let e = grad_error(&[a.clone(), s], |t, v| t.sum(t.square(t.mul_scalar(v[0], v[1])?)?));
        prop_assert!(e < TOL, "mul_scalar: {e}");
        let e = grad_error(&[a], |t, v| t.mean(t.square(t.add_scalar(t.scale(v[0], -1.5)?, 0.3)?)?));
        prop_assert!(e < TOL, "scale/add_scalar/mean: {e}");
    }

    #[test]
    fn matrix_ops(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let a = randn(n, k, 1.0, seed);
        let b = randn(k, m, 1.0, seed ^ 8);
        let c = randn(m, k, 1.0, seed ^ 9);
        let e = grad_error(&[a.clone(), b], |t, v| t.sum(t.square(t.matmul(v[0], v[1])?)?));
        prop_assert!(e < TOL, "matmul: {e}");
        let e = grad_error(&[a.clone(), c], |t, v| t.sum(t.square(t.matmul_nt(v[0], v[1])?)?));
        prop_assert!(e < TOL, "matmul_nt: {e}");
        let w = randn(k, n, 1.0, seed ^ 10);
        let e = grad_error(&[a, w], |t, v| t.sum(t.mul(t.transpose(v[0])?, v[1])?));
        prop_assert!(e < TOL, "transpose: {e}");
    }

    #[test]
    fn sparse_product(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, d in 1usize..4) {
        let p = random_pattern(rows, cols, seed);
        let vals = randn(p.nnz(), 1, 1.0, seed ^ 11);
        let x = randn(cols, d, 1.0, seed ^ 12);
        let y = randn(rows, d, 1.0, seed ^ 13);
        let e = grad_error(&[vals.clone(), x], |t, v| t.sum(t.square(t.spmm(&p, v[0], v[1], false)?)?));
        prop_assert!(e < TOL, "spmm: {e}");
        let e = grad_error(&[vals, y], |t, v| t.sum(t.square(t.spmm(&p, v[0], v[1], true)?)?));
        prop_assert!(e < TOL, "spmm transposed: {e}");
    }

    #[test]
    fn row_ops(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let a = randn(r, c, 1.0, seed);
        let b = randn(r, c, 1.0, seed ^ 14);
        let w = randn(r, c, 1.0, seed ^ 15);
        let e = grad_error(&[a.clone(), b.clone()], |t, v| t.sum(t.square(t.row_dot(v[0], v[1])?)?));
        prop_assert!(e < TOL, "row_dot: {e}");
        let e = grad_error(std::slice::from_ref(&a), |t, v| t.sum(t.square(t.sum_rows(v[0])?)?));
        prop_assert!(e < TOL, "sum_rows: {e}");
        let e = grad_error(&[a.clone(), w], |t, v| t.sum(t.mul(t.normalize_rows(v[0], 1e-12)?, v[1])?));
        prop_assert!(e < TOL, "normalize_rows: {e}");
        let mut rng = RngStream::new(seed ^ 16);
        let mask: Vec<bool> = (0..r * c).map(|k| k % c == 0 || rng.bernoulli(0.6)).collect();
        let mask = Arc::new(mask);
        let e = grad_error(std::slice::from_ref(&a), |t, v| t.sum(t.square(t.logsumexp_rows(v[0], Some(Arc::clone(&mask)))?)?));
        prop_assert!(e < TOL, "logsumexp_rows: {e}");
        let e = grad_error(std::slice::from_ref(&a), |t, v| t.sum(t.square(t.logsumexp_rows(v[0], None)?)?));
        prop_assert!(e < TOL, "logsumexp_rows unmasked: {e}");
        let idx = Arc::new((0..r + 2).map(|_| rng.below(r)).collect::<Vec<_>>());
        let e = grad_error(std::slice::from_ref(&a), |t, v| t.sum(t.square(t.gather_rows(v[0], Arc::clone(&idx))?)?));
        prop_assert!(e < TOL, "gather_rows: {e}");
        let e = grad_error(&[a.clone(), b.clone()], |t, v| {
            let both = t.concat_cols(&[v[0], v[1]])?;
            let stacked = t.concat_rows(&[v[1], both_half(t, both, c)?])?;
            t.sum(t.square(stacked)?)
        });
        prop_assert!(e < TOL, "concat: {e}");
        let e = grad_error(&[a, b], |t, v| {
            let d = t.detach(v[1]);
            t.sum(t.mul(v[0], d)?)
        });
        prop_assert!(e.is_finite());
    }
}

/// Right half of a `[x | y]` block via a selector product, so concat_cols
/// feeds concat_rows through a differentiable path.
fn both_half(t: &Tape, both: Var, c: usize) -> radar::Result<Var> {
    let mut sel = Tensor::zeros(2 * c, c);
    for j in 0..c {
        sel.set(c + j, j, 1.0);
    }
    t.matmul(both, t.constant(sel))
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::column(vec![1.0, 2.0]));
    let y = tape.mul(x, tape.detach(x)).unwrap();
    let l = tape.sum(y).unwrap();
    let mut g = tape.backward(l).unwrap();
    assert_eq!(g.take(x).unwrap().data(), &[1.0, 2.0]);
}
