#![allow(dead_code)]

use radar::numerics::{finite_difference_gradient, relative_error, RngStream, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between tape gradients and central differences
/// over every input of `f`.
pub fn grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> radar::Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("objective");
    let mut grads = tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[k]).unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let numeric = finite_difference_gradient(
            |probe| {
                let tape = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let l = f(&tape, &vs)?;
                tape.item(l)
            },
            x,
            FD_STEP,
        )
        .expect("finite differences");
        worst = worst.max(relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

pub fn randn(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    Tensor::randn(rows, cols, std, &mut RngStream::new(seed))
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let data = (0..rows * cols).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Like [`grad_error`] but for the parameters of a module `m`: `f` builds
/// the loss and returns the bound parameters it used.
pub fn module_grad_error<M, G, H, F>(m: &M, get: G, get_mut: H, f: F) -> f64
where
    M: Clone,
    G: Fn(&M) -> &radar::numerics::Params,
    H: Fn(&mut M) -> &mut radar::numerics::Params,
    F: Fn(&Tape, &M, bool) -> radar::Result<(Var, radar::numerics::Bound)>,
{
    let tape = Tape::new();
    let (loss, bound) = f(&tape, m, true).expect("objective");
    let mut grads = tape.backward(loss).expect("backward");
    let analytic = bound.grads(&mut grads, get(m));
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let mut m2 = m.clone();
                get_mut(&mut m2).tensors_mut()[k] = probe.clone();
                let tape = Tape::new();
                let (l, _) = f(&tape, &m2, false)?;
                tape.item(l)
            },
            get(m).get(k),
            FD_STEP,
        )
        .expect("finite differences");
        worst = worst.max(relative_error(a, &numeric, 1e-6));
    }
    worst
}
