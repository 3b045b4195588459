//! Gaussian diffusion over embedding rows.
//!
//! The schedule is linear in the noise level:
//! `1 − ᾱ_t = s·[α_low + (t−1)/(T−1)·(α_up − α_low)]`, `β_t = 1 − ᾱ_t/ᾱ_{t−1}`.
//! The reverse model predicts `χ̂_0` and steps use the forward posterior
//! `q(χ_{t−1} | χ_t, χ̂_0)` with its fixed variance.

use std::sync::Arc;

use crate::error::{contract, Result};
use crate::numerics::{Bound, Params, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    s: f64,
    alpha_low: f64,
    alpha_up: f64,
    /// `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
    alpha_bar: Vec<f64>,
    /// `β_t` for `t = 0..=T`, with `β_0 = 0`.
    beta: Vec<f64>,
}

pub fn build_schedule(steps: usize, s: f64, alpha_low: f64, alpha_up: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return contract(format!("diffusion needs T >= 2, got {steps}"));
    }
    if !(0.0..=1.0).contains(&s) {
        return contract(format!("noise scale s={s} outside [0, 1]"));
    }
    if !(0.0 < alpha_low && alpha_low < alpha_up && alpha_up < 1.0) {
        return contract(format!(
            "need 0 < alpha_low < alpha_up < 1, got {alpha_low} and {alpha_up}"
        ));
    }
    let mut alpha_bar = vec![1.0];
    let mut beta = vec![0.0];
    for t in 1..=steps {
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        let ab = 1.0 - s * (alpha_low + frac * (alpha_up - alpha_low));
        beta.push(1.0 - ab / alpha_bar[t - 1]);
        alpha_bar.push(ab);
    }
    Ok(NoiseSchedule {
        steps,
        s,
        alpha_low,
        alpha_up,
        alpha_bar,
        beta,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return contract(format!("diffusion step {t} outside 1..={}", self.steps));
        }
        Ok(())
    }

    /// `(coef on χ̂_0, coef on χ_t, variance)` of `q(χ_{t−1} | χ_t, χ̂_0)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let den = 1.0 - ab;
        if den <= 0.0 {
            return (0.0, 1.0, 0.0);
        }
        (
            ab_prev.sqrt() * b / den,
            (1.0 - b).sqrt() * (1.0 - ab_prev) / den,
            b * (1.0 - ab_prev) / den,
        )
    }
}

fn noise_like(x: &Tensor, rng: Option<&mut RngStream>) -> Tensor {
    match rng {
        Some(r) => Tensor::randn(x.rows(), x.cols(), 1.0, r),
        None => Tensor::zeros(x.rows(), x.cols()),
    }
}

/// Closed form `χ_t = √ᾱ_t χ_0 + √(1−ᾱ_t) ε`; `rng = None` sets `ε = 0`.
pub fn forward_sample(x0: &Tensor, t: usize, sched: &NoiseSchedule, rng: Option<&mut RngStream>) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let eps = noise_like(x0, rng);
    x0.zip_map(&eps, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
}

/// One kernel step `χ_t = √(1−β_t) χ_{t−1} + √β_t ε`.
pub fn forward_step(x_prev: &Tensor, t: usize, sched: &NoiseSchedule, rng: Option<&mut RngStream>) -> Result<Tensor> {
    sched.check(t)?;
    let b = sched.beta(t);
    let eps = noise_like(x_prev, rng);
    x_prev.zip_map(&eps, |x, e| (1.0 - b).sqrt() * x + b.sqrt() * e)
}

/// Anything that predicts `χ̂_0` from `χ_t` and per-row steps on a tape.
pub trait X0Predictor {
    fn predict(&self, tape: &Tape, x_t: Var, steps: &[usize]) -> Result<Var>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Tape, Var, &[usize]) -> Result<Var>,
{
    fn predict(&self, tape: &Tape, x_t: Var, steps: &[usize]) -> Result<Var> {
        self(tape, x_t, steps)
    }
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

/// Two-layer perceptron on `[χ_t ; sinusoidal(t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    time_dim: usize,
    params: Params,
}

impl DenoiserNet {
    pub fn new(dim: usize, hidden: usize, time_dim: usize, rng: &mut RngStream) -> Self {
        let mut p = Params::new();
        p.add("w1", Tensor::glorot(dim + time_dim, hidden, rng));
        p.add("b1", Tensor::zeros(1, hidden));
        p.add("w2", Tensor::glorot(hidden, dim, rng));
        p.add("b2", Tensor::zeros(1, dim));
        Self { time_dim, params: p }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Binds the weights on `tape` (as parameters when `trainable`).
    pub fn on_tape(&self, tape: &Tape, trainable: bool) -> NetOnTape<'_> {
        NetOnTape {
            net: self,
            bound: self.params.bind(tape, trainable),
        }
    }
}

/// Sinusoidal encoding of each step, one row per entry.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(steps.len(), dim);
    for (r, &t) in steps.iter().enumerate() {
        let row = out.row_mut(r);
        for k in 0..half {
            let freq = (-(k as f64) / half.max(1) as f64 * 10_000f64.ln()).exp();
            row[k] = (t as f64 * freq).sin();
            row[half + k] = (t as f64 * freq).cos();
        }
    }
    out
}

pub struct NetOnTape<'a> {
    net: &'a DenoiserNet,
    pub bound: Bound,
}

impl X0Predictor for NetOnTape<'_> {
    fn predict(&self, tape: &Tape, x_t: Var, steps: &[usize]) -> Result<Var> {
        let b = &self.bound;
        let te = tape.constant(time_embedding(steps, self.net.time_dim));
        let input = tape.concat_cols(&[x_t, te])?;
        let h = tape.tanh(tape.add_row(tape.matmul(input, b.var(W1))?, b.var(B1))?)?;
        tape.add_row(tape.matmul(h, b.var(W2))?, b.var(B2))
    }
}

fn add_noise(tape: &Tape, x: Var, std: f64, rng: Option<&mut RngStream>) -> Result<Var> {
    match rng {
        Some(r) if std > 0.0 => {
            let [n, d] = tape.shape(x);
            tape.add(x, tape.constant(Tensor::randn(n, d, std, r)))
        }
        _ => Ok(x),
    }
}

/// One reverse step `χ_t → χ_{t−1}` (no noise is added at `t = 1`).
pub fn reverse_step(tape: &Tape, net: &dyn X0Predictor, x_t: Var, t: usize, sched: &NoiseSchedule, rng: Option<&mut RngStream>) -> Result<Var> {
    sched.check(t)?;
    let (c0, ct, var) = sched.posterior(t);
    if c0 == 0.0 && ct == 1.0 {
        return Ok(x_t);
    }
    let n = tape.shape(x_t)[0];
    let x0 = net.predict(tape, x_t, &vec![t; n])?;
    let mean = tape.add(tape.scale(x0, c0)?, tape.scale(x_t, ct)?)?;
    if t == 1 {
        return Ok(mean);
    }
    add_noise(tape, mean, var.sqrt(), rng)
}

/// Noises `x` to step `steps` in closed form, then runs `steps` reverse
/// steps. Without `rng` both directions are deterministic.
pub fn denoise_embeddings(tape: &Tape, net: &dyn X0Predictor, x: Var, sched: &NoiseSchedule, steps: usize, mut rng: Option<&mut RngStream>) -> Result<Var> {
    if steps == 0 {
        return Ok(x);
    }
    if steps > sched.steps() {
        return contract(format!("{steps} denoising steps exceed T={}", sched.steps()));
    }
    let ab = sched.alpha_bar(steps);
    let mut cur = add_noise(tape, tape.scale(x, ab.sqrt())?, (1.0 - ab).sqrt(), rng.as_deref_mut())?;
    for t in (1..=steps).rev() {
        cur = reverse_step(tape, net, cur, t, sched, rng.as_deref_mut())?;
    }
    Ok(cur)
}

/// `mean_rows ‖χ̂_θ(χ_t, t) − χ_0‖²` with `t ~ U{1..T}` drawn per row.
pub fn elbo_loss(tape: &Tape, net: &dyn X0Predictor, x0: Var, sched: &NoiseSchedule, rng: &mut RngStream) -> Result<Var> {
    let [n, d] = tape.shape(x0);
    if n == 0 {
        return contract("elbo_loss needs a nonempty batch");
    }
    let steps: Vec<usize> = (0..n).map(|_| 1 + rng.below(sched.steps())).collect();
    let signal = Tensor::column(steps.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect());
    let noise_std: Vec<f64> = steps.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let mut eps = Tensor::randn(n, d, 1.0, rng);
    for (r, s) in noise_std.iter().enumerate() {
        eps.row_mut(r).iter_mut().for_each(|e| *e *= s);
    }
    let xt = tape.add(tape.mul_col(x0, tape.constant(signal))?, tape.constant(eps))?;
    let pred = net.predict(tape, xt, &steps)?;
    let err = tape.sum(tape.square(tape.sub(pred, x0)?)?)?;
    tape.scale(err, 1.0 / n as f64)
}

/// Delayed diffusion regulariser: zero before `warmup_epochs`, afterwards
/// `weight · elbo_loss(items)`.
#[allow(clippy::too_many_arguments)]
pub fn ddr_regularizer(
    tape: &Tape,
    net: &dyn X0Predictor,
    items: Var,
    sched: &NoiseSchedule,
    epoch: usize,
    warmup_epochs: usize,
    weight: f64,
    rng: &mut RngStream,
) -> Result<Var> {
    if epoch < warmup_epochs || weight == 0.0 {
        return Ok(tape.scalar_const(0.0));
    }
    let l = elbo_loss(tape, net, items, sched, rng)?;
    tape.scale(l, weight)
}

/// Gathers rows and detaches them so diffusion training sees constants.
pub fn detached_rows(tape: &Tape, x: Var, rows: &Arc<Vec<usize>>) -> Result<Var> {
    let g = tape.gather_rows(x, Arc::clone(rows))?;
    Ok(tape.detach(g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_arithmetic() {
        let s = build_schedule(5, 1.0, 0.1, 0.5).unwrap();
        for (t, want) in [0.1, 0.2, 0.3, 0.4, 0.5].iter().enumerate() {
            assert!((1.0 - s.alpha_bar(t + 1) - want).abs() < 1e-12);
        }
        let z = build_schedule(4, 0.0, 0.1, 0.5).unwrap();
        assert!((1..=4).all(|t| z.alpha_bar(t) == 1.0 && z.beta(t) == 0.0));
        assert!(build_schedule(1, 0.5, 0.1, 0.5).is_err());
        assert!(build_schedule(5, 0.5, 0.5, 0.1).is_err());
        assert!(build_schedule(5, 1.5, 0.1, 0.5).is_err());
    }

    #[test]
    fn zero_noise_forward_is_scaled() {
        let s = build_schedule(5, 1.0, 0.1, 0.5).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let y = forward_sample(&x, 2, &s, None).unwrap();
        assert_eq!(y, x.scaled(0.8f64.sqrt()));
        assert!(forward_sample(&x, 0, &s, None).is_err());
        assert!(forward_sample(&x, 6, &s, None).is_err());
    }

    #[test]
    fn identity_schedule_reverse_is_identity() {
        let s = build_schedule(3, 0.0, 0.1, 0.5).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap());
        let zero = |t: &Tape, v: Var, _: &[usize]| t.scale(v, 0.0);
        let mut rng = RngStream::new(0);
        let y = reverse_step(&tape, &zero, x, 2, &s, Some(&mut rng)).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn perfect_net_deterministic_round_trip() {
        let s = build_schedule(50, 0.2, 0.05, 0.5).unwrap();
        let tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.0, -0.1]]).unwrap();
        let xv = tape.constant(x0.clone());
        let oracle = |t: &Tape, _: Var, _: &[usize]| Ok(t.constant(x0.clone()));
        let y = denoise_embeddings(&tape, &oracle, xv, &s, 5, None).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(denoise_embeddings(&tape, &oracle, xv, &s, 0, None).unwrap(), xv);
    }

    #[test]
    fn elbo_hooks() {
        let s = build_schedule(10, 0.5, 0.1, 0.5).unwrap();
        let tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let xv = tape.constant(x0.clone());
        let mut rng = RngStream::new(9);
        let oracle = |t: &Tape, _: Var, _: &[usize]| Ok(t.constant(x0.clone()));
        let zero = |t: &Tape, v: Var, _: &[usize]| t.scale(v, 0.0);
        assert_eq!(tape.item(elbo_loss(&tape, &oracle, xv, &s, &mut rng).unwrap()).unwrap(), 0.0);
        assert_eq!(tape.item(elbo_loss(&tape, &zero, xv, &s, &mut rng).unwrap()).unwrap(), 4.0);
    }

    #[test]
    fn ddr_gating() {
        let s = build_schedule(10, 0.5, 0.1, 0.5).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(2, 2));
        let zero = |t: &Tape, v: Var, _: &[usize]| t.scale(v, 0.0);
        let mut rng = RngStream::new(1);
        let before = ddr_regularizer(&tape, &zero, x, &s, 1, 3, 1.0, &mut rng).unwrap();
        let off = ddr_regularizer(&tape, &zero, x, &s, 5, 3, 0.0, &mut rng).unwrap();
        let on = ddr_regularizer(&tape, &zero, x, &s, 5, 3, 1.0, &mut rng).unwrap();
        assert_eq!(tape.item(before).unwrap(), 0.0);
        assert_eq!(tape.item(off).unwrap(), 0.0);
        assert_eq!(tape.item(on).unwrap(), 2.0);
    }
}
