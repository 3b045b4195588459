use crate::error::{shape_err, Error, Result};
use crate::numerics::{Params, Tensor};

/// Adam with bias correction; one instance per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return shape_err("Adam::step", format!("{} grads for {} params", grads.len(), params.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient"));
        }
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return shape_err("Adam::step", format!("param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
