use crate::error::{contract, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Ordered, named group of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// `‖Θ‖²_F` over every tensor.
    pub fn norm_sq(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Records every tensor on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles of a bound [`Params`], indexed by slot.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.0[slot]
    }

    /// Gradients in slot order; missing entries become zeros.
    pub fn grads(&self, grads: &mut Gradients, params: &Params) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }

    /// `Σ ‖θ‖²` as a tape scalar.
    pub fn l2(&self, tape: &Tape) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &v in &self.0 {
            let s = tape.sum(tape.square(v)?)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => contract("l2 of an empty parameter group"),
        }
    }
}
