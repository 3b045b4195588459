//! Dense tensors, CSR sparse matrices, reverse-mode autodiff and seeded RNG.

pub mod grad_check;
pub mod par;
pub mod params;
pub mod rng;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use grad_check::{finite_difference_gradient, relative_error};
pub use params::{Bound, Params};
pub use rng::RngStream;
pub use sparse::{spmm, CsrMatrix, SparsePattern};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)`, stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
