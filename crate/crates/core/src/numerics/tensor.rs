use crate::error::{shape_err, Error, Result};
use crate::numerics::par;
use crate::numerics::rng::RngStream;

/// Dense row-major matrix of `f64`.
///
/// Vectors are stored as `n × 1` columns and scalars as `1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(
                "Tensor::from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            );
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: [values.len(), 1],
            data: values,
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len()],
            data: values,
        }
    }

    /// Entries drawn i.i.d. from `Normal(0, std²)`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self {
            shape: [rows, cols],
            data,
        }
    }

    /// Glorot-uniform initialisation for a `fan_in × fan_out` weight.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| limit * (2.0 * rng.uniform() - 1.0))
            .collect();
        Self {
            shape: [fan_in, fan_out],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err("Tensor::item", format!("shape {:?} is not scalar", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(
                "Tensor::zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(
                "Tensor::add_assign_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Self {
        let [r, c] = self.shape;
        let mut out = Self::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Rows `idx[0], idx[1], ...` stacked into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: [idx.len(), c],
            data,
        }
    }

    /// Dense product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_with(other, false)
    }

    /// [`Tensor::matmul`] with an explicit choice of the sequential path.
    pub fn matmul_with(&self, other: &Self, sequential: bool) -> Result<Self> {
        let [n, k] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        let mut out = Self::zeros(n, m);
        if sequential {
            par::for_each_row_seq(&mut out.data, m, |i, row| matmul_row(&self.data, &other.data, k, m, i, row));
        } else {
            matmul_into(&self.data, &other.data, n, k, m, &mut out.data);
        }
        Ok(out)
    }

    /// Bitwise checksum of the contents, used for freeze checks.
    pub fn checksum(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// `out[n×m] = a[n×k] · b[k×m]`, row-parallel.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], _n: usize, k: usize, m: usize, out: &mut [f64]) {
    par::for_each_row(out, m, |i, row| matmul_row(a, b, k, m, i, row));
}

fn matmul_row(a: &[f64], b: &[f64], k: usize, m: usize, i: usize, row: &mut [f64]) {
    row.fill(0.0);
    let arow = &a[i * k..(i + 1) * k];
    for (p, &av) in arow.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * m..(p + 1) * m];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
