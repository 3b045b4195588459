//! Compressed-row sparse matrices.
//!
//! The sparsity structure lives in a shared [`SparsePattern`] that also
//! carries a precomputed transpose, so the same edge set can be reused with
//! different value vectors (normalised adjacency, soft views, per-layer
//! masks) and multiplied in either direction without re-sorting.

use std::sync::Arc;

use crate::error::{contract, shape_err, Error, Result};
use crate::numerics::par;
use crate::numerics::tensor::{dot, Tensor};

#[derive(Debug, PartialEq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    edge_rows: Vec<usize>,
    t_offsets: Vec<usize>,
    t_indices: Vec<usize>,
    t_edges: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from `(row, col)` pairs. Pairs must be unique; they
    /// are sorted into row-major order and the permutation that was applied is
    /// returned alongside.
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<(Self, Vec<usize>)> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&k| pairs[k]);
        for w in order.windows(2) {
            if pairs[w[0]] == pairs[w[1]] {
                return contract(format!("duplicate sparse entry {:?}", pairs[w[0]]));
            }
        }
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(pairs.len());
        let mut edge_rows = Vec::with_capacity(pairs.len());
        for &k in &order {
            let (r, c) = pairs[k];
            if r >= rows || c >= cols {
                return shape_err(
                    "SparsePattern::from_pairs",
                    format!("entry ({r},{c}) outside {rows}x{cols}"),
                );
            }
            offsets[r + 1] += 1;
            indices.push(c);
            edge_rows.push(r);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        let pattern = Self::with_transpose(rows, cols, offsets, indices, edge_rows);
        Ok((pattern, order))
    }

    fn with_transpose(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        edge_rows: Vec<usize>,
    ) -> Self {
        let nnz = indices.len();
        let mut t_offsets = vec![0usize; cols + 1];
        for &c in &indices {
            t_offsets[c + 1] += 1;
        }
        for c in 0..cols {
            t_offsets[c + 1] += t_offsets[c];
        }
        let mut cursor = t_offsets.clone();
        let mut t_indices = vec![0usize; nnz];
        let mut t_edges = vec![0usize; nnz];
        // edges are visited in row order, so rows come out sorted within each column
        for (k, (&c, &r)) in indices.iter().zip(&edge_rows).enumerate() {
            let slot = cursor[c];
            t_indices[slot] = r;
            t_edges[slot] = k;
            cursor[c] += 1;
        }
        Self {
            rows,
            cols,
            offsets,
            indices,
            edge_rows,
            t_offsets,
            t_indices,
            t_edges,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Row of every stored entry, in storage order.
    pub fn edge_rows(&self) -> &[usize] {
        &self.edge_rows
    }

    /// Column-major view: offsets into [`Self::t_indices`] per column.
    pub fn t_offsets(&self) -> &[usize] {
        &self.t_offsets
    }

    /// Row index of each entry in column-major order.
    pub fn t_indices(&self) -> &[usize] {
        &self.t_indices
    }

    /// Storage position of each entry in column-major order.
    pub fn t_edges(&self) -> &[usize] {
        &self.t_edges
    }

    /// Storage position of entry `(row, col)` if present.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.offsets[row];
        let hi = self.offsets[row + 1];
        self.indices[lo..hi].binary_search(&col).ok().map(|p| lo + p)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.offsets.len() != self.rows + 1 || self.offsets[self.rows] != self.indices.len() {
            return contract("sparse offsets inconsistent with entry count");
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
            if lo > hi {
                return contract("sparse offsets not monotone");
            }
            if self.indices[lo..hi].windows(2).any(|w| w[0] >= w[1]) {
                return contract(format!("column indices not strictly increasing in row {r}"));
            }
        }
        Ok(())
    }
}

/// Sparse matrix: shared pattern plus one value per stored entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return shape_err(
                "CsrMatrix::new",
                format!("{} values for {} entries", values.len(), pattern.nnz()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CsrMatrix::new"));
        }
        Ok(Self { pattern, values })
    }

    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = triplets.iter().map(|&(r, c, _)| (r, c)).collect();
        let (pattern, order) = SparsePattern::from_pairs(rows, cols, &pairs)?;
        let values = order.iter().map(|&k| triplets[k].2).collect();
        Self::new(Arc::new(pattern), values)
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t).expect("identity is well formed")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_triplets(rows, cols, &[]).expect("empty matrix is well formed")
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.pattern), values)
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.pattern.offsets[i], self.pattern.offsets[i + 1]);
        self.pattern.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows(), self.cols());
        for (k, (&r, &c)) in self.pattern.edge_rows.iter().zip(&self.pattern.indices).enumerate() {
            out.set(r, c, self.values[k]);
        }
        out
    }

    /// Materialised transpose with its own pattern.
    pub fn transpose(&self) -> Self {
        let p = &self.pattern;
        let triplets: Vec<_> = (0..p.cols)
            .flat_map(|c| {
                (p.t_offsets[c]..p.t_offsets[c + 1])
                    .map(move |s| (c, p.t_indices[s], self.values[p.t_edges[s]]))
            })
            .collect();
        Self::from_triplets(p.cols, p.rows, &triplets).expect("transpose of valid matrix")
    }

    pub fn validate(&self) -> Result<()> {
        self.pattern.check_invariants()?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CsrMatrix::validate"));
        }
        Ok(())
    }
}

/// Exact sparse-dense product `A · X`.
pub fn spmm(a: &CsrMatrix, x: &Tensor) -> Result<Tensor> {
    spmm_pattern(&a.pattern, &a.values, x, false)
}

/// `A · X` (or `Aᵀ · X` when `transpose`), with `A` given by pattern and values.
pub fn spmm_pattern(pattern: &SparsePattern, values: &[f64], x: &Tensor, transpose: bool) -> Result<Tensor> {
    let (out_rows, inner) = if transpose {
        (pattern.cols, pattern.rows)
    } else {
        (pattern.rows, pattern.cols)
    };
    if x.rows() != inner {
        return shape_err(
            "spmm",
            format!(
                "sparse {}x{}{} times dense {:?}",
                pattern.rows,
                pattern.cols,
                if transpose { "ᵀ" } else { "" },
                x.shape()
            ),
        );
    }
    if values.len() != pattern.nnz() {
        return shape_err("spmm", "value count does not match pattern");
    }
    let d = x.cols();
    let mut out = Tensor::zeros(out_rows, d);
    spmm_kernel(pattern, values, x.data(), d, transpose, out.data_mut(), false);
    out.ensure_finite("spmm")?;
    Ok(out)
}

/// Row kernel shared by the public product, the autodiff op and the
/// benchmarks. Each output row accumulates its entries in storage order.
pub fn spmm_kernel(
    p: &SparsePattern,
    values: &[f64],
    x: &[f64],
    d: usize,
    transpose: bool,
    out: &mut [f64],
    sequential: bool,
) {
    let body = |i: usize, row: &mut [f64]| {
        row.fill(0.0);
        if transpose {
            for s in p.t_offsets[i]..p.t_offsets[i + 1] {
                let w = values[p.t_edges[s]];
                let src = &x[p.t_indices[s] * d..(p.t_indices[s] + 1) * d];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        } else {
            for k in p.offsets[i]..p.offsets[i + 1] {
                let w = values[k];
                let src = &x[p.indices[k] * d..(p.indices[k] + 1) * d];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    };
    if sequential {
        par::for_each_row_seq(out, d, body);
    } else {
        par::for_each_row(out, d, body);
    }
}

/// Gradient of `sum(G ⊙ (A·X))` with respect to the stored values of `A`
/// (or of `Aᵀ·X` when `transpose`).
pub(crate) fn spmm_value_grad(p: &SparsePattern, g: &[f64], x: &[f64], d: usize, transpose: bool) -> Vec<f64> {
    let rows = &p.edge_rows;
    let cols = &p.indices;
    par::map_indices(p.nnz(), |k| {
        let (r, c) = (rows[k], cols[k]);
        if transpose {
            dot(&g[c * d..(c + 1) * d], &x[r * d..(r + 1) * d])
        } else {
            dot(&g[r * d..(r + 1) * d], &x[c * d..(c + 1) * d])
        }
    })
}
