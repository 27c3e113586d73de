//! CSR sparse matrices for graph propagation.
//!
//! Sparse structure is fixed preprocessing: no gradients ever flow into a
//! `SparseMatrix`, only through the dense operand of [`spmm`].

use super::dense::DenseMatrix;
use super::NumError;

/// Compressed sparse row matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate coordinates are an error.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self, NumError> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(NumError::Shape(format!(
                    "triplet ({r},{c}) out of bounds for {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(NumError::NonFinite);
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(NumError::Shape(format!(
                    "duplicate coordinate ({},{})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (col, value) pairs of one row, column-sorted.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_offsets[r];
        let end = self.row_offsets[r + 1];
        self.col_indices[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        let start = self.row_offsets[r];
        let end = self.row_offsets[r + 1];
        self.values[start..end].iter().sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row_entries(r)
            .find(|&(cc, _)| cc == c)
            .map_or(0.0, |(_, v)| v)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                triplets.push((c, r, v));
            }
        }
        SparseMatrix::from_triplets(self.cols, self.rows, triplets)
            .expect("transpose of a valid matrix is valid")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Exact structural + value equality with the transpose.
    pub fn is_symmetric(&self) -> bool {
        self == &self.transpose()
    }
}

/// `s * d`, CSR times dense.
pub fn spmm(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if s.cols != d.rows() {
        return Err(NumError::Shape(format!(
            "spmm: {}x{} times {}x{}",
            s.rows,
            s.cols,
            d.rows(),
            d.cols()
        )));
    }
    let cols = d.cols();
    let mut out = DenseMatrix::zeros(s.rows, cols);
    for r in 0..s.rows {
        let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let start = s.row_offsets[r];
        let end = s.row_offsets[r + 1];
        for k in start..end {
            let c = s.col_indices[k];
            let v = s.values[k];
            for (o, &dv) in orow.iter_mut().zip(d.row(c)) {
                *o += v * dv;
            }
        }
    }
    Ok(out)
}

/// `sᵀ * d` without materializing the transpose (backward pass of spmm).
pub fn spmm_t(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if s.rows != d.rows() {
        return Err(NumError::Shape(format!(
            "spmm_t: {}x{} times {}x{}",
            s.cols,
            s.rows,
            d.rows(),
            d.cols()
        )));
    }
    let cols = d.cols();
    let mut out = DenseMatrix::zeros(s.cols, cols);
    for r in 0..s.rows {
        let drow = d.row(r);
        let start = s.row_offsets[r];
        let end = s.row_offsets[r + 1];
        for k in start..end {
            let c = s.col_indices[k];
            let v = s.values[k];
            let orow = &mut out.data_mut()[c * cols..(c + 1) * cols];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += v * dv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::dense;
    use proptest::prelude::*;

    #[test]
    fn identity_spmm_is_noop() {
        let m = DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(spmm(&SparseMatrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn empty_spmm_is_zero() {
        let m = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = SparseMatrix::empty(3, 2);
        assert_eq!(spmm(&s, &m).unwrap(), DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn duplicate_triplet_rejected() {
        let r = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn invariants_hold_after_build() {
        let s = SparseMatrix::from_triplets(3, 4, vec![(2, 0, 1.0), (0, 3, 2.0), (0, 1, 3.0)])
            .unwrap();
        assert_eq!(s.row_offsets, vec![0, 2, 2, 3]);
        // within-row columns strictly increasing
        for r in 0..3 {
            let cols: Vec<_> = s.row_entries(r).map(|(c, _)| c).collect();
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
    }

    fn sparse_strategy(max_dim: usize) -> impl Strategy<Value = (SparseMatrix, DenseMatrix)> {
        (1..=max_dim, 1..=max_dim, 1..=6usize).prop_flat_map(|(r, c, k)| {
            let trips = proptest::collection::vec(
                (0..r, 0..c, -5.0..5.0f64),
                0..=(r * c).min(40),
            );
            let dense = proptest::collection::vec(-5.0..5.0f64, c * k);
            (Just(r), Just(c), Just(k), trips, dense)
        })
        .prop_map(|(r, c, k, mut trips, dense)| {
            trips.sort_unstable_by_key(|&(i, j, _)| (i, j));
            trips.dedup_by_key(|&mut (i, j, _)| (i, j));
            let s = SparseMatrix::from_triplets(r, c, trips).unwrap();
            let d = DenseMatrix::from_vec(c, k, dense).unwrap();
            (s, d)
        })
    }

    proptest! {
        // spmm must agree with densify-then-matmul.
        #[test]
        fn spmm_matches_dense_product((s, d) in sparse_strategy(50)) {
            let via_sparse = spmm(&s, &d).unwrap();
            let via_dense = dense::matmul(&s.to_dense(), &d).unwrap();
            for (a, b) in via_sparse.data().iter().zip(via_dense.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn spmm_t_matches_transposed_product((s, _) in sparse_strategy(20)) {
            let d = DenseMatrix::from_vec(s.rows(), 3, (0..s.rows()*3).map(|i| (i as f64).sin()).collect()).unwrap();
            let fast = spmm_t(&s, &d).unwrap();
            let slow = spmm(&s.transpose(), &d).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
