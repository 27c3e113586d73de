//! Row-major dense matrices in 64-bit floats.

use super::NumError;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite);
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Frobenius dot product (sum of elementwise products).
    pub fn dot(&self, other: &DenseMatrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `a * b`, standard dense product.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.cols != b.rows {
        return Err(NumError::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (j, &bv) in brow.iter().enumerate() {
                orow[j] += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.rows != b.rows {
        return Err(NumError::Shape(format!(
            "matmul_tn: {}x{} times {}x{}",
            a.cols, a.rows, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (j, &bv) in brow.iter().enumerate() {
                orow[j] += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.cols != b.cols {
        return Err(NumError::Shape(format!(
            "matmul_nt: {}x{} times {}x{}",
            a.rows, a.cols, b.cols, b.rows
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

pub fn add(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(DenseMatrix {
            rows: a.rows,
            cols: a.cols,
            data,
        });
    }
    // Bias form: add a 1xC row vector to every row.
    if b.rows == 1 && b.cols == a.cols {
        let mut out = a.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                out.data[r * a.cols + c] += b.data[c];
            }
        }
        return Ok(out);
    }
    Err(NumError::Shape(format!(
        "add: {}x{} plus {}x{}",
        a.rows, a.cols, b.rows, b.cols
    )))
}

pub fn scale(a: &DenseMatrix, s: f64) -> DenseMatrix {
    a.map(|v| v * s)
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape(format!(
            "hadamard: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(DenseMatrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn relu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|v| v.max(0.0))
}

pub fn sigmoid(a: &DenseMatrix) -> DenseMatrix {
    a.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x), computed without underflow for large |x|.
#[inline]
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sigmoid(a: &DenseMatrix) -> DenseMatrix {
    a.map(log_sigmoid_scalar)
}

pub fn concat_cols(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumError> {
    if a.rows != b.rows {
        return Err(NumError::Shape(format!(
            "concat_cols: {} rows vs {} rows",
            a.rows, b.rows
        )));
    }
    let cols = a.cols + b.cols;
    let mut out = DenseMatrix::zeros(a.rows, cols);
    for r in 0..a.rows {
        out.data[r * cols..r * cols + a.cols].copy_from_slice(a.row(r));
        out.data[r * cols + a.cols..(r + 1) * cols].copy_from_slice(b.row(r));
    }
    Ok(out)
}

pub fn row_select(a: &DenseMatrix, indices: &[usize]) -> Result<DenseMatrix, NumError> {
    let mut out = DenseMatrix::zeros(indices.len(), a.cols);
    for (r, &idx) in indices.iter().enumerate() {
        if idx >= a.rows {
            return Err(NumError::Shape(format!(
                "row_select: index {} out of {} rows",
                idx, a.rows
            )));
        }
        out.data[r * a.cols..(r + 1) * a.cols].copy_from_slice(a.row(idx));
    }
    Ok(out)
}

pub fn sum_all(a: &DenseMatrix) -> f64 {
    a.data.iter().sum()
}

/// Sum each row into a Nx1 column.
pub fn row_sum(a: &DenseMatrix) -> DenseMatrix {
    let data = (0..a.rows).map(|r| a.row(r).iter().sum()).collect();
    DenseMatrix {
        rows: a.rows,
        cols: 1,
        data,
    }
}
