use crate::error::{Error, Result};

/// Dense row-major real matrix used for spectrograms, frames and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Linear per-column resampling along the row (time) axis to `target` rows.
    /// Endpoints map onto endpoints; a single source row is repeated.
    pub fn resample_rows(&self, target: usize) -> Result<Matrix> {
        if target == 0 {
            return Err(Error::invalid("target row count must be positive"));
        }
        if self.rows == 0 {
            return Err(Error::invalid("cannot resample an empty matrix"));
        }
        if target == self.rows {
            return Ok(self.clone());
        }
        let mut out = Matrix::zeros(target, self.cols);
        for t in 0..target {
            let (lo, hi, frac) = interp_position(t, target, self.rows);
            let (a, b) = (self.row(lo), self.row(hi));
            for (o, (&x, &y)) in out.row_mut(t).iter_mut().zip(a.iter().zip(b)) {
                *o = x + (y - x) * frac;
            }
        }
        Ok(out)
    }
}

/// Source position of output index `t` when linearly mapping `target` points onto `source`.
pub(crate) fn interp_position(t: usize, target: usize, source: usize) -> (usize, usize, f64) {
    if source == 1 || target == 1 {
        return (0, 0, 0.0);
    }
    let pos = t as f64 * (source - 1) as f64 / (target - 1) as f64;
    let lo = (pos.floor() as usize).min(source - 1);
    let hi = (lo + 1).min(source - 1);
    (lo, hi, pos - lo as f64)
}
