//! Fields over the lattice: one small complex matrix block per grid point,
//! stored contiguously in point-major order.

use crate::cmat;
use crate::error::{CanonError, Result};
use crate::grid::Grid;
use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq)]
pub struct MatField {
    pub grid: Grid,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl MatField {
    pub fn zeros(grid: Grid, rows: usize, cols: usize) -> Self {
        let data = vec![cmat::ZERO; grid.points() * rows * cols];
        MatField { grid, rows, cols, data }
    }

    pub fn identity(grid: Grid, k: usize) -> Self {
        let mut f = Self::zeros(grid, k, k);
        for p in 0..grid.points() {
            cmat::set_identity(f.block_mut(p), k);
        }
        f
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn block(&self, p: usize) -> &[Complex64] {
        let l = self.block_len();
        &self.data[p * l..(p + 1) * l]
    }

    #[inline]
    pub fn block_mut(&mut self, p: usize) -> &mut [Complex64] {
        let l = self.block_len();
        &mut self.data[p * l..(p + 1) * l]
    }

    pub fn same_shape(&self, other: &MatField) -> Result<()> {
        if self.grid != other.grid || self.rows != other.rows || self.cols != other.cols {
            return Err(CanonError::Shape(format!(
                "field {}x{} on n={} vs {}x{} on n={}",
                self.rows, self.cols, self.grid.n, other.rows, other.cols, other.grid.n
            )));
        }
        Ok(())
    }

    /// L2 norm: sqrt( w * sum_x |block(x)|_F^2 ).
    pub fn l2_norm(&self) -> f64 {
        (self.grid.weight() * cmat::frob_norm_sq(&self.data)).sqrt()
    }

    pub fn linf_frobenius(&self) -> f64 {
        let l = self.block_len();
        (0..self.grid.points())
            .map(|p| cmat::frob_norm_sq(&self.data[p * l..(p + 1) * l]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn axpy(&mut self, a: Complex64, x: &MatField) {
        debug_assert_eq!(self.data.len(), x.data.len());
        for (s, v) in self.data.iter_mut().zip(x.data.iter()) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: Complex64) {
        for z in self.data.iter_mut() {
            *z *= a;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, data: vec![0.0; grid.points()] }
    }

    /// Volume integral with the uniform quadrature weight.
    pub fn integral(&self) -> f64 {
        self.grid.weight() * self.data.iter().sum::<f64>()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// L^q norm, q = infinity encoded as None.
    pub fn lq_norm(&self, q: Option<f64>) -> f64 {
        match q {
            None => self.data.iter().fold(0.0, |m, &v| m.max(v.abs())),
            Some(q) => {
                let s: f64 = self.data.iter().map(|v| v.abs().powf(q)).sum();
                (self.grid.weight() * s).powf(1.0 / q)
            }
        }
    }
}
