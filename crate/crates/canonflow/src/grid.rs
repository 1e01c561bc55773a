//! Uniform lattice on the flat unit-volume torus T^{2m}.
//!
//! Axes are 0-based; the complex structure pairs axis 2j with 2j+1
//! (z_j = x_{2j} + i x_{2j+1}). Points sit at x_mu in {0, 1/n, ..., (n-1)/n}
//! and the L2 quadrature weight of every point is n^{-2m}.

use crate::error::{CanonError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    /// Complex dimension; the torus is T^{2m}.
    pub m: usize,
    /// Points per axis.
    pub n: usize,
}

impl Grid {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&m) {
            return Err(CanonError::Invalid(format!("complex dimension m={m}, supported: 1, 2")));
        }
        if n < 4 {
            return Err(CanonError::Invalid(format!("grid extent n={n}, need n >= 4")));
        }
        Ok(Grid { m, n })
    }

    /// Number of real axes, 2m.
    #[inline]
    pub fn axes(&self) -> usize {
        2 * self.m
    }

    #[inline]
    pub fn points(&self) -> usize {
        self.n.pow(self.axes() as u32)
    }

    /// L2 quadrature weight per point; sums to unit volume.
    #[inline]
    pub fn weight(&self) -> f64 {
        1.0 / self.points() as f64
    }

    /// Lattice spacing.
    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Stride of axis `mu` in the lexicographic point index (axis 0 slowest).
    #[inline]
    pub fn stride(&self, mu: usize) -> usize {
        self.n.pow((self.axes() - 1 - mu) as u32)
    }

    /// Coordinate of point `p` along axis `mu`, in lattice units 0..n.
    #[inline]
    pub fn coord(&self, p: usize, mu: usize) -> usize {
        (p / self.stride(mu)) % self.n
    }

    /// Integer coordinates of point `p`.
    pub fn coords(&self, p: usize) -> Vec<usize> {
        (0..self.axes()).map(|mu| self.coord(p, mu)).collect()
    }

    /// Point index with coordinate `mu` shifted by +1 (periodic).
    #[inline]
    pub fn shift_up(&self, p: usize, mu: usize) -> usize {
        let s = self.stride(mu);
        if self.coord(p, mu) + 1 == self.n {
            p - (self.n - 1) * s
        } else {
            p + s
        }
    }

    /// Point index with coordinate `mu` shifted by -1 (periodic).
    #[inline]
    pub fn shift_down(&self, p: usize, mu: usize) -> usize {
        let s = self.stride(mu);
        if self.coord(p, mu) == 0 {
            p + (self.n - 1) * s
        } else {
            p - s
        }
    }

    /// Real coordinates of point `p` in [0,1)^{2m}.
    pub fn position(&self, p: usize) -> Vec<f64> {
        (0..self.axes()).map(|mu| self.coord(p, mu) as f64 / self.n as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_are_inverse_and_periodic() {
        let g = Grid::new(2, 5).unwrap();
        for p in 0..g.points() {
            for mu in 0..4 {
                assert_eq!(g.shift_down(g.shift_up(p, mu), mu), p);
                let mut q = p;
                for _ in 0..g.n {
                    q = g.shift_up(q, mu);
                }
                assert_eq!(q, p);
            }
        }
    }

    #[test]
    fn strides_cover_all_points() {
        let g = Grid::new(1, 8).unwrap();
        let mut seen = vec![false; g.points()];
        for x0 in 0..8 {
            for x1 in 0..8 {
                seen[x0 * g.stride(0) + x1 * g.stride(1)] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn weight_sums_to_unit_volume() {
        let g = Grid::new(2, 6).unwrap();
        assert!((g.weight() * g.points() as f64 - 1.0).abs() < 1e-15);
    }
}
