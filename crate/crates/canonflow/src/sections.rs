//! Section families, L2 geometry of the section space, projection
//! diagnostics, and energy functionals.
//!
//! A family is the k x N matrix S(x) whose columns are the sections. All
//! integrals use the uniform quadrature weight and a fixed summation order,
//! so repeated runs agree to the last bit.

use num_complex::Complex64;

use crate::cmat;
use crate::error::{CanonError, Result};
use crate::field::{MatField, ScalarField};
use crate::geometry::{ConnectionField, MetricField, Scheme};
use crate::grid::Grid;
use crate::rng::{complex_gaussian, rng_from};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Scale-free threshold below which the pointwise frame is treated as
/// degenerate when judging admissibility.
pub const ADMISSIBLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SectionFamily {
    pub mat: MatField,
}

impl SectionFamily {
    pub fn new(mat: MatField) -> Self {
        SectionFamily { mat }
    }

    pub fn grid(&self) -> Grid {
        self.mat.grid
    }

    pub fn k(&self) -> usize {
        self.mat.rows
    }

    pub fn n_sections(&self) -> usize {
        self.mat.cols
    }

    /// Independent Gaussian entries; deterministic in (seed, shape).
    pub fn random(grid: Grid, k: usize, n: usize, seed: u64) -> Self {
        let mut r = rng_from(seed, 0x5ec7105);
        let mut mat = MatField::zeros(grid, k, n);
        for p in 0..grid.points() {
            for e in mat.block_mut(p) {
                *e = complex_gaussian(&mut r);
            }
        }
        SectionFamily { mat }
    }

    /// Smooth random family: a Fourier polynomial with modes |q_mu| <= band
    /// and Gaussian coefficients.
    pub fn random_band_limited(grid: Grid, k: usize, n: usize, band: i64, seed: u64) -> Self {
        let mut r = rng_from(seed, 0xba2d);
        let axes = grid.axes();
        let mut modes: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..axes {
            let mut next = Vec::new();
            for m in &modes {
                for q in -band..=band {
                    let mut v = m.clone();
                    v.push(q);
                    next.push(v);
                }
            }
            modes = next;
        }
        let coefs: Vec<Vec<Complex64>> = modes
            .iter()
            .map(|_| (0..k * n).map(|_| complex_gaussian(&mut r)).collect())
            .collect();
        let tp = 2.0 * std::f64::consts::PI;
        let mut mat = MatField::zeros(grid, k, n);
        for p in 0..grid.points() {
            let x = grid.position(p);
            let b = mat.block_mut(p);
            for (m, c) in modes.iter().zip(&coefs) {
                let phase: f64 = m.iter().zip(&x).map(|(&q, &xi)| q as f64 * xi).sum();
                let e = (I * tp * phase).exp();
                for (dst, &cc) in b.iter_mut().zip(c) {
                    *dst += cc * e;
                }
            }
        }
        SectionFamily { mat }
    }

    /// Rank-one pure Fourier modes exp(2 pi i q_a . x); one integer vector of
    /// length 2m per section.
    pub fn plane_waves(grid: Grid, modes: &[Vec<i64>]) -> Result<Self> {
        let axes = grid.axes();
        for m in modes {
            if m.len() != axes {
                return Err(CanonError::Shape(format!(
                    "plane wave mode has {} components, grid has {axes} axes",
                    m.len()
                )));
            }
        }
        let tp = 2.0 * std::f64::consts::PI;
        let mut mat = MatField::zeros(grid, 1, modes.len());
        for p in 0..grid.points() {
            let x = grid.position(p);
            let b = mat.block_mut(p);
            for (a, m) in modes.iter().enumerate() {
                let phase: f64 = m.iter().zip(&x).map(|(&q, &xi)| q as f64 * xi).sum();
                b[a] = (I * tp * phase).exp();
            }
        }
        Ok(SectionFamily { mat })
    }

    /// L2 Gram matrix M_{ab} = Int (S^+ h S)_{ab}; Hermitian positive
    /// semidefinite, N x N row-major.
    pub fn gram(&self, h: &MetricField) -> Result<Vec<Complex64>> {
        let g = self.grid();
        let k = self.k();
        let n = self.n_sections();
        if h.k() != k {
            return Err(CanonError::Shape("metric rank mismatch".into()));
        }
        let w = g.weight();
        let mut acc = vec![Complex64::default(); n * n];
        let mut hs = vec![Complex64::default(); k * n];
        let mut shs = vec![Complex64::default(); n * n];
        for p in 0..g.points() {
            cmat::mul(h.field.block(p), self.mat.block(p), &mut hs, k, k, n);
            cmat::mul_adjoint_left(self.mat.block(p), &hs, &mut shs, k, n, n);
            for (a, &v) in acc.iter_mut().zip(shs.iter()) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= w;
        }
        Ok(acc)
    }

    /// Condition number of the Gram matrix.
    pub fn gram_condition(&self, h: &MetricField) -> Result<f64> {
        let m = self.gram(h)?;
        let ev = cmat::herm_eigen(&m, self.n_sections(), None);
        let lo = ev[0];
        let hi = ev[ev.len() - 1];
        if lo <= 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(hi / lo)
    }
}

/// New family spanning the same space with Gram = identity.
///
/// Errors when the Gram is numerically rank deficient, reporting its
/// smallest eigenvalue.
pub fn orthonormalize(fam: &SectionFamily, h: &MetricField) -> Result<SectionFamily> {
    let n = fam.n_sections();
    let m = fam.gram(h)?;
    // A numerically singular Gram can still clear the Cholesky pivots, so
    // rank deficiency is judged on the eigenvalues.
    let ev = cmat::herm_eigen(&m, n, None);
    if ev[0] <= 1e-12 * ev[n - 1].max(f64::MIN_POSITIVE) {
        return Err(CanonError::Invalid(format!(
            "section family is rank deficient: smallest Gram eigenvalue {:.3e}",
            ev[0]
        )));
    }
    let mut l = m.clone();
    cmat::cholesky(&mut l, n)?;
    // S' = S L^{-+}; equivalently (S'^+) = L^{-1} S^+ blockwise.
    let g = fam.grid();
    let k = fam.k();
    let mut out = MatField::zeros(g, k, n);
    let mut st = vec![Complex64::default(); n * k];
    for p in 0..g.points() {
        cmat::adjoint(fam.mat.block(p), &mut st, k, n);
        cmat::solve_lower(&l, &mut st, n, k);
        cmat::adjoint(&st, out.block_mut(p), n, k);
    }
    Ok(SectionFamily { mat: out })
}

/// Diagonal of the L2-orthogonal projection onto the span of the family:
/// Pi(x,x) = S(x) M^{-1} S(x)^+ h(x), a k x k field.
#[derive(Debug, Clone)]
pub struct ProjectionDiagonal {
    pub field: MatField,
}

impl ProjectionDiagonal {
    pub fn trace_integral(&self) -> Complex64 {
        let g = self.field.grid;
        let k = self.field.rows;
        let mut acc = Complex64::default();
        for p in 0..g.points() {
            acc += cmat::trace(self.field.block(p), k);
        }
        acc * g.weight()
    }

    /// Smallest singular value of Pi(x,x) over all points.
    pub fn min_singular_value(&self) -> f64 {
        let g = self.field.grid;
        let k = self.field.rows;
        let mut worst = f64::INFINITY;
        let mut ata = vec![Complex64::default(); k * k];
        for p in 0..g.points() {
            let b = self.field.block(p);
            cmat::mul_adjoint_left(b, b, &mut ata, k, k, k);
            let ev = cmat::herm_eigen(&ata, k, None);
            worst = worst.min(ev[0].max(0.0).sqrt());
        }
        worst
    }

    /// max_x || Pi(x,x)^{-1} ||_op; infinite when the diagonal degenerates.
    pub fn stability_constant(&self) -> f64 {
        let g = self.field.grid;
        let k = self.field.rows;
        let mut best = 0.0f64;
        let mut ata = vec![Complex64::default(); k * k];
        for p in 0..g.points() {
            let b = self.field.block(p);
            cmat::mul_adjoint_left(b, b, &mut ata, k, k, k);
            let ev = cmat::herm_eigen(&ata, k, None);
            let smin = ev[0].max(0.0).sqrt();
            if smin == 0.0 {
                return f64::INFINITY;
            }
            best = best.max(1.0 / smin);
        }
        best
    }
}

pub fn projection_diagonal(fam: &SectionFamily, h: &MetricField) -> Result<ProjectionDiagonal> {
    let g = fam.grid();
    let k = fam.k();
    let n = fam.n_sections();
    let m = fam.gram(h)?;
    let mut minv = vec![Complex64::default(); n * n];
    cmat::hpd_inverse(&m, &mut minv, n).map_err(|_| {
        let ev = cmat::herm_eigen(&m, n, None);
        CanonError::Invalid(format!(
            "section family is rank deficient: smallest Gram eigenvalue {:.3e}",
            ev[0]
        ))
    })?;
    let mut field = MatField::zeros(g, k, k);
    let mut sm = vec![Complex64::default(); k * n];
    let mut sms = vec![Complex64::default(); k * k];
    for p in 0..g.points() {
        let s = fam.mat.block(p);
        cmat::mul(s, &minv, &mut sm, k, n, n);
        cmat::mul_adjoint_right(&sm, s, &mut sms, k, n, k);
        cmat::mul(&sms, h.field.block(p), field.block_mut(p), k, k, k);
    }
    Ok(ProjectionDiagonal { field })
}

/// Frame health of the family. Non-admissibility is a reported value, not
/// an error: flows inspect it and decide.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AdmissibilityReport {
    pub min_singular_value: f64,
    pub stability_constant: f64,
    pub admissible: bool,
}

use serde::Serialize;

pub fn admissibility(fam: &SectionFamily, h: &MetricField) -> Result<AdmissibilityReport> {
    let pd = projection_diagonal(fam, h)?;
    let min_sv = pd.min_singular_value();
    let stab = pd.stability_constant();
    Ok(AdmissibilityReport {
        min_singular_value: min_sv,
        stability_constant: stab,
        admissible: min_sv >= ADMISSIBLE_TOL,
    })
}

/// Energy functionals of a family, split by holomorphic type and by the
/// component inside/outside the family's own pointwise span.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub e: f64,
    pub e01: f64,
    pub e10: f64,
    /// Part of e01 orthogonal to the family's span (the Grassmann part).
    pub e01_g: f64,
    /// Part of e01 inside the span.
    pub e01_p: f64,
    pub density: ScalarField,
    pub density01: ScalarField,
    pub density01_g: ScalarField,
}

impl EnergyReport {
    /// L^q norm of the total energy density; None is the sup norm.
    pub fn density_lq(&self, q: Option<f64>) -> f64 {
        self.density.lq_norm(q)
    }
}

/// Dirichlet energies with forward covariant derivatives.
///
/// e01 sums |dbar_j s_a|^2_h over complex directions and sections; e10 the
/// del part; e = e01 + e10. The G/P split decomposes the derivative matrix
/// A = dbar_j S against the row space of S(x): the component A (1 - M) with
/// M = S^+ (S S^+)^+ S moves the point on the Grassmannian (the part the
/// canonical map sees), the component A M only recombines the frame. The
/// split is an exact Pythagoras identity since M is a flat Hermitian
/// projector.
pub fn energies(
    fam: &SectionFamily,
    h: &MetricField,
    conn: &ConnectionField,
) -> Result<EnergyReport> {
    let g = fam.grid();
    let k = fam.k();
    let n = fam.n_sections();
    if conn.k != k || h.k() != k {
        return Err(CanonError::Shape("rank mismatch in energies".into()));
    }
    let mut density = ScalarField::zeros(g);
    let mut density01 = ScalarField::zeros(g);
    let mut density01_g = ScalarField::zeros(g);
    let mut hv = vec![Complex64::default(); k * n];
    let mut r = vec![Complex64::default(); k * k];
    let mut rp = vec![Complex64::default(); k * k];
    let mut b = vec![Complex64::default(); k * k];
    let mut hb = vec![Complex64::default(); k * k];
    let mut bhb = vec![Complex64::default(); k * k];
    for j in 0..g.m {
        let db = conn.dbar(&fam.mat, j, Scheme::Forward)?;
        let dl = conn.del(&fam.mat, j, Scheme::Forward)?;
        for p in 0..g.points() {
            let hblk = h.field.block(p);
            let s = fam.mat.block(p);
            let dbb = db.block(p);
            let dlb = dl.block(p);
            // |v|^2_h summed over columns
            cmat::mul(hblk, dbb, &mut hv, k, k, n);
            let q01: f64 = dbb
                .iter()
                .zip(hv.iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum();
            cmat::mul(hblk, dlb, &mut hv, k, k, n);
            let q10: f64 = dlb
                .iter()
                .zip(hv.iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum();
            // frame-recombination part: tr(B^+ h B R^+), B = A S^+, R = S S^+
            cmat::mul_adjoint_right(s, s, &mut r, k, n, k);
            cmat::herm_pseudo_inverse(&r, k, 1e-13, &mut rp);
            cmat::mul_adjoint_right(dbb, s, &mut b, k, n, k);
            cmat::mul(hblk, &b, &mut hb, k, k, k);
            cmat::mul_adjoint_left(&b, &hb, &mut bhb, k, k, k);
            let mut qp = 0.0;
            for rr in 0..k {
                for cc in 0..k {
                    qp += (bhb[rr * k + cc] * rp[cc * k + rr]).re;
                }
            }
            density01.data[p] += q01;
            density01_g.data[p] += q01 - qp;
            density.data[p] += q01 + q10;
        }
    }
    let e01 = density01.integral();
    let e01_g = density01_g.integral();
    let e = density.integral();
    Ok(EnergyReport {
        e,
        e01,
        e10: e - e01,
        e01_g,
        e01_p: e01 - e01_g,
        density,
        density01,
        density01_g,
    })
}
