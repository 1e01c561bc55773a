//! Dense kernels for the small complex matrices that live at each grid point
//! (fiber blocks k x k, section blocks k x N; k and N stay in single digits).
//! Row-major slices, no per-call allocation on the hot paths.

use crate::error::{CanonError, Result};
use num_complex::Complex64;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// out = a (r x s) * b (s x c)
#[inline]
pub fn mul(a: &[Complex64], b: &[Complex64], out: &mut [Complex64], r: usize, s: usize, c: usize) {
    debug_assert_eq!(a.len(), r * s);
    debug_assert_eq!(b.len(), s * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            let mut acc = ZERO;
            for l in 0..s {
                acc += a[i * s + l] * b[l * c + j];
            }
            out[i * c + j] = acc;
        }
    }
}

/// out = a^dag (s x r becomes r x s input) * b; a is s x r, b is s x c, out r x c.
#[inline]
pub fn mul_adjoint_left(a: &[Complex64], b: &[Complex64], out: &mut [Complex64], s: usize, r: usize, c: usize) {
    debug_assert_eq!(a.len(), s * r);
    debug_assert_eq!(b.len(), s * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            let mut acc = ZERO;
            for l in 0..s {
                acc += a[l * r + i].conj() * b[l * c + j];
            }
            out[i * c + j] = acc;
        }
    }
}

/// out = a * b^dag; a is r x s, b is c x s, out r x c.
#[inline]
pub fn mul_adjoint_right(a: &[Complex64], b: &[Complex64], out: &mut [Complex64], r: usize, s: usize, c: usize) {
    debug_assert_eq!(a.len(), r * s);
    debug_assert_eq!(b.len(), c * s);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            let mut acc = ZERO;
            for l in 0..s {
                acc += a[i * s + l] * b[j * s + l].conj();
            }
            out[i * c + j] = acc;
        }
    }
}

#[inline]
pub fn adjoint(a: &[Complex64], out: &mut [Complex64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j].conj();
        }
    }
}

#[inline]
pub fn trace(a: &[Complex64], k: usize) -> Complex64 {
    (0..k).map(|i| a[i * k + i]).sum()
}

#[inline]
pub fn frob_norm_sq(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

#[inline]
pub fn set_identity(a: &mut [Complex64], k: usize) {
    a.fill(ZERO);
    for i in 0..k {
        a[i * k + i] = ONE;
    }
}

/// In-place lower Cholesky factor of a Hermitian positive definite k x k matrix.
/// The strict upper triangle is zeroed.
pub fn cholesky(a: &mut [Complex64], k: usize) -> Result<()> {
    for j in 0..k {
        let mut d = a[j * k + j].re;
        for l in 0..j {
            d -= a[j * k + l].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(CanonError::NotPositiveDefinite { pivot: d, index: j });
        }
        let d = d.sqrt();
        a[j * k + j] = Complex64::new(d, 0.0);
        for i in (j + 1)..k {
            let mut acc = a[i * k + j];
            for l in 0..j {
                acc -= a[i * k + l] * a[j * k + l].conj();
            }
            a[i * k + j] = acc / d;
        }
        for i in 0..j {
            a[i * k + j] = ZERO;
        }
    }
    Ok(())
}

/// Solves L x = b in place for lower-triangular L (forward substitution),
/// with b holding `c` columns.
pub fn solve_lower(l: &[Complex64], b: &mut [Complex64], k: usize, c: usize) {
    for i in 0..k {
        for j in 0..c {
            let mut acc = b[i * c + j];
            for p in 0..i {
                acc -= l[i * k + p] * b[p * c + j];
            }
            b[i * c + j] = acc / l[i * k + i];
        }
    }
}

/// Solves L^dag x = b in place (back substitution).
pub fn solve_lower_adjoint(l: &[Complex64], b: &mut [Complex64], k: usize, c: usize) {
    for i in (0..k).rev() {
        for j in 0..c {
            let mut acc = b[i * c + j];
            for p in (i + 1)..k {
                acc -= l[p * k + i].conj() * b[p * c + j];
            }
            b[i * c + j] = acc / l[i * k + i];
        }
    }
}

/// Inverse of a Hermitian positive definite matrix via Cholesky.
pub fn hpd_inverse(a: &[Complex64], out: &mut [Complex64], k: usize) -> Result<()> {
    let mut l = a.to_vec();
    cholesky(&mut l, k)?;
    set_identity(out, k);
    solve_lower(&l, out, k, k);
    solve_lower_adjoint(&l, out, k, k);
    Ok(())
}

/// Moore-Penrose inverse of a Hermitian PSD matrix; eigenvalues below
/// rcond * lambda_max are treated as zero.
pub fn herm_pseudo_inverse(a: &[Complex64], k: usize, rcond: f64, out: &mut [Complex64]) {
    let mut vecs = vec![ZERO; k * k];
    let ev = herm_eigen(a, k, Some(&mut vecs));
    let cut = ev[k - 1].max(0.0) * rcond;
    for e in out.iter_mut() {
        *e = ZERO;
    }
    for j in 0..k {
        if ev[j] <= cut || ev[j] <= 0.0 {
            continue;
        }
        let inv = 1.0 / ev[j];
        for r in 0..k {
            for c in 0..k {
                out[r * k + c] += vecs[r * k + j] * vecs[c * k + j].conj() * inv;
            }
        }
    }
}

/// Inverse of a general k x k matrix by Gauss-Jordan with partial pivoting.
pub fn inverse(a: &[Complex64], out: &mut [Complex64], k: usize) -> Result<()> {
    let mut m = a.to_vec();
    set_identity(out, k);
    for col in 0..k {
        let mut piv = col;
        let mut best = m[col * k + col].norm();
        for r in col + 1..k {
            let v = m[r * k + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(CanonError::Invalid("singular matrix in inverse".into()));
        }
        if piv != col {
            for j in 0..k {
                m.swap(col * k + j, piv * k + j);
                out.swap(col * k + j, piv * k + j);
            }
        }
        let d = m[col * k + col];
        for j in 0..k {
            m[col * k + j] /= d;
            out[col * k + j] /= d;
        }
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = m[r * k + col];
            if f.norm() == 0.0 {
                continue;
            }
            for j in 0..k {
                let mc = m[col * k + j];
                let oc = out[col * k + j];
                m[r * k + j] -= f * mc;
                out[r * k + j] -= f * oc;
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a Hermitian k x k matrix by cyclic Jacobi rotations.
/// Returns ascending eigenvalues; `vecs` (if given) receives eigencolumns.
pub fn herm_eigen(a: &[Complex64], k: usize, mut vecs: Option<&mut [Complex64]>) -> Vec<f64> {
    let mut m = a.to_vec();
    if let Some(v) = vecs.as_deref_mut() {
        set_identity(v, k);
    }
    if k == 1 {
        return vec![m[0].re];
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                off += m[i * k + j].norm_sqr();
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = m[p * k + q];
                if apq.norm_sqr() < 1e-36 {
                    continue;
                }
                // Unitary 2x2 rotation annihilating the (p,q) entry:
                // first strip the phase of a_pq, then a real Jacobi rotation.
                let app = m[p * k + p].re;
                let aqq = m[q * k + q].re;
                let abs = apq.norm();
                let phase = apq / abs;
                let theta = 0.5 * (2.0 * abs).atan2(app - aqq);
                let (c, s) = (theta.cos(), theta.sin());
                let cp = Complex64::new(c, 0.0);
                let sp = phase * s;
                // G has columns p,q: [c, -conj(phase) s; phase s, c] acting on the right as m G
                for i in 0..k {
                    let mip = m[i * k + p];
                    let miq = m[i * k + q];
                    m[i * k + p] = mip * cp + miq * sp.conj();
                    m[i * k + q] = -mip * sp + miq * cp;
                }
                for j in 0..k {
                    let mpj = m[p * k + j];
                    let mqj = m[q * k + j];
                    m[p * k + j] = cp * mpj + sp * mqj;
                    m[q * k + j] = -sp.conj() * mpj + cp * mqj;
                }
                if let Some(v) = vecs.as_deref_mut() {
                    for i in 0..k {
                        let vip = v[i * k + p];
                        let viq = v[i * k + q];
                        v[i * k + p] = vip * cp + viq * sp.conj();
                        v[i * k + q] = -vip * sp + viq * cp;
                    }
                }
            }
        }
    }
    let mut vals: Vec<(f64, usize)> = (0..k).map(|i| (m[i * k + i].re, i)).collect();
    vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if let Some(v) = vecs {
        let old = v.to_vec();
        for (newcol, &(_, oldcol)) in vals.iter().enumerate() {
            for i in 0..k {
                v[i * k + newcol] = old[i * k + oldcol];
            }
        }
    }
    vals.into_iter().map(|(w, _)| w).collect()
}

/// f(A) for Hermitian A via eigendecomposition.
pub fn herm_func(a: &[Complex64], k: usize, f: impl Fn(f64) -> f64, out: &mut [Complex64]) {
    let mut v = vec![ZERO; k * k];
    let w = herm_eigen(a, k, Some(&mut v));
    out.fill(ZERO);
    for l in 0..k {
        let fw = f(w[l]);
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] += Complex64::new(fw, 0.0) * v[i * k + l] * v[j * k + l].conj();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randomish_hpd(k: usize, seed: u64) -> Vec<Complex64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s as f64 / u64::MAX as f64) - 0.5
        };
        let mut b = vec![ZERO; k * k];
        for z in b.iter_mut() {
            *z = Complex64::new(next(), next());
        }
        let mut out = vec![ZERO; k * k];
        mul_adjoint_right(&b, &b, &mut out, k, k, k);
        for i in 0..k {
            out[i * k + i] += Complex64::new(0.5, 0.0);
        }
        out
    }

    #[test]
    fn cholesky_reconstructs() {
        for k in 1..=5 {
            let a = randomish_hpd(k, k as u64);
            let mut l = a.clone();
            cholesky(&mut l, k).unwrap();
            let mut rec = vec![ZERO; k * k];
            mul_adjoint_right(&l, &l, &mut rec, k, k, k);
            for i in 0..k * k {
                assert!((rec[i] - a[i]).norm() < 1e-12, "k={k} entry {i}");
            }
        }
    }

    #[test]
    fn hpd_inverse_is_inverse() {
        for k in 1..=5 {
            let a = randomish_hpd(k, 10 + k as u64);
            let mut inv = vec![ZERO; k * k];
            hpd_inverse(&a, &mut inv, k).unwrap();
            let mut id = vec![ZERO; k * k];
            mul(&a, &inv, &mut id, k, k, k);
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { ONE } else { ZERO };
                    assert!((id[i * k + j] - want).norm() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn jacobi_eigen_matches_characteristic_values() {
        // Known 2x2: [[2, i], [-i, 2]] has eigenvalues 1 and 3.
        let a = vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(2.0, 0.0),
        ];
        let mut v = vec![ZERO; 4];
        let w = herm_eigen(&a, 2, Some(&mut v));
        assert!((w[0] - 1.0).abs() < 1e-13 && (w[1] - 3.0).abs() < 1e-13);
        // Residual A v = w v per column.
        for col in 0..2 {
            for row in 0..2 {
                let av: Complex64 = (0..2).map(|l| a[row * 2 + l] * v[l * 2 + col]).sum();
                assert!((av - v[row * 2 + col] * w[col]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_eigen_random_residuals() {
        for k in 2..=6 {
            let a = randomish_hpd(k, 77 + k as u64);
            let mut v = vec![ZERO; k * k];
            let w = herm_eigen(&a, k, Some(&mut v));
            for col in 0..k {
                for row in 0..k {
                    let av: Complex64 = (0..k).map(|l| a[row * k + l] * v[l * k + col]).sum();
                    assert!((av - v[row * k + col] * w[col]).norm() < 1e-10);
                }
            }
            for c1 in 0..k {
                for c2 in 0..k {
                    let dot: Complex64 = (0..k).map(|l| v[l * k + c1].conj() * v[l * k + c2]).sum();
                    let want = if c1 == c2 { ONE } else { ZERO };
                    assert!((dot - want).norm() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn herm_func_inverse_sqrt() {
        let a = randomish_hpd(3, 5);
        let mut ism = vec![ZERO; 9];
        herm_func(&a, 3, |w| 1.0 / w.sqrt(), &mut ism);
        // ism * a * ism = identity
        let mut t = vec![ZERO; 9];
        let mut r = vec![ZERO; 9];
        mul(&ism, &a, &mut t, 3, 3, 3);
        mul(&t, &ism, &mut r, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { ONE } else { ZERO };
                assert!((r[i * 3 + j] - want).norm() < 1e-11);
            }
        }
    }
}
