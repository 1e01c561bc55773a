//! The canonical map into the Grassmannian of k-planes and everything pulled
//! back through it: metric, connection, semiconnection, curvature, tension.
//!
//! All formulas are assembled from the orthonormalized evaluation matrix
//! S(x) (k x N), the frame Gram R = S S^+, and the span projector
//! M = S^+ R^{-1} S. Identities used throughout, exact in floating point up
//! to rounding: S (1-M) = 0, M S^+ = S^+, (D^{pull} S) S^+ = 0.

use num_complex::Complex64;

use crate::cmat;
use crate::error::{CanonError, Result};
use crate::field::{MatField, ScalarField};
use crate::geometry::{ConnectionField, MetricField, Scheme, TwoFormEndo};
use crate::grid::Grid;
use crate::sections::{orthonormalize, SectionFamily, ADMISSIBLE_TOL};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Canonical-map data: the orthonormal lift S, the frame Gram R = S S^+ and
/// its inverse, all pointwise.
#[derive(Debug, Clone)]
pub struct GrassmannField {
    pub family: SectionFamily,
    pub r: MatField,
    pub rinv: MatField,
}

impl GrassmannField {
    pub fn grid(&self) -> Grid {
        self.family.grid()
    }

    pub fn k(&self) -> usize {
        self.family.k()
    }

    pub fn n_sections(&self) -> usize {
        self.family.n_sections()
    }

    /// Grassmann point as the N x N projector V_{ab} = <s_a, Pi^{-1} s_b>.
    pub fn v_block(&self, p: usize, out: &mut [Complex64]) {
        let k = self.k();
        let n = self.n_sections();
        let s = self.family.mat.block(p);
        let mut rs = vec![Complex64::default(); k * n];
        cmat::mul(self.rinv.block(p), s, &mut rs, k, k, n);
        // M = S^+ R^{-1} S, V = M^T
        let mut m = vec![Complex64::default(); n * n];
        cmat::mul_adjoint_left(s, &rs, &mut m, k, n, n);
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] = m[b * n + a];
            }
        }
    }

    /// Unnormalized positive-semidefinite lift of rank k, in the same index
    /// convention as `v_block`, so V . lift = lift pointwise.
    pub fn lift_block(&self, p: usize, out: &mut [Complex64]) {
        let k = self.k();
        let n = self.n_sections();
        let s = self.family.mat.block(p);
        let mut m = vec![Complex64::default(); n * n];
        cmat::mul_adjoint_left(s, s, &mut m, k, n, n);
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] = m[b * n + a];
            }
        }
    }

    /// Worst-case defects of the projector field over all points:
    /// Hermiticity, idempotence, trace - k, V.(lift) - lift, and the
    /// distance of eigenvalues from {0,1}.
    pub fn projector_defects(&self) -> ProjectorDefects {
        let g = self.grid();
        let n = self.n_sections();
        let k = self.k();
        let mut d = ProjectorDefects::default();
        let mut v = vec![Complex64::default(); n * n];
        let mut vv = vec![Complex64::default(); n * n];
        let mut lift = vec![Complex64::default(); n * n];
        let mut vl = vec![Complex64::default(); n * n];
        for p in 0..g.points() {
            self.v_block(p, &mut v);
            for a in 0..n {
                for b in 0..n {
                    d.hermiticity = d.hermiticity.max((v[a * n + b] - v[b * n + a].conj()).norm());
                }
            }
            cmat::mul(&v, &v, &mut vv, n, n, n);
            for i in 0..n * n {
                d.idempotence = d.idempotence.max((vv[i] - v[i]).norm());
            }
            d.trace = d.trace.max((cmat::trace(&v, n) - k as f64).norm());
            self.lift_block(p, &mut lift);
            cmat::mul(&v, &lift, &mut vl, n, n, n);
            for i in 0..n * n {
                d.lift = d.lift.max((vl[i] - lift[i]).norm());
            }
            let ev = cmat::herm_eigen(&v, n, None);
            for (j, &e) in ev.iter().enumerate() {
                let want = if j >= n - k { 1.0 } else { 0.0 };
                d.eigenvalues = d.eigenvalues.max((e - want).abs());
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectorDefects {
    pub hermiticity: f64,
    pub idempotence: f64,
    pub trace: f64,
    pub lift: f64,
    pub eigenvalues: f64,
}

/// Builds the canonical-map data for an orthonormal admissible family.
pub fn canonical_map(h: &MetricField, fam: &SectionFamily) -> Result<GrassmannField> {
    let g = fam.grid();
    let k = fam.k();
    let n = fam.n_sections();
    if h.k() != k {
        return Err(CanonError::Shape("metric rank mismatch".into()));
    }
    let gram = fam.gram(h)?;
    let mut worst = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let want = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((gram[a * n + b] - want).norm());
        }
    }
    if worst > 1e-6 {
        return Err(CanonError::Invalid(format!(
            "canonical map requires an orthonormal family (Gram deviation {worst:.2e})"
        )));
    }
    let mut r = MatField::zeros(g, k, k);
    let mut rinv = MatField::zeros(g, k, k);
    let mut pi = vec![Complex64::default(); k * k];
    let mut pp = vec![Complex64::default(); k * k];
    let mut min_sv = f64::INFINITY;
    let mut argmin = 0usize;
    for p in 0..g.points() {
        let s = fam.mat.block(p);
        cmat::mul_adjoint_right(s, s, r.block_mut(p), k, n, k);
        // Pi(x,x) = R h; admissibility looks at its smallest singular value
        cmat::mul(r.block(p), h.field.block(p), &mut pi, k, k, k);
        cmat::mul_adjoint_left(&pi, &pi, &mut pp, k, k, k);
        let ev = cmat::herm_eigen(&pp, k, None);
        let sv = ev[0].max(0.0).sqrt();
        if sv < min_sv {
            min_sv = sv;
            argmin = p;
        }
    }
    if min_sv < ADMISSIBLE_TOL {
        return Err(CanonError::NotAdmissible { min_sv, point: argmin });
    }
    for p in 0..g.points() {
        cmat::hpd_inverse(r.block(p), rinv.block_mut(p), k)
            .map_err(|_| CanonError::NotAdmissible { min_sv, point: p })?;
    }
    Ok(GrassmannField { family: fam.clone(), r, rinv })
}

/// Orthonormalizes and builds in one step.
pub fn canonical_map_of(h: &MetricField, fam: &SectionFamily) -> Result<GrassmannField> {
    let on = orthonormalize(fam, h)?;
    canonical_map(h, &on)
}

/// Pullback metric c_H R^{-1}, c_H = N/k.
///
/// Carries its own derivative field, built from the Leibniz derivative of R
/// through covariant derivatives of the lift: d R = (D S) S^+ + S (D S)^+.
/// With the pullback connection this makes the compatibility residual an
/// exact identity rather than a discretization statement.
pub fn pullback_metric(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<MetricField> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let ch = Complex64::new(n as f64 / k as f64, 0.0);
    let mut field = MatField::zeros(g, k, k);
    for p in 0..g.points() {
        let f = field.block_mut(p);
        f.copy_from_slice(gf.rinv.block(p));
        for e in f.iter_mut() {
            *e *= ch;
        }
    }
    // The frame derivative of R uses links only: the ambient correction
    // cancels against the alpha increment in the full pullback correction,
    // which makes the compatibility identity exact for any starting
    // connection.
    let mut bare = conn.clone();
    for mu in 0..g.axes() {
        for p in 0..g.points() {
            for e in bare.correction[mu].block_mut(p) {
                *e = Complex64::default();
            }
        }
    }
    let mut derivative = Vec::with_capacity(g.axes());
    let mut dr = vec![Complex64::default(); k * k];
    let mut t1 = vec![Complex64::default(); k * k];
    let mut t2 = vec![Complex64::default(); k * k];
    for mu in 0..g.axes() {
        let ds = bare.covariant_derivative(&gf.family.mat, mu, scheme)?;
        let mut dh = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            let s = gf.family.mat.block(p);
            let d = ds.block(p);
            // dR = (DS) S^+ + S (DS)^+
            cmat::mul_adjoint_right(d, s, &mut t1, k, n, k);
            dr.copy_from_slice(&t1);
            cmat::mul_adjoint_right(s, d, &mut t1, k, n, k);
            for (o, &a) in dr.iter_mut().zip(t1.iter()) {
                *o += a;
            }
            // dh' = -c_H R^{-1} dR R^{-1}
            cmat::mul(gf.rinv.block(p), &dr, &mut t1, k, k, k);
            cmat::mul(&t1, gf.rinv.block(p), &mut t2, k, k, k);
            for (o, &a) in dh.block_mut(p).iter_mut().zip(t2.iter()) {
                *o = -ch * a;
            }
        }
        derivative.push(dh);
    }
    Ok(MetricField { field, derivative: Some(derivative) })
}

/// Correction increments alpha_mu = -(D_mu S) S^+ R^{-1} for every axis.
fn alpha_fields(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<Vec<MatField>> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let mut out = Vec::with_capacity(g.axes());
    let mut c = vec![Complex64::default(); k * k];
    for mu in 0..g.axes() {
        let ds = conn.covariant_derivative(&gf.family.mat, mu, scheme)?;
        let mut a = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            cmat::mul_adjoint_right(ds.block(p), gf.family.mat.block(p), &mut c, k, n, k);
            cmat::mul(&c, gf.rinv.block(p), a.block_mut(p), k, k, k);
            for e in a.block_mut(p) {
                *e = -*e;
            }
        }
        out.push(a);
    }
    Ok(out)
}

/// Full pullback connection: links unchanged, correction a + alpha.
pub fn pullback_connection(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<ConnectionField> {
    let alphas = alpha_fields(gf, conn, scheme)?;
    let mut out = conn.clone();
    for (mu, a) in alphas.iter().enumerate() {
        out.add_correction(mu, a);
    }
    Ok(out)
}

/// Pullback semiconnection: the dbar part of the update, stored as a pure
/// (0,1) correction on the shared links. The (1,0) part of the output is
/// zero, so the result is identical for any two starting connections on the
/// same bundle.
pub fn pullback_semiconnection(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<ConnectionField> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let mut out = conn.clone();
    for mu in 0..g.axes() {
        for p in 0..g.points() {
            for e in out.correction[mu].block_mut(p) {
                *e = Complex64::default();
            }
        }
    }
    let mut c = vec![Complex64::default(); k * k];
    let mut beta = vec![Complex64::default(); k * k];
    for j in 0..g.m {
        let dbs = conn.dbar(&gf.family.mat, j, scheme)?;
        let a0 = &conn.correction[2 * j];
        let a1 = &conn.correction[2 * j + 1];
        for p in 0..g.points() {
            // beta_j = (a_{2j} + i a_{2j+1})/2 - (dbar_j S) S^+ R^{-1}
            cmat::mul_adjoint_right(dbs.block(p), gf.family.mat.block(p), &mut c, k, n, k);
            cmat::mul(&c, gf.rinv.block(p), &mut beta, k, k, k);
            for ((b, &x0), &x1) in beta.iter_mut().zip(a0.block(p)).zip(a1.block(p)) {
                *b = 0.5 * (x0 + I * x1) - *b;
            }
            // realize as a (0,1) form: a'_{2j} = beta, a'_{2j+1} = -i beta
            for (o, &b) in out.correction[2 * j].block_mut(p).iter_mut().zip(beta.iter()) {
                *o = b;
            }
            for (o, &b) in out.correction[2 * j + 1].block_mut(p).iter_mut().zip(beta.iter()) {
                *o = -I * b;
            }
        }
    }
    Ok(out)
}

/// Closed-form canonical curvatures.
#[derive(Debug, Clone)]
pub struct CanonicalCurvature {
    pub f_can: TwoFormEndo,
    pub f11: TwoFormEndo,
    /// Coefficient of conj(dz1)^conj(dz2); None on T².
    pub f02: Option<MatField>,
    pub f02_l2: f64,
    /// Kähler contraction sum_j F_{2j,2j+1}.
    pub phi: MatField,
    pub degree: f64,
}

struct PairCtx {
    k: usize,
    n: usize,
    ca: Vec<Complex64>,
    cb: Vec<Complex64>,
    t: Vec<Complex64>,
    ab: Vec<Complex64>,
}

impl PairCtx {
    fn new(k: usize, n: usize) -> Self {
        PairCtx {
            k,
            n,
            ca: vec![Complex64::default(); k * k],
            cb: vec![Complex64::default(); k * k],
            t: vec![Complex64::default(); k * k],
            ab: vec![Complex64::default(); k * k],
        }
    }

    /// pair(A,B) = A (1 - M) B^+ = A B^+ - (A S^+) R^{-1} (B S^+)^+
    fn pair(
        &mut self,
        a: &[Complex64],
        b: &[Complex64],
        s: &[Complex64],
        rinv: &[Complex64],
        out: &mut [Complex64],
    ) {
        let (k, n) = (self.k, self.n);
        cmat::mul_adjoint_right(a, b, &mut self.ab, k, n, k);
        cmat::mul_adjoint_right(a, s, &mut self.ca, k, n, k);
        cmat::mul_adjoint_right(b, s, &mut self.cb, k, n, k);
        cmat::mul(&self.ca, rinv, &mut self.t, k, k, k);
        cmat::mul_adjoint_right(&self.t, &self.cb, out, k, k, k);
        for (o, &x) in out.iter_mut().zip(self.ab.iter()) {
            *o = x - *o;
        }
    }
}

/// Curvature of the pullback connection assembled in closed form from
/// covariant derivatives of the lift; no finite differencing of the induced
/// connection is involved.
pub fn canonical_curvatures(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<CanonicalCurvature> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let axes = g.axes();
    let ds: Vec<MatField> = (0..axes)
        .map(|mu| conn.covariant_derivative(&gf.family.mat, mu, scheme))
        .collect::<Result<_>>()?;
    let mut f_can = TwoFormEndo::zeros(g, k);
    let mut ctx = PairCtx::new(k, n);
    let mut pab = vec![Complex64::default(); k * k];
    let mut pba = vec![Complex64::default(); k * k];
    let mut diff = vec![Complex64::default(); k * k];
    for (idx, &(mu, nu)) in f_can.pairs.clone().iter().enumerate() {
        for p in 0..g.points() {
            let s = gf.family.mat.block(p);
            let rinv = gf.rinv.block(p);
            ctx.pair(ds[mu].block(p), ds[nu].block(p), s, rinv, &mut pab);
            ctx.pair(ds[nu].block(p), ds[mu].block(p), s, rinv, &mut pba);
            for (d, (&a, &b)) in diff.iter_mut().zip(pab.iter().zip(pba.iter())) {
                *d = a - b;
            }
            cmat::mul(&diff, rinv, f_can.comps[idx].block_mut(p), k, k, k);
        }
    }
    // phi and degree
    let mut phi = MatField::zeros(g, k, k);
    for j in 0..g.m {
        let (idx, _) = f_can.pair_index(2 * j, 2 * j + 1).unwrap();
        for p in 0..g.points() {
            for (o, &a) in phi.block_mut(p).iter_mut().zip(f_can.comps[idx].block(p)) {
                *o += a;
            }
        }
    }
    let mut trphi = Complex64::default();
    for p in 0..g.points() {
        trphi += cmat::trace(phi.block(p), k);
    }
    trphi *= g.weight();
    let degree = (I / (2.0 * std::f64::consts::PI) * trphi).re;
    // (0,2) component from the displayed formula: only dbar derivatives
    let (f02, f02_l2) = if g.m == 2 {
        let db0 = conn.dbar(&gf.family.mat, 0, scheme)?;
        let db1 = conn.dbar(&gf.family.mat, 1, scheme)?;
        let mut f = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            let s = gf.family.mat.block(p);
            let rinv = gf.rinv.block(p);
            ctx.pair(db0.block(p), db1.block(p), s, rinv, &mut pab);
            ctx.pair(db1.block(p), db0.block(p), s, rinv, &mut pba);
            for (d, (&a, &b)) in diff.iter_mut().zip(pab.iter().zip(pba.iter())) {
                *d = a - b;
            }
            cmat::mul(&diff, rinv, f.block_mut(p), k, k, k);
        }
        let l2 = f.l2_norm();
        (Some(f), l2)
    } else {
        (None, 0.0)
    };
    let (_, f11, _) = crate::geometry::type_decompose(&f_can);
    Ok(CanonicalCurvature { f_can, f11, f02, f02_l2, phi, degree })
}

/// Tension of the canonical map and its L2 norm.
///
/// Normal-coordinate formula, valid verbatim on the flat torus: with
/// G_j = coef of the first pullback derivatives and H_j its adjoint-side
/// partner,
///   tau = 2 sum_j (Q G_j G_j + H_j H_j Q) - Q G_jj - H_jj Q,
/// all N x N fields; derivatives of the lift are central and covariant with
/// respect to the family's own pullback connection.
pub fn tension(gf: &GrassmannField, conn: &ConnectionField) -> Result<(MatField, f64)> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let axes = g.axes();
    let pull = pullback_connection(gf, conn, Scheme::Central)?;
    // first pullback derivatives per axis, then the contracted second
    let sj: Vec<MatField> = (0..axes)
        .map(|mu| pull.covariant_derivative(&gf.family.mat, mu, Scheme::Central))
        .collect::<Result<_>>()?;
    let mut sjj = MatField::zeros(g, k, n);
    for (mu, sjm) in sj.iter().enumerate() {
        let d2 = pull.covariant_derivative(sjm, mu, Scheme::Central)?;
        sjj.axpy(Complex64::new(1.0, 0.0), &d2);
    }
    // coef(A)_{ab} = <a-th column of A, Pi^{-1} s_b> = (S^+ R^{-1} A)_{ba}
    let coef = |a: &MatField, p: usize, out: &mut [Complex64], tmp: &mut [Complex64]| {
        cmat::mul(gf.rinv.block(p), a.block(p), tmp, k, k, n);
        let s = gf.family.mat.block(p);
        let mut m = vec![Complex64::default(); n * n];
        cmat::mul_adjoint_left(s, tmp, &mut m, k, n, n);
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = m[c * n + r];
            }
        }
    };
    let mut tau = MatField::zeros(g, n, n);
    let nn = n * n;
    let mut q = vec![Complex64::default(); nn];
    let mut gj = vec![Complex64::default(); nn];
    let mut hj = vec![Complex64::default(); nn];
    let mut gjj = vec![Complex64::default(); nn];
    let mut hjj = vec![Complex64::default(); nn];
    let mut t1 = vec![Complex64::default(); nn];
    let mut t2 = vec![Complex64::default(); nn];
    let mut tmp = vec![Complex64::default(); k * n];
    for p in 0..g.points() {
        gf.v_block(p, &mut q);
        for e in q.iter_mut() {
            *e = -*e;
        }
        for i in 0..n {
            q[i * n + i] += 1.0;
        }
        let tb = tau.block_mut(p);
        for mu in 0..axes {
            coef(&sj[mu], p, &mut gj, &mut tmp);
            // H_j is coef with the derivative on the other slot:
            // H_{ab} = <s_a, Pi^{-1} s_{b;mu}> = conj(G_{ba})
            for r in 0..n {
                for c in 0..n {
                    hj[r * n + c] = gj[c * n + r].conj();
                }
            }
            cmat::mul(&q, &gj, &mut t1, n, n, n);
            cmat::mul(&t1, &gj, &mut t2, n, n, n);
            for (o, &x) in tb.iter_mut().zip(t2.iter()) {
                *o += 2.0 * x;
            }
            cmat::mul(&hj, &hj, &mut t1, n, n, n);
            cmat::mul(&t1, &q, &mut t2, n, n, n);
            for (o, &x) in tb.iter_mut().zip(t2.iter()) {
                *o += 2.0 * x;
            }
        }
        coef(&sjj, p, &mut gjj, &mut tmp);
        for r in 0..n {
            for c in 0..n {
                hjj[r * n + c] = gjj[c * n + r].conj();
            }
        }
        cmat::mul(&q, &gjj, &mut t1, n, n, n);
        cmat::mul(&hjj, &q, &mut t2, n, n, n);
        for ((o, &x), &y) in tb.iter_mut().zip(t1.iter()).zip(t2.iter()) {
            *o -= x + y;
        }
    }
    let res = tau.l2_norm();
    Ok((tau, res))
}

/// E_S of the canonical map, assembled on the Grassmann side: the density is
/// tr(Q W^{(j)}) with W^{(j)}_{ab} = <s_{a;jbar}, s_{b;jbar}>_h.
pub fn projector_energy(
    gf: &GrassmannField,
    h: &MetricField,
    conn: &ConnectionField,
) -> Result<f64> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let mut acc = 0.0f64;
    let mut q = vec![Complex64::default(); n * n];
    let mut w = vec![Complex64::default(); n * n];
    let mut ha = vec![Complex64::default(); k * n];
    let mut aha = vec![Complex64::default(); n * n];
    for j in 0..g.m {
        let db = conn.dbar(&gf.family.mat, j, Scheme::Forward)?;
        for p in 0..g.points() {
            gf.v_block(p, &mut q);
            for e in q.iter_mut() {
                *e = -*e;
            }
            for i in 0..n {
                q[i * n + i] += 1.0;
            }
            let a = db.block(p);
            cmat::mul(h.field.block(p), a, &mut ha, k, k, n);
            cmat::mul_adjoint_left(a, &ha, &mut aha, k, n, n);
            // W = (A^+ h A)^T in the V convention
            for r in 0..n {
                for c in 0..n {
                    w[r * n + c] = aha[c * n + r];
                }
            }
            let mut tr = Complex64::default();
            for r in 0..n {
                for c in 0..n {
                    tr += q[r * n + c] * w[c * n + r];
                }
            }
            acc += tr.re;
        }
    }
    Ok(acc * g.weight())
}

/// Pointwise Cauchy-Schwarz monitor: with the R-symmetrized norms,
/// |F02|^2 <= C e01 e holds with C = k N. Returns the worst ratio over the
/// grid (T² has no (0,2) part, ratio 0).
pub fn curvature_bound_ratio(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<f64> {
    let g = gf.grid();
    if g.m == 1 {
        return Ok(0.0);
    }
    let k = gf.k();
    let n = gf.n_sections();
    let c_const = (k * n) as f64;
    let db: Vec<MatField> = (0..2)
        .map(|j| conn.dbar(&gf.family.mat, j, scheme))
        .collect::<Result<_>>()?;
    let dl: Vec<MatField> = (0..2)
        .map(|j| conn.del(&gf.family.mat, j, scheme))
        .collect::<Result<_>>()?;
    let mut ctx = PairCtx::new(k, n);
    let mut pab = vec![Complex64::default(); k * k];
    let mut pba = vec![Complex64::default(); k * k];
    let mut rsqi = vec![Complex64::default(); k * k];
    let mut t1 = vec![Complex64::default(); k * k];
    let mut t2 = vec![Complex64::default(); k * k];
    let mut worst = 0.0f64;
    // weighted Grassmann density tr((A(1-M)A^+) R^{-1}) per derivative
    let gdens = |a: &[Complex64], s: &[Complex64], rinv: &[Complex64],
                     ctx: &mut PairCtx, buf: &mut [Complex64]| -> f64 {
        ctx.pair(a, a, s, rinv, buf);
        let kk = ctx.k;
        let mut tr = Complex64::default();
        for r in 0..kk {
            for c in 0..kk {
                tr += buf[r * kk + c] * rinv[c * kk + r];
            }
        }
        tr.re
    };
    for p in 0..g.points() {
        let s = gf.family.mat.block(p);
        let rinv = gf.rinv.block(p);
        // R^{-1/2}
        cmat::herm_func(gf.r.block(p), k, |x| 1.0 / x.max(1e-300).sqrt(), &mut rsqi);
        ctx.pair(db[0].block(p), db[1].block(p), s, rinv, &mut pab);
        ctx.pair(db[1].block(p), db[0].block(p), s, rinv, &mut pba);
        for (d, &b) in pab.iter_mut().zip(pba.iter()) {
            *d -= b;
        }
        cmat::mul(&rsqi, &pab, &mut t1, k, k, k);
        cmat::mul(&t1, &rsqi, &mut t2, k, k, k);
        let lhs = cmat::frob_norm_sq(&t2);
        let mut e01 = 0.0;
        let mut e10 = 0.0;
        for j in 0..2 {
            e01 += gdens(db[j].block(p), s, rinv, &mut ctx, &mut t1);
            e10 += gdens(dl[j].block(p), s, rinv, &mut ctx, &mut t1);
        }
        let rhs = c_const * e01 * (e01 + e10);
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        } else if lhs > 1e-24 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

/// Canonical Grassmann energy densities (R-weighted): e01, e10 per point.
pub fn grassmann_densities(
    gf: &GrassmannField,
    conn: &ConnectionField,
    scheme: Scheme,
) -> Result<(ScalarField, ScalarField)> {
    let g = gf.grid();
    let k = gf.k();
    let n = gf.n_sections();
    let mut d01 = ScalarField::zeros(g);
    let mut d10 = ScalarField::zeros(g);
    let mut ctx = PairCtx::new(k, n);
    let mut buf = vec![Complex64::default(); k * k];
    for j in 0..g.m {
        let db = conn.dbar(&gf.family.mat, j, scheme)?;
        let dl = conn.del(&gf.family.mat, j, scheme)?;
        for p in 0..g.points() {
            let s = gf.family.mat.block(p);
            let rinv = gf.rinv.block(p);
            for (a, dst) in [(db.block(p), &mut d01), (dl.block(p), &mut d10)] {
                ctx.pair(a, a, s, rinv, &mut buf);
                let mut tr = Complex64::default();
                for r in 0..k {
                    for c in 0..k {
                        tr += buf[r * k + c] * rinv[c * k + r];
                    }
                }
                dst.data[p] += tr.re;
            }
        }
    }
    Ok((d01, d10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{chern_forms, compatibility_residual, BundleConfig, Twist};
    use crate::rng::{complex_gaussian, rng_from};
    use crate::sections::energies;

    fn flat(g: Grid, k: usize) -> ConnectionField {
        ConnectionField::flat(g, k)
    }

    fn seeded_gf(
        g: Grid,
        k: usize,
        n: usize,
        seed: u64,
        h: &MetricField,
    ) -> (GrassmannField, SectionFamily) {
        let fam = SectionFamily::random_band_limited(g, k, n, 1, seed);
        let on = orthonormalize(&fam, h).unwrap();
        (canonical_map(h, &on).unwrap(), on)
    }

    #[test]
    fn trivial_projector_examples() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        // single constant section
        let fam = SectionFamily::plane_waves(g, &[vec![0, 0]]).unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let mut v = vec![Complex64::default(); 1];
        for p in 0..g.points() {
            gf.v_block(p, &mut v);
            assert!((v[0] - 1.0).norm() < 1e-13);
        }
        // {1, e^{2 pi i x1}}
        let fam2 = SectionFamily::plane_waves(g, &[vec![0, 0], vec![0, 1]]).unwrap();
        let on2 = orthonormalize(&fam2, &h).unwrap();
        let gf2 = canonical_map(&h, &on2).unwrap();
        let mut v2 = vec![Complex64::default(); 4];
        for p in 0..g.points() {
            gf2.v_block(p, &mut v2);
            assert!((v2[0] - 0.5).norm() < 1e-13);
            assert!((v2[3] - 0.5).norm() < 1e-13);
            assert!((v2[1].norm() - 0.5).abs() < 1e-13);
        }
        let d = gf2.projector_defects();
        assert!(d.hermiticity < 1e-12 && d.idempotence < 1e-12 && d.trace < 1e-12);
        // R = 2 pointwise, so the pullback metric is h again
        let pm = pullback_metric(&gf2, &flat(g, 1), Scheme::Forward).unwrap();
        for p in 0..g.points() {
            assert!((pm.field.block(p)[0] - 1.0).norm() < 1e-13);
        }
    }

    #[test]
    fn seeded_projector_defects_within_spec() {
        let g = Grid::new(1, 8).unwrap();
        let mut hfield = MatField::zeros(g, 2, 2);
        let mut r = rng_from(5, 1);
        let mut a = [Complex64::default(); 4];
        for p in 0..g.points() {
            for e in a.iter_mut() {
                *e = complex_gaussian(&mut r) * 0.2;
            }
            let b = hfield.block_mut(p);
            cmat::mul_adjoint_left(&a, &a, b, 2, 2, 2);
            b[0] += 1.0;
            b[3] += 1.0;
        }
        let h = MetricField { field: hfield, derivative: None };
        let (gf, _) = seeded_gf(g, 2, 6, 4, &h);
        let d = gf.projector_defects();
        assert!(d.hermiticity < 1e-12, "herm {}", d.hermiticity);
        assert!(d.idempotence < 1e-10, "idem {}", d.idempotence);
        assert!(d.trace < 1e-10, "trace {}", d.trace);
        assert!(d.lift < 1e-10, "lift {}", d.lift);
        assert!(d.eigenvalues < 1e-9, "eig {}", d.eigenvalues);
    }

    #[test]
    fn pullback_compatibility_is_exact_for_all_schemes() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 2);
        let (gf, _) = seeded_gf(g, 2, 5, 7, &h);
        let mut conn = flat(g, 2);
        // arbitrary ambient correction; the identity is scheme-independent
        let mut r = rng_from(19, 0);
        for mu in 0..2 {
            let mut d = MatField::zeros(g, 2, 2);
            for p in 0..g.points() {
                for e in d.block_mut(p) {
                    *e = complex_gaussian(&mut r) * 0.5;
                }
            }
            conn.add_correction(mu, &d);
        }
        for sch in [Scheme::Forward, Scheme::Central, Scheme::Central4] {
            let pm = pullback_metric(&gf, &conn, sch).unwrap();
            let pc = pullback_connection(&gf, &conn, sch).unwrap();
            let res = compatibility_residual(&pc, &pm);
            assert!(res < 1e-12, "scheme {sch:?} residual {res}");
        }
    }

    #[test]
    fn semiconnection_is_independent_of_the_starting_connection() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let (gf, _) = seeded_gf(g, 1, 4, 11, &h);
        let mut worst = 0.0f64;
        let mut outs = Vec::new();
        for seed in [100u64, 200] {
            let mut conn = flat(g, 1);
            let mut r = rng_from(seed, 0);
            for mu in 0..2 {
                let mut d = MatField::zeros(g, 1, 1);
                for p in 0..g.points() {
                    d.block_mut(p)[0] = complex_gaussian(&mut r);
                }
                conn.add_correction(mu, &d);
            }
            outs.push(pullback_semiconnection(&gf, &conn, Scheme::Forward).unwrap());
        }
        for mu in 0..2 {
            for p in 0..g.points() {
                for (a, b) in outs[0].correction[mu]
                    .block(p)
                    .iter()
                    .zip(outs[1].correction[mu].block(p))
                {
                    worst = worst.max((a - b).norm());
                }
            }
        }
        assert!(worst < 1e-12, "semiconnection depends on A: {worst}");
    }

    #[test]
    fn rank_one_semiconnection_annihilates_its_section() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let fam = SectionFamily::plane_waves(g, &[vec![0, 1]]).unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let conn = flat(g, 1);
        let semi = pullback_semiconnection(&gf, &conn, Scheme::Forward).unwrap();
        let db = semi.dbar(&gf.family.mat, 0, Scheme::Forward).unwrap();
        assert!(db.linf_frobenius() < 1e-12);
    }

    #[test]
    fn balanced_density_identity_pointwise() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let (gf, on) = seeded_gf(g, 1, 4, 23, &h);
        let conn = flat(g, 1);
        let semi = pullback_semiconnection(&gf, &conn, Scheme::Forward).unwrap();
        let rep_new = energies(&on, &h, &semi).unwrap();
        let rep_old = energies(&on, &h, &conn).unwrap();
        let mut worst = 0.0f64;
        for p in 0..g.points() {
            worst = worst.max((rep_new.density01.data[p] - rep_old.density01_g.data[p]).abs());
        }
        assert!(worst < 1e-10, "balanced density identity drift {worst}");
    }

    #[test]
    fn full_connection_dbar_part_matches_semiconnection() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 2);
        let (gf, _) = seeded_gf(g, 2, 5, 31, &h);
        let mut conn = flat(g, 2);
        let mut r = rng_from(77, 0);
        for mu in 0..2 {
            let mut d = MatField::zeros(g, 2, 2);
            for p in 0..g.points() {
                for e in d.block_mut(p) {
                    *e = complex_gaussian(&mut r) * 0.3;
                }
            }
            conn.add_correction(mu, &d);
        }
        let full = pullback_connection(&gf, &conn, Scheme::Forward).unwrap();
        let semi = pullback_semiconnection(&gf, &conn, Scheme::Forward).unwrap();
        // compare dbar coefficients (a_{2j} + i a_{2j+1})/2
        let mut worst = 0.0f64;
        for j in 0..1 {
            for p in 0..g.points() {
                let bf: Vec<Complex64> = full.correction[2 * j]
                    .block(p)
                    .iter()
                    .zip(full.correction[2 * j + 1].block(p))
                    .map(|(&a, &b)| 0.5 * (a + I * b))
                    .collect();
                let bs: Vec<Complex64> = semi.correction[2 * j]
                    .block(p)
                    .iter()
                    .zip(semi.correction[2 * j + 1].block(p))
                    .map(|(&a, &b)| 0.5 * (a + I * b))
                    .collect();
                for (a, b) in bf.iter().zip(&bs) {
                    worst = worst.max((a - b).norm());
                }
            }
        }
        assert!(worst < 1e-14, "semisame drift {worst}");
    }

    #[test]
    fn parallel_family_leaves_connection_unchanged() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let fam = SectionFamily::plane_waves(g, &[vec![0, 0]]).unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let conn = flat(g, 1);
        let pc = pullback_connection(&gf, &conn, Scheme::Forward).unwrap();
        for mu in 0..2 {
            assert!(pc.correction[mu].linf_frobenius() < 1e-13);
        }
    }

    #[test]
    fn canonical_curvature_matches_fd_curvature_at_second_order() {
        let mut errs = Vec::new();
        for n in [16usize, 32] {
            let g = Grid::new(1, n).unwrap();
            let h = MetricField::identity(g, 1);
            let conn = flat(g, 1);
            let mut tot = 0.0;
            for seed in 0..2u64 {
                let (gf, _) = seeded_gf(g, 1, 4, 1000 + seed, &h);
                let cc = canonical_curvatures(&gf, &conn, Scheme::Central).unwrap();
                let pc = pullback_connection(&gf, &conn, Scheme::Central).unwrap();
                let ffd = pc.curvature().unwrap();
                let (_, fd01) = ffd.comp(0, 1);
                let (_, can01) = cc.f_can.comp(0, 1);
                let mut dsq = 0.0;
                for p in 0..g.points() {
                    dsq += (can01.block(p)[0] - fd01.block(p)[0]).norm_sqr();
                }
                tot += (dsq * g.weight()).sqrt();
            }
            errs.push(tot / 2.0);
        }
        let ratio = errs[0] / errs[1];
        assert!((3.2..=4.8).contains(&ratio), "rate {ratio}, errs {errs:?}");
    }

    #[test]
    fn degree_of_canonical_curvature_is_near_zero_untwisted() {
        let g = Grid::new(1, 16).unwrap();
        let h = MetricField::identity(g, 1);
        let (gf, _) = seeded_gf(g, 1, 4, 3, &h);
        let cc = canonical_curvatures(&gf, &flat(g, 1), Scheme::Central).unwrap();
        assert!(cc.degree.abs() < 0.05, "degree {}", cc.degree);
        // fd route telescopes exactly
        let pc = pullback_connection(&gf, &flat(g, 1), Scheme::Central).unwrap();
        let deg_fd = chern_forms(&pc, 1).unwrap().degree.unwrap();
        assert!(deg_fd.abs() < 1e-10, "fd degree {deg_fd}");
    }

    #[test]
    fn tension_constant_family_vanishes() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let fam = SectionFamily::plane_waves(g, &[vec![0, 0]]).unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let (_, res) = tension(&gf, &flat(g, 1)).unwrap();
        assert!(res < 1e-12, "constant-map tension {res}");
    }

    #[test]
    fn tension_balanced_vehicle_matches_closed_form() {
        for n in [16usize, 32] {
            let g = Grid::new(1, n).unwrap();
            let h = MetricField::identity(g, 1);
            let fam = SectionFamily::plane_waves(
                g,
                &[vec![5, 0], vec![3, 4], vec![-5, 0], vec![-3, -4]],
            )
            .unwrap();
            let on = orthonormalize(&fam, &h).unwrap();
            let gf = canonical_map(&h, &on).unwrap();
            let (_, res) = tension(&gf, &flat(g, 1)).unwrap();
            let sq = |q: f64| (n as f64) * (2.0 * std::f64::consts::PI * q / n as f64).sin();
            let want = (sq(5.0).powi(2) - sq(3.0).powi(2) - sq(4.0).powi(2)).abs()
                / 2.0f64.sqrt();
            assert!(
                (res - want).abs() < 1e-4 * want,
                "n={n}: tension {res} vs closed form {want}"
            );
        }
    }

    #[test]
    fn tension_first_excited_eigenspace_vanishes_and_seeded_does_not() {
        let g = Grid::new(1, 16).unwrap();
        let h = MetricField::identity(g, 1);
        let fam = SectionFamily::plane_waves(
            g,
            &[vec![1, 0], vec![0, 1], vec![-1, 0], vec![0, -1]],
        )
        .unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let (_, balanced) = tension(&gf, &flat(g, 1)).unwrap();
        assert!(balanced < 1e-9, "balanced residual {balanced}");
        let (gf2, _) = seeded_gf(g, 1, 4, 99, &h);
        let (_, seeded) = tension(&gf2, &flat(g, 1)).unwrap();
        assert!(
            seeded > 10.0 * balanced.max(1e-12),
            "seeded {seeded} vs balanced {balanced}"
        );
    }

    #[test]
    fn projector_energy_two_routes_agree() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let conn = flat(g, 1);
        // N = k: zero
        let fam_kk = SectionFamily::random_band_limited(g, 1, 1, 1, 17);
        let on_kk = orthonormalize(&fam_kk, &h).unwrap();
        let gf_kk = canonical_map(&h, &on_kk).unwrap();
        let z = projector_energy(&gf_kk, &h, &conn).unwrap();
        assert!(z.abs() < 1e-12, "N=k energy {z}");
        // two-mode example
        let fam2 = SectionFamily::plane_waves(g, &[vec![0, 0], vec![0, 1]]).unwrap();
        let on2 = orthonormalize(&fam2, &h).unwrap();
        let gf2 = canonical_map(&h, &on2).unwrap();
        let es = projector_energy(&gf2, &h, &conn).unwrap();
        let rep = energies(&on2, &h, &conn).unwrap();
        assert!(
            (es - rep.e01_g).abs() <= 1e-12 * es.max(1.0),
            "{es} vs {}",
            rep.e01_g
        );
        // seeded
        let (gf3, on3) = seeded_gf(g, 1, 4, 40, &h);
        let es3 = projector_energy(&gf3, &h, &conn).unwrap();
        let rep3 = energies(&on3, &h, &conn).unwrap();
        assert!(
            (es3 - rep3.e01_g).abs() <= 1e-10 * es3.max(1e-10),
            "{es3} vs {}",
            rep3.e01_g
        );
    }

    #[test]
    fn curvature_bound_holds_pointwise_on_t4() {
        let g = Grid::new(2, 4).unwrap();
        let h = MetricField::identity(g, 1);
        let (gf, _) = seeded_gf(g, 1, 4, 8, &h);
        let conn = flat(g, 1);
        let worst = curvature_bound_ratio(&gf, &conn, Scheme::Forward).unwrap();
        assert!(worst <= 1.0 + 1e-9, "curvature bound ratio {worst}");
        // k = 2 family
        let h2 = MetricField::identity(g, 2);
        let (gf2, _) = seeded_gf(g, 2, 5, 9, &h2);
        let worst2 = curvature_bound_ratio(&gf2, &conn_k2(g), Scheme::Forward).unwrap();
        assert!(worst2 <= 1.0 + 1e-9, "k=2 curvature bound ratio {worst2}");
    }

    fn conn_k2(g: Grid) -> ConnectionField {
        ConnectionField::flat(g, 2)
    }

    #[test]
    fn f02_vanishes_without_dbar_content() {
        let g = Grid::new(2, 4).unwrap();
        let h = MetricField::identity(g, 1);
        let fam = SectionFamily::plane_waves(g, &[vec![0, 0, 0, 0]]).unwrap();
        let on = orthonormalize(&fam, &h).unwrap();
        let gf = canonical_map(&h, &on).unwrap();
        let cfg = BundleConfig::new(1, 1, Twist::zero(4)).unwrap();
        let conn = ConnectionField::reference(g, &cfg).unwrap();
        let cc = canonical_curvatures(&gf, &conn, Scheme::Forward).unwrap();
        assert!(cc.f02_l2 < 1e-13);
    }

    #[test]
    fn non_admissible_family_is_rejected_with_location() {
        let g = Grid::new(1, 8).unwrap();
        let h = MetricField::identity(g, 1);
        let mut mat = MatField::zeros(g, 1, 2);
        for p in 0..g.points() {
            let x = g.position(p);
            let s = (std::f64::consts::PI * x[0]).sin();
            let ph = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * x[1]);
            mat.block_mut(p)[0] = Complex64::new(s, 0.0);
            mat.block_mut(p)[1] = ph * s;
        }
        let fam = SectionFamily::new(mat);
        let on = orthonormalize(&fam, &h).unwrap();
        let err = canonical_map(&h, &on).unwrap_err();
        match err {
            CanonError::NotAdmissible { min_sv, .. } => assert!(min_sv < ADMISSIBLE_TOL),
            other => panic!("wrong error {other}"),
        }
    }
}
