//! Bundle topology, connections, curvature, Chern forms, and gauge action
//! on the discrete torus.
//!
//! Topology enters through link phases on lattice edges (factor of
//! automorphy); everything dynamical is a pointwise k x k correction field
//! riding on top. Reference plaquettes are scalar matrices, so they commute
//! with every gauge transformation and the topological content of the
//! curvature is exact, not approximate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cmat;
use crate::error::{CanonError, Result};
use crate::field::MatField;
use crate::grid::Grid;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Antisymmetric integer twist matrix c_{mu nu} fixing the topological type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Twist {
    axes: usize,
    /// Row-major axes x axes entries.
    c: Vec<i64>,
}

impl Twist {
    pub fn zero(axes: usize) -> Self {
        Twist { axes, c: vec![0; axes * axes] }
    }

    pub fn new(axes: usize, entries: Vec<i64>) -> Result<Self> {
        if entries.len() != axes * axes {
            return Err(CanonError::Shape(format!(
                "twist matrix needs {} entries, got {}",
                axes * axes,
                entries.len()
            )));
        }
        let t = Twist { axes, c: entries };
        for mu in 0..axes {
            for nu in 0..axes {
                if t.get(mu, nu) != -t.get(nu, mu) {
                    return Err(CanonError::Invalid(format!(
                        "twist matrix not antisymmetric at ({mu},{nu})"
                    )));
                }
            }
        }
        Ok(t)
    }

    /// Twist with a single excited axis pair (and its antisymmetric partner).
    pub fn single(axes: usize, mu: usize, nu: usize, c: i64) -> Result<Self> {
        if mu >= axes || nu >= axes || mu == nu {
            return Err(CanonError::Invalid(format!("bad twist axes ({mu},{nu})")));
        }
        let mut t = Twist::zero(axes);
        t.c[mu * axes + nu] = c;
        t.c[nu * axes + mu] = -c;
        Ok(t)
    }

    #[inline]
    pub fn get(&self, mu: usize, nu: usize) -> i64 {
        self.c[mu * self.axes + nu]
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|&v| v == 0)
    }

    /// Ordered pairs mu < nu with a nonzero entry.
    pub fn excited_pairs(&self) -> Vec<(usize, usize, i64)> {
        let mut out = Vec::new();
        for mu in 0..self.axes {
            for nu in mu + 1..self.axes {
                if self.get(mu, nu) != 0 {
                    out.push((mu, nu, self.get(mu, nu)));
                }
            }
        }
        out
    }
}

/// Bundle rank, twist, and the dimension N of the section space H.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub k: usize,
    pub n_sections: usize,
    pub twist: Twist,
}

impl BundleConfig {
    pub fn new(k: usize, n_sections: usize, twist: Twist) -> Result<Self> {
        if k == 0 {
            return Err(CanonError::Invalid("bundle rank k = 0".into()));
        }
        if n_sections == 0 {
            return Err(CanonError::Invalid("section space dimension N = 0".into()));
        }
        Ok(BundleConfig { k, n_sections, twist })
    }
}

/// Difference scheme for covariant derivatives.
///
/// Forward differences have exact summation-by-parts adjoints and feed every
/// energy, Laplacian, and flow update. Central differences are second-order
/// accurate and feed curvature and tension diagnostics; Central4 is the
/// fourth-order central stencil used where diagnostic accuracy must beat the
/// spectral discretization error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Forward,
    Central,
    Central4,
}

/// Discrete Hermitian metric: a k x k Hermitian positive-definite matrix per
/// point. Metrics produced by pullback carry their own derivative field so
/// compatibility can be checked against the derivative the construction
/// actually uses; hand-built metrics fall back to central differences.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub field: MatField,
    pub derivative: Option<Vec<MatField>>,
}

impl MetricField {
    pub fn identity(grid: Grid, k: usize) -> Self {
        MetricField { field: MatField::identity(grid, k), derivative: None }
    }

    pub fn k(&self) -> usize {
        self.field.rows
    }

    pub fn grid(&self) -> Grid {
        self.field.grid
    }

    /// Max pointwise deviation from Hermiticity.
    pub fn hermiticity_defect(&self) -> f64 {
        let k = self.k();
        let mut worst = 0.0f64;
        for p in 0..self.field.grid.points() {
            let b = self.field.block(p);
            for r in 0..k {
                for c in 0..k {
                    let d = (b[r * k + c] - b[c * k + r].conj()).norm();
                    worst = worst.max(d);
                }
            }
        }
        worst
    }

    /// Smallest eigenvalue over all points.
    pub fn min_eigenvalue(&self) -> f64 {
        let k = self.k();
        let mut worst = f64::INFINITY;
        for p in 0..self.field.grid.points() {
            let ev = cmat::herm_eigen(self.field.block(p), k, None);
            worst = worst.min(ev[0]);
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        if self.hermiticity_defect() > 1e-12 {
            return Err(CanonError::Invalid("metric field not Hermitian".into()));
        }
        let lo = self.min_eigenvalue();
        if lo <= 0.0 {
            return Err(CanonError::NotPositiveDefinite { pivot: lo, index: 0 });
        }
        Ok(())
    }
}

/// Connection: unitary transport links per edge plus a pointwise k x k
/// correction 1-form. Links start as the scalar reference phases encoding
/// the twist; gauge transformations conjugate them in place.
#[derive(Debug, Clone)]
pub struct ConnectionField {
    pub grid: Grid,
    pub k: usize,
    twist: Twist,
    /// links[mu] holds the k x k transport on the edge x -> x + e_mu.
    links: Vec<MatField>,
    /// correction[mu] is a_mu(x).
    pub correction: Vec<MatField>,
}

impl ConnectionField {
    pub fn flat(grid: Grid, k: usize) -> Self {
        let axes = grid.axes();
        ConnectionField {
            grid,
            k,
            twist: Twist::zero(axes),
            links: (0..axes).map(|_| MatField::identity(grid, k)).collect(),
            correction: (0..axes).map(|_| MatField::zeros(grid, k, k)).collect(),
        }
    }

    /// Reference connection with constant plaquette curvature
    /// -2 pi i (c_{mu nu}/k) I_k realizing the twist.
    ///
    /// Landau gauge on each excited axis pair: the nu-links carry a phase
    /// growing along mu, and the final mu-layer closes the torus with the
    /// compensating factor of automorphy. Requires k | c so the per-component
    /// flux is an integer (the diagonal construction is single-valued).
    pub fn reference(grid: Grid, cfg: &BundleConfig) -> Result<Self> {
        if cfg.twist.axes() != grid.axes() {
            return Err(CanonError::Shape(format!(
                "twist is {0}x{0} but the grid has {1} axes",
                cfg.twist.axes(),
                grid.axes()
            )));
        }
        let mut conn = ConnectionField::flat(grid, cfg.k);
        conn.twist = cfg.twist.clone();
        let n = grid.n;
        for (mu, nu, c) in cfg.twist.excited_pairs() {
            if c.unsigned_abs() as usize % cfg.k != 0 {
                return Err(CanonError::Config(format!(
                    "twist c_{{{mu}{nu}}} = {c} is not a multiple of the rank k = {}; \
                     the diagonal reference construction needs integer flux per component",
                    cfg.k
                )));
            }
            let phi = -2.0 * std::f64::consts::PI * c as f64 / (cfg.k as f64 * (n * n) as f64);
            for p in 0..grid.points() {
                let xmu = grid.coord(p, mu) as f64;
                let up_nu = (I * phi * xmu).exp();
                scale_block_diag(conn.links[nu].block_mut(p), cfg.k, up_nu);
                if grid.coord(p, mu) == n - 1 {
                    let xnu = grid.coord(p, nu) as f64;
                    let wrap = (-I * phi * n as f64 * xnu).exp();
                    scale_block_diag(conn.links[mu].block_mut(p), cfg.k, wrap);
                }
            }
        }
        Ok(conn)
    }

    pub fn twist(&self) -> &Twist {
        &self.twist
    }

    pub fn link(&self, mu: usize) -> &MatField {
        &self.links[mu]
    }

    /// Adds delta to the correction along axis mu.
    pub fn add_correction(&mut self, mu: usize, delta: &MatField) {
        self.correction[mu].axpy(Complex64::new(1.0, 0.0), delta);
    }

    /// Covariant derivative D_mu s of a section field (k x w blocks).
    pub fn covariant_derivative(&self, s: &MatField, mu: usize, scheme: Scheme) -> Result<MatField> {
        if s.rows != self.k {
            return Err(CanonError::Shape(format!(
                "section field has {} rows, bundle rank is {}",
                s.rows, self.k
            )));
        }
        let g = self.grid;
        let k = self.k;
        let w = s.cols;
        let nf = g.n as f64;
        let mut out = MatField::zeros(g, k, w);
        let link = &self.links[mu];
        let mut tmp = vec![Complex64::default(); k * w];
        let mut tmp2 = vec![Complex64::default(); k * w];
        let mut l2 = vec![Complex64::default(); k * k];
        for p in 0..g.points() {
            let up = g.shift_up(p, mu);
            let ob = out.block_mut(p);
            match scheme {
                Scheme::Forward => {
                    // n (L(x) s(x+e) - s(x))
                    cmat::mul(link.block(p), s.block(up), &mut tmp, k, k, w);
                    for (o, (&t, &b)) in ob.iter_mut().zip(tmp.iter().zip(s.block(p))) {
                        *o = (t - b) * nf;
                    }
                }
                Scheme::Central => {
                    let dn = g.shift_down(p, mu);
                    // (n/2) (L(x) s(x+e) - L(x-e)^+ s(x-e))
                    cmat::mul(link.block(p), s.block(up), &mut tmp, k, k, w);
                    cmat::mul_adjoint_left(link.block(dn), s.block(dn), &mut tmp2, k, k, w);
                    for (o, (&a, &b)) in ob.iter_mut().zip(tmp.iter().zip(tmp2.iter())) {
                        *o = (a - b) * (0.5 * nf);
                    }
                }
                Scheme::Central4 => {
                    let dn = g.shift_down(p, mu);
                    let up2 = g.shift_up(up, mu);
                    let dn2 = g.shift_down(dn, mu);
                    // (n/12) (-T2 s(x+2e) + 8 T1 s(x+e) - 8 T1' s(x-e) + T2' s(x-2e))
                    cmat::mul(link.block(p), s.block(up), &mut tmp, k, k, w);
                    for (o, &t) in ob.iter_mut().zip(tmp.iter()) {
                        *o = t * Complex64::new(8.0, 0.0);
                    }
                    cmat::mul(link.block(p), link.block(up), &mut l2, k, k, k);
                    cmat::mul(&l2, s.block(up2), &mut tmp, k, k, w);
                    for (o, &t) in ob.iter_mut().zip(tmp.iter()) {
                        *o -= t;
                    }
                    cmat::mul_adjoint_left(link.block(dn), s.block(dn), &mut tmp, k, k, w);
                    for (o, &t) in ob.iter_mut().zip(tmp.iter()) {
                        *o -= t * Complex64::new(8.0, 0.0);
                    }
                    cmat::mul(link.block(dn2), link.block(dn), &mut l2, k, k, k);
                    cmat::mul_adjoint_left(&l2, s.block(dn2), &mut tmp, k, k, w);
                    for (o, &t) in ob.iter_mut().zip(tmp.iter()) {
                        *o += t;
                    }
                    for o in ob.iter_mut() {
                        *o *= nf / 12.0;
                    }
                }
            }
            // correction term a_mu(x) s(x)
            cmat::mul(self.correction[mu].block(p), s.block(p), &mut tmp, k, k, w);
            for (o, &t) in ob.iter_mut().zip(tmp.iter()) {
                *o += t;
            }
        }
        Ok(out)
    }

    /// dbar_j = (D_{2j} + i D_{2j+1}) / 2.
    pub fn dbar(&self, s: &MatField, j: usize, scheme: Scheme) -> Result<MatField> {
        let mut a = self.covariant_derivative(s, 2 * j, scheme)?;
        let b = self.covariant_derivative(s, 2 * j + 1, scheme)?;
        a.scale(Complex64::new(0.5, 0.0));
        a.axpy(0.5 * I, &b);
        Ok(a)
    }

    /// del_j = (D_{2j} - i D_{2j+1}) / 2.
    pub fn del(&self, s: &MatField, j: usize, scheme: Scheme) -> Result<MatField> {
        let mut a = self.covariant_derivative(s, 2 * j, scheme)?;
        let b = self.covariant_derivative(s, 2 * j + 1, scheme)?;
        a.scale(Complex64::new(0.5, 0.0));
        a.axpy(-0.5 * I, &b);
        Ok(a)
    }

    /// Plaquette transport around the (mu,nu) face based at x.
    fn plaquette(&self, p: usize, mu: usize, nu: usize, out: &mut [Complex64]) {
        let g = self.grid;
        let k = self.k;
        let up_mu = g.shift_up(p, mu);
        let up_nu = g.shift_up(p, nu);
        let mut t1 = vec![Complex64::default(); k * k];
        let mut t2 = vec![Complex64::default(); k * k];
        // L_mu(x) L_nu(x+e_mu) L_mu(x+e_nu)^+ L_nu(x)^+
        cmat::mul(self.links[mu].block(p), self.links[nu].block(up_mu), &mut t1, k, k, k);
        cmat::mul_adjoint_right(&t1, self.links[mu].block(up_nu), &mut t2, k, k, k);
        cmat::mul_adjoint_right(&t2, self.links[nu].block(p), out, k, k, k);
    }

    /// Curvature two-form: link-plaquette part plus central differences of
    /// the correction plus the commutator.
    ///
    /// The link part is extracted from the plaquette phase, which is exact
    /// for the scalar reference plaquettes this artifact produces (and stays
    /// exact under unitary gauge, since scalars are central in U(k)).
    pub fn curvature(&self) -> Result<TwoFormEndo> {
        let g = self.grid;
        let k = self.k;
        let h2 = g.h() * g.h();
        let mut f = TwoFormEndo::zeros(g, k);
        let mut plaq = vec![Complex64::default(); k * k];
        let mut comm = vec![Complex64::default(); k * k];
        let mut comm2 = vec![Complex64::default(); k * k];
        for (idx, &(mu, nu)) in f.pairs.clone().iter().enumerate() {
            let da_nu = central_diff(&self.correction[nu], mu);
            let da_mu = central_diff(&self.correction[mu], nu);
            for p in 0..g.points() {
                self.plaquette(p, mu, nu, &mut plaq);
                // scalar part of the plaquette: mean diagonal phase
                let tr = cmat::trace(&plaq, k) / k as f64;
                let phase = tr.arg();
                let scalar = Complex64::from_polar(1.0, phase);
                for r in 0..k {
                    for c in 0..k {
                        let def = plaq[r * k + c] - if r == c { scalar } else { Complex64::default() };
                        if def.norm() > 1e-10 {
                            return Err(CanonError::Invalid(format!(
                                "non-scalar plaquette at point {p} pair ({mu},{nu}); \
                                 link curvature extraction undefined"
                            )));
                        }
                    }
                }
                let fref = I * (phase / h2);
                let ob = f.comps[idx].block_mut(p);
                let amu = self.correction[mu].block(p);
                let anu = self.correction[nu].block(p);
                cmat::mul(amu, anu, &mut comm, k, k, k);
                cmat::mul(anu, amu, &mut comm2, k, k, k);
                let d1 = da_nu.block(p);
                let d2 = da_mu.block(p);
                for r in 0..k {
                    for c in 0..k {
                        let i = r * k + c;
                        ob[i] = d1[i] - d2[i] + comm[i] - comm2[i]
                            + if r == c { fref } else { Complex64::default() };
                    }
                }
            }
        }
        Ok(f)
    }
}

fn scale_block_diag(b: &mut [Complex64], k: usize, z: Complex64) {
    for r in 0..k {
        for c in 0..k {
            b[r * k + c] *= z;
        }
    }
}

/// Plain (untransported) central difference of an endomorphism-valued field.
/// End(E) is untwisted for the diagonal reference construction, so no link
/// factors appear.
pub fn central_diff(f: &MatField, mu: usize) -> MatField {
    let g = f.grid;
    let nf = g.n as f64;
    let mut out = MatField::zeros(g, f.rows, f.cols);
    for p in 0..g.points() {
        let up = g.shift_up(p, mu);
        let dn = g.shift_down(p, mu);
        let ob = out.block_mut(p);
        for ((o, &a), &b) in ob.iter_mut().zip(f.block(up)).zip(f.block(dn)) {
            *o = (a - b) * (0.5 * nf);
        }
    }
    out
}

/// Antisymmetric two-form with k x k endomorphism values, stored on the
/// lexicographic pairs mu < nu.
#[derive(Debug, Clone)]
pub struct TwoFormEndo {
    pub grid: Grid,
    pub k: usize,
    pub pairs: Vec<(usize, usize)>,
    pub comps: Vec<MatField>,
}

impl TwoFormEndo {
    pub fn zeros(grid: Grid, k: usize) -> Self {
        let pairs = ordered_pairs(grid.axes());
        let comps = pairs.iter().map(|_| MatField::zeros(grid, k, k)).collect();
        TwoFormEndo { grid, k, pairs, comps }
    }

    pub fn pair_index(&self, mu: usize, nu: usize) -> Option<(usize, f64)> {
        debug_assert!(mu != nu);
        let (a, b, sign) = if mu < nu { (mu, nu, 1.0) } else { (nu, mu, -1.0) };
        self.pairs.iter().position(|&q| q == (a, b)).map(|i| (i, sign))
    }

    /// Component field for the ordered pair; sign accounts for antisymmetry.
    pub fn comp(&self, mu: usize, nu: usize) -> (f64, &MatField) {
        let (i, s) = self.pair_index(mu, nu).expect("axis pair out of range");
        (s, &self.comps[i])
    }

    pub fn l2_norm(&self) -> f64 {
        let w = self.grid.weight();
        let mut acc = 0.0;
        for c in &self.comps {
            // both orientations of each unordered pair contribute
            acc += 2.0 * c.data.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        (acc * w).sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.comps.iter().map(|c| c.linf_frobenius()).fold(0.0, f64::max)
    }

    /// Quadrature integral of tr F_{mu nu} for every stored pair.
    pub fn component_integrals(&self) -> Vec<((usize, usize), Complex64)> {
        let w = self.grid.weight();
        self.pairs
            .iter()
            .zip(&self.comps)
            .map(|(&pr, f)| {
                let mut acc = Complex64::default();
                for p in 0..self.grid.points() {
                    acc += cmat::trace(f.block(p), self.k);
                }
                (pr, acc * w)
            })
            .collect()
    }
}

pub fn ordered_pairs(axes: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for mu in 0..axes {
        for nu in mu + 1..axes {
            v.push((mu, nu));
        }
    }
    v
}

/// Type decomposition of a two-form under the fixed complex structure
/// z_j = x_{2j} + i x_{2j+1}.
///
/// On T^2 every two-form is (1,1). On T^4 the (2,0) and (0,2) spaces are one
/// complex dimension each, spanned by dz1^dz2 and its conjugate.
pub fn type_decompose(f: &TwoFormEndo) -> (TwoFormEndo, TwoFormEndo, TwoFormEndo) {
    let g = f.grid;
    let k = f.k;
    let mut f20 = TwoFormEndo::zeros(g, k);
    let mut f11 = f.clone();
    let mut f02 = TwoFormEndo::zeros(g, k);
    if g.m == 1 {
        return (f20, f11, f02);
    }
    let i02 = f.pair_index(0, 2).unwrap().0;
    let i03 = f.pair_index(0, 3).unwrap().0;
    let i12 = f.pair_index(1, 2).unwrap().0;
    let i13 = f.pair_index(1, 3).unwrap().0;
    for p in 0..g.points() {
        for e in 0..k * k {
            let c02 = f.comps[i02].block(p)[e];
            let c03 = f.comps[i03].block(p)[e];
            let c12 = f.comps[i12].block(p)[e];
            let c13 = f.comps[i13].block(p)[e];
            // coefficients on dz1^dz2 and on conj(dz1)^conj(dz2)
            let chi20 = 0.25 * ((c02 - c13) - I * (c03 + c12));
            let chi02 = 0.25 * ((c02 - c13) + I * (c03 + c12));
            // dz1^dz2   = dx0^dx2 + i dx0^dx3 + i dx1^dx2 - dx1^dx3
            f20.comps[i02].block_mut(p)[e] = chi20;
            f20.comps[i03].block_mut(p)[e] = I * chi20;
            f20.comps[i12].block_mut(p)[e] = I * chi20;
            f20.comps[i13].block_mut(p)[e] = -chi20;
            // conj pattern for (0,2)
            f02.comps[i02].block_mut(p)[e] = chi02;
            f02.comps[i03].block_mut(p)[e] = -I * chi02;
            f02.comps[i12].block_mut(p)[e] = -I * chi02;
            f02.comps[i13].block_mut(p)[e] = -chi02;
            for idx in [i02, i03, i12, i13] {
                let sub = f20.comps[idx].block(p)[e] + f02.comps[idx].block(p)[e];
                f11.comps[idx].block_mut(p)[e] -= sub;
            }
        }
    }
    (f20, f11, f02)
}

/// Chern form data for tr(F^p).
#[derive(Debug, Clone)]
pub struct ChernForms {
    /// Integrals of tr F_{mu nu} per ordered pair (p = 1).
    pub component_integrals: Vec<((usize, usize), Complex64)>,
    /// deg(E) = (i / 2 pi) Int omega^{m-1} ^ tr F, real part.
    pub degree: Option<f64>,
    /// Int tr(F ^ F) for p = 2 on T^4.
    pub p2_integral: Option<Complex64>,
}

/// Lattice Chern-Weil forms of the connection's curvature.
pub fn chern_forms(conn: &ConnectionField, p: usize) -> Result<ChernForms> {
    let g = conn.grid;
    if p > g.m {
        return Err(CanonError::Invalid(format!("chern power p={p} exceeds m={}", g.m)));
    }
    let f = conn.curvature()?;
    let comps = f.component_integrals();
    let mut out = ChernForms { component_integrals: comps.clone(), degree: None, p2_integral: None };
    if p == 1 {
        // omega = sum_j dx_{2j} ^ dx_{2j+1}; the pairing keeps the components
        // on the complex-structure pairs.
        let mut tracef = Complex64::default();
        for j in 0..g.m {
            let pr = (2 * j, 2 * j + 1);
            tracef += comps.iter().find(|(q, _)| *q == pr).unwrap().1;
        }
        out.degree = Some((I / (2.0 * std::f64::consts::PI) * tracef).re);
    }
    if p == 2 {
        let w = g.weight();
        let k = conn.k;
        let (i01, _) = f.pair_index(0, 1).unwrap();
        let (i23, _) = f.pair_index(2, 3).unwrap();
        let (i02, _) = f.pair_index(0, 2).unwrap();
        let (i13, _) = f.pair_index(1, 3).unwrap();
        let (i03, _) = f.pair_index(0, 3).unwrap();
        let (i12, _) = f.pair_index(1, 2).unwrap();
        let mut acc = Complex64::default();
        let mut prod = vec![Complex64::default(); k * k];
        for q in 0..g.points() {
            let mut term = Complex64::default();
            cmat::mul(f.comps[i01].block(q), f.comps[i23].block(q), &mut prod, k, k, k);
            term += cmat::trace(&prod, k);
            cmat::mul(f.comps[i02].block(q), f.comps[i13].block(q), &mut prod, k, k, k);
            term -= cmat::trace(&prod, k);
            cmat::mul(f.comps[i03].block(q), f.comps[i12].block(q), &mut prod, k, k, k);
            term += cmat::trace(&prod, k);
            acc += term * 2.0;
        }
        out.p2_integral = Some(acc * w);
    }
    Ok(out)
}

/// Pointwise invertible gauge transformation.
#[derive(Debug, Clone)]
pub struct GaugeTransform {
    pub field: MatField,
    pub unitary: bool,
}

impl GaugeTransform {
    pub fn identity(grid: Grid, k: usize) -> Self {
        GaugeTransform { field: MatField::identity(grid, k), unitary: true }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.field.rows;
        if self.unitary {
            let mut prod = vec![Complex64::default(); k * k];
            for p in 0..self.field.grid.points() {
                cmat::mul_adjoint_left(self.field.block(p), self.field.block(p), &mut prod, k, k, k);
                for r in 0..k {
                    for c in 0..k {
                        let want = if r == c { Complex64::new(1.0, 0.0) } else { Complex64::default() };
                        if (prod[r * k + c] - want).norm() > 1e-12 {
                            return Err(CanonError::Invalid(format!(
                                "gauge transform not unitary at point {p}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies a gauge transformation to a triple. Sections transform as
/// s -> u^{-1} s, links conjugate edge-wise, the correction conjugates
/// pointwise; a complex transform also moves the metric: h -> u^+ h u.
pub fn apply_gauge(
    h: &MetricField,
    sections: &MatField,
    conn: &ConnectionField,
    g: &GaugeTransform,
) -> Result<(MetricField, MatField, ConnectionField)> {
    g.validate()?;
    let grid = conn.grid;
    let k = conn.k;
    if g.field.rows != k {
        return Err(CanonError::Shape("gauge rank mismatch".into()));
    }
    let mut uinv = MatField::zeros(grid, k, k);
    for p in 0..grid.points() {
        if g.unitary {
            cmat::adjoint(g.field.block(p), uinv.block_mut(p), k, k);
        } else {
            cmat::inverse(g.field.block(p), uinv.block_mut(p), k).map_err(|_| {
                CanonError::Invalid(format!("gauge transform singular at point {p}"))
            })?;
        }
    }
    // sections
    let mut s2 = MatField::zeros(grid, k, sections.cols);
    for p in 0..grid.points() {
        cmat::mul(uinv.block(p), sections.block(p), s2.block_mut(p), k, k, sections.cols);
    }
    // connection: links u^{-1}(x) L u(x+e), correction u^{-1}(x) a u(x)
    let mut c2 = conn.clone();
    let mut tmp = vec![Complex64::default(); k * k];
    for mu in 0..grid.axes() {
        for p in 0..grid.points() {
            let up = grid.shift_up(p, mu);
            cmat::mul(uinv.block(p), conn.links[mu].block(p), &mut tmp, k, k, k);
            cmat::mul(&tmp, g.field.block(up), c2.links[mu].block_mut(p), k, k, k);
            cmat::mul(uinv.block(p), conn.correction[mu].block(p), &mut tmp, k, k, k);
            cmat::mul(&tmp, g.field.block(p), c2.correction[mu].block_mut(p), k, k, k);
        }
    }
    // metric
    let h2 = if g.unitary {
        h.clone()
    } else {
        let mut m = MatField::zeros(grid, k, k);
        for p in 0..grid.points() {
            cmat::mul_adjoint_left(g.field.block(p), h.field.block(p), &mut tmp, k, k, k);
            cmat::mul(&tmp, g.field.block(p), m.block_mut(p), k, k, k);
        }
        MetricField { field: m, derivative: None }
    };
    Ok((h2, s2, c2))
}

/// Max over points and directions of || d_mu h - h a_mu - a_mu^+ h ||_F.
///
/// Uses the derivative field the metric carries when present (pullback
/// metrics carry the derivative of their own construction, making the
/// compatibility of the pullback pair an exact identity); otherwise falls
/// back to plain central differences of the metric field.
pub fn compatibility_residual(conn: &ConnectionField, h: &MetricField) -> f64 {
    let g = conn.grid;
    let k = conn.k;
    let fallback;
    let derivs: &Vec<MatField> = match &h.derivative {
        Some(d) => d,
        None => {
            fallback = (0..g.axes()).map(|mu| central_diff(&h.field, mu)).collect();
            &fallback
        }
    };
    let mut worst = 0.0f64;
    let mut t1 = vec![Complex64::default(); k * k];
    let mut t2 = vec![Complex64::default(); k * k];
    for mu in 0..g.axes() {
        for p in 0..g.points() {
            let a = conn.correction[mu].block(p);
            let hh = h.field.block(p);
            cmat::mul(hh, a, &mut t1, k, k, k);
            cmat::mul_adjoint_left(a, hh, &mut t2, k, k, k);
            let d = derivs[mu].block(p);
            let mut acc = 0.0;
            for i in 0..k * k {
                acc += (d[i] - t1[i] - t2[i]).norm_sqr();
            }
            worst = worst.max(acc.sqrt());
        }
    }
    worst
}
