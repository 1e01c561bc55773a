//! Discrete balancing flows and their diagnostics.
//!
//! The two dynamical systems move a triple (metric, section family,
//! connection): the semiconnection system updates only the (0,1) data and
//! is monotone in the (0,1) energy; the full system also updates the metric
//! and has no monotonicity guarantee. Both re-select the family as the
//! lowest eigensections of the updated operator. The ε-regularized variant
//! stays finite on non-admissible families.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmat;
use crate::error::{CanonError, Result};
use crate::field::MatField;
use crate::geometry::{
    apply_gauge, ordered_pairs, BundleConfig, ConnectionField, GaugeTransform, MetricField,
    Scheme, Twist, TwoFormEndo,
};
use crate::grassmann::{
    canonical_curvatures, canonical_map, curvature_bound_ratio, pullback_connection,
    pullback_metric, pullback_semiconnection,
};
use crate::grid::Grid;
use crate::rng::{complex_gaussian, rng_from};
use crate::sections::{
    energies, orthonormalize, projection_diagonal, SectionFamily, ADMISSIBLE_TOL,
};
use crate::spectral::{assemble_laplacian, fix_phase, full_spectrum, lowest_eigenpairs, LapKind};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Default stopping tolerances of `run_flow`.
pub const FLOW_ABS_TOL: f64 = 1e-12;
pub const FLOW_REL_TOL: f64 = 1e-10;
pub const FLOW_MAX_ITERS: usize = 200;

/// Orthonormality required of a triple's family.
pub const TRIPLE_ORTHO_TOL: f64 = 1e-12;

/// A metric, an orthonormal section family, and a connection: the state
/// moved by the flows.
#[derive(Debug, Clone)]
pub struct Triple {
    pub h: MetricField,
    pub family: SectionFamily,
    pub conn: ConnectionField,
}

impl Triple {
    pub fn new(h: MetricField, family: SectionFamily, conn: ConnectionField) -> Result<Self> {
        let g = h.grid();
        if family.grid() != g || conn.grid != g {
            return Err(CanonError::Shape("triple grids disagree".into()));
        }
        if family.k() != h.k() || conn.k != h.k() {
            return Err(CanonError::Shape("triple ranks disagree".into()));
        }
        let t = Triple { h, family, conn };
        let defect = t.orthonormality_defect()?;
        if defect > TRIPLE_ORTHO_TOL {
            return Err(CanonError::Invalid(format!(
                "family is not orthonormal: defect {defect:.3e}"
            )));
        }
        Ok(t)
    }

    pub fn grid(&self) -> Grid {
        self.h.grid()
    }

    /// max |<s_a, s_b> - delta_ab| over the family.
    pub fn orthonormality_defect(&self) -> Result<f64> {
        let n = self.family.n_sections();
        let gram = self.family.gram(&self.h)?;
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((gram[a * n + b] - target).norm());
            }
        }
        Ok(worst)
    }

    /// Conjugate every component of the triple by a gauge field.
    pub fn gauge_transform(&self, g: &GaugeTransform) -> Result<Triple> {
        let (h, s, conn) = apply_gauge(&self.h, &self.family.mat, &self.conn, g)?;
        Triple::new(h, SectionFamily::new(s), conn)
    }
}

/// Which dynamical system a flow runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSystem {
    /// Semiconnection update + re-selection; monotone in the (0,1) energy.
    #[default]
    T01,
    /// Full connection and metric update + re-selection; no monotonicity.
    T,
    /// ε-regularized full update; finite on non-admissible families.
    TEps,
}

/// One twisted pair of axes with integer flux.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistEntry {
    pub mu: usize,
    pub nu: usize,
    pub c: i64,
}

fn default_lq_p() -> f64 {
    2.0
}
fn default_lq_j() -> f64 {
    1.0
}

/// Per-iteration monitor selection. The Hodge channel is only meaningful
/// in complex dimension two and is rejected on T².
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default)]
    pub hodge: bool,
    #[serde(default)]
    pub curvature_bound: bool,
    #[serde(default)]
    pub soliton: bool,
    #[serde(default = "default_lq_p")]
    pub lq_p: f64,
    #[serde(default = "default_lq_j")]
    pub lq_j: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            hodge: false,
            curvature_bound: false,
            soliton: false,
            lq_p: default_lq_p(),
            lq_j: default_lq_j(),
        }
    }
}

fn default_k() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-2
}
fn default_band() -> i64 {
    2
}
fn default_max_iters() -> usize {
    FLOW_MAX_ITERS
}
fn default_abs_tol() -> f64 {
    FLOW_ABS_TOL
}
fn default_rel_tol() -> f64 {
    FLOW_REL_TOL
}

/// Full description of a flow run; the unit of reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Complex dimension: 1 for T², 2 for T⁴.
    pub m: usize,
    /// Grid points per axis.
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Family size N.
    pub sections: usize,
    #[serde(default)]
    pub twist: Vec<TwistEntry>,
    #[serde(default)]
    pub system: FlowSystem,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
    /// Band limit of the random initial family (plane-wave mixing radius).
    #[serde(default = "default_band")]
    pub band: i64,
    /// When set, the initial family instead mixes this many lowest
    /// eigensections of the starting operator with seeded coefficients.
    #[serde(default)]
    pub start_modes: Option<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub monitors: MonitorConfig,
    /// Compose each step with the gauge minimizer of the step displacement.
    #[serde(default)]
    pub unitary_speedup: bool,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m != 1 && self.m != 2 {
            return Err(CanonError::Config(format!(
                "m = {} is not a supported torus dimension",
                self.m
            )));
        }
        if self.n < 4 {
            return Err(CanonError::Config("grid needs n >= 4".into()));
        }
        if self.k == 0 || self.sections < self.k {
            return Err(CanonError::Config(
                "need k >= 1 and at least k sections".into(),
            ));
        }
        if self.system == FlowSystem::TEps && self.eps <= 0.0 {
            return Err(CanonError::Config("eps must be positive".into()));
        }
        if self.monitors.hodge && self.m == 1 {
            return Err(CanonError::Config(
                "the (0,2) monitor channel needs complex dimension two".into(),
            ));
        }
        if self.monitors.lq_p < 1.0 || self.monitors.lq_p - self.monitors.lq_j / 2.0 < 1.0 {
            return Err(CanonError::Config(
                "density norm exponents must stay >= 1".into(),
            ));
        }
        let axes = 2 * self.m;
        for t in &self.twist {
            if t.mu >= t.nu || t.nu >= axes {
                return Err(CanonError::Config(format!(
                    "twist pair ({}, {}) is not an ordered axis pair",
                    t.mu, t.nu
                )));
            }
        }
        Ok(())
    }

    pub fn twist_struct(&self) -> Result<Twist> {
        let axes = 2 * self.m;
        let pairs = ordered_pairs(axes);
        let mut entries = vec![0i64; axes * axes];
        for t in &self.twist {
            if !pairs.contains(&(t.mu, t.nu)) {
                return Err(CanonError::Config("bad twist pair".into()));
            }
            entries[t.mu * axes + t.nu] = t.c;
            entries[t.nu * axes + t.mu] = -t.c;
        }
        Twist::new(axes, entries)
    }

    /// Identity metric, reference connection for the twist, seeded family.
    pub fn initial_triple(&self) -> Result<Triple> {
        self.validate()?;
        let grid = Grid::new(self.m, self.n)?;
        let bc = BundleConfig::new(self.k, self.sections, self.twist_struct()?)?;
        let conn = ConnectionField::reference(grid, &bc)?;
        let h = MetricField::identity(grid, self.k);
        let family = match self.start_modes {
            Some(modes) => eigen_mix_family(&h, &conn, self.sections, modes, self.seed)?,
            None => {
                let raw = SectionFamily::random_band_limited(
                    grid,
                    self.k,
                    self.sections,
                    self.band,
                    self.seed,
                );
                orthonormalize(&raw, &h)?
            }
        };
        Triple::new(h, family, conn)
    }

    /// Stable content hash carried by every trace row.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Seeded mix of the lowest eigensections of the starting dbar operator,
/// orthonormalized. Gives admissible starts on twisted bundles where plane
/// waves would be poorly adapted.
fn eigen_mix_family(
    h: &MetricField,
    conn: &ConnectionField,
    n_sections: usize,
    modes: usize,
    seed: u64,
) -> Result<SectionFamily> {
    if modes < n_sections {
        return Err(CanonError::Config(
            "start_modes must be at least the family size".into(),
        ));
    }
    let lap = assemble_laplacian(conn, h, LapKind::Dbar, None)?;
    let spec = lowest_eigenpairs(&lap, modes, seed)?;
    let g = h.grid();
    let k = h.k();
    let mut rng = rng_from(seed, 7);
    let mut coef = vec![Complex64::default(); modes * n_sections];
    for c in coef.iter_mut() {
        *c = complex_gaussian(&mut rng);
    }
    let mut mat = MatField::zeros(g, k, n_sections);
    for p in 0..g.points() {
        let out = mat.block_mut(p);
        for (i, psi) in spec.sections.iter().enumerate() {
            let col = psi.block(p);
            for r in 0..k {
                for a in 0..n_sections {
                    out[r * n_sections + a] += coef[i * n_sections + a] * col[r];
                }
            }
        }
    }
    orthonormalize(&SectionFamily::new(mat), h)
}

/// Span the `count` lowest eigensections of the chosen Laplacian.
///
/// When a degenerate eigenvalue cluster crosses the selection cut, the
/// cluster basis is rotated to diagonalize the projection onto `prev` and
/// the directions of largest overlap are kept (flow continuity); without a
/// previous family the solver order decides. Output is orthonormal in h.
pub fn minimize_subspace(
    h: &MetricField,
    conn: &ConnectionField,
    count: usize,
    kind: LapKind,
    prev: Option<&SectionFamily>,
    seed: u64,
) -> Result<SectionFamily> {
    let lap = assemble_laplacian(conn, h, kind, None)?;
    let dim = lap.dim();
    if count == 0 || count >= dim {
        return Err(CanonError::Config(format!(
            "cannot select {count} sections from a dimension-{dim} space"
        )));
    }
    let mut extra = 6.min(dim - count - 1);
    let spec = loop {
        let want = count + extra;
        let spec = if want >= dim {
            full_spectrum(&lap)?
        } else {
            lowest_eigenpairs(&lap, want, seed)?
        };
        // cluster containing the cut, chained by near-equal gaps
        let ev = &spec.eigenvalues;
        let ctol = 1e-9 * (1.0 + ev[count - 1].abs());
        let mut hi = count - 1;
        while hi + 1 < ev.len() && ev[hi + 1] - ev[hi] < ctol {
            hi += 1;
        }
        if hi + 1 < ev.len() || want >= dim {
            break spec;
        }
        extra = (extra * 2).max(4).min(dim - count);
        if count + extra >= dim {
            extra = dim - count;
        }
    };
    let ev = &spec.eigenvalues;
    let ctol = 1e-9 * (1.0 + ev[count - 1].abs());
    let mut lo = count - 1;
    while lo > 0 && ev[lo] - ev[lo - 1] < ctol {
        lo -= 1;
    }
    let mut hi = count - 1;
    while hi + 1 < ev.len() && ev[hi + 1] - ev[hi] < ctol {
        hi += 1;
    }

    let g = h.grid();
    let k = h.k();
    let mut chosen: Vec<MatField> = spec.sections[..lo].to_vec();
    let need = count - lo;
    let csize = hi + 1 - lo;
    if need == csize || prev.is_none() {
        chosen.extend_from_slice(&spec.sections[lo..count]);
    } else {
        // Rotate the cluster to the eigenbasis of its projection onto the
        // previous family and keep the largest-overlap directions.
        let prev = prev.unwrap();
        let np = prev.n_sections();
        let w = g.weight();
        let mut cross = vec![Complex64::default(); csize * np];
        for (i, psi) in spec.sections[lo..=hi].iter().enumerate() {
            for q in 0..np {
                let mut acc = Complex64::default();
                let mut hv = vec![Complex64::default(); k];
                for p in 0..g.points() {
                    let hb = h.field.block(p);
                    let pv = psi.block(p);
                    for r in 0..k {
                        hv[r] = Complex64::default();
                        for c in 0..k {
                            hv[r] += hb[r * k + c] * pv[c];
                        }
                    }
                    let pb = prev.mat.block(p);
                    for r in 0..k {
                        acc += pb[r * np + q].conj() * hv[r];
                    }
                }
                cross[i * np + q] = acc * w;
            }
        }
        let mut gram = vec![Complex64::default(); csize * csize];
        for i in 0..csize {
            for j in 0..csize {
                let mut acc = Complex64::default();
                for q in 0..np {
                    acc += cross[i * np + q] * cross[j * np + q].conj();
                }
                gram[i * csize + j] = acc;
            }
        }
        let mut vecs = vec![Complex64::default(); csize * csize];
        let _vals = cmat::herm_eigen(&gram, csize, Some(&mut vecs));
        // the overlap form is the conjugate of the Gram, so combine with
        // conjugated eigenvector entries; columns in descending order
        for s in 0..need {
            let col = csize - 1 - s;
            let mut coeff: Vec<Complex64> =
                (0..csize).map(|i| vecs[i * csize + col].conj()).collect();
            fix_phase(&mut coeff);
            let mut sec = MatField::zeros(g, k, 1);
            for (i, psi) in spec.sections[lo..=hi].iter().enumerate() {
                sec.axpy(coeff[i], psi);
            }
            chosen.push(sec);
        }
    }

    let mut mat = MatField::zeros(g, k, count);
    for p in 0..g.points() {
        let out = mat.block_mut(p);
        for (a, sec) in chosen.iter().enumerate() {
            let col = sec.block(p);
            for r in 0..k {
                out[r * count + a] = col[r];
            }
        }
    }
    let fam = SectionFamily::new(mat);
    let gram = fam.gram(h)?;
    let mut defect = 0.0f64;
    for a in 0..count {
        for b in 0..count {
            let target = if a == b { 1.0 } else { 0.0 };
            defect = defect.max((gram[a * count + b] - target).norm());
        }
    }
    if defect > 1e-13 {
        orthonormalize(&fam, h)
    } else {
        Ok(fam)
    }
}

/// Constant-form content of the curvature: component averages, their type
/// decomposition, and the (0,2) coefficient in the unitary coframe.
#[derive(Debug, Clone)]
pub struct HodgeMonitor {
    /// ∫ tr F_{μν} dv per ordered axis pair.
    pub average: Vec<((usize, usize), Complex64)>,
    pub f20: Vec<((usize, usize), Complex64)>,
    pub f11: Vec<((usize, usize), Complex64)>,
    pub f02: Vec<((usize, usize), Complex64)>,
    /// Coefficient of the conjugate top form; zero in complex dimension one.
    pub hodge02: Complex64,
    pub hodge02_norm_sq: f64,
    /// Φ^{0,1} · Φ of the triple the monitor was taken from.
    pub phi01_phi: f64,
}

fn constant_form_pieces(conn: &ConnectionField) -> Result<HodgeMonitor> {
    let f = conn.curvature()?;
    let ints = f.component_integrals();
    let pairs: Vec<(usize, usize)> = ints.iter().map(|&(p, _)| p).collect();
    let comp = |mu: usize, nu: usize| -> Complex64 {
        ints.iter()
            .find(|&&(p, _)| p == (mu, nu))
            .map(|&(_, v)| v)
            .unwrap_or_default()
    };
    let zero = vec![Complex64::default(); pairs.len()];
    let mut f20c = zero.clone();
    let mut f02c = zero.clone();
    let mut hodge02 = Complex64::default();
    if conn.grid.m == 2 {
        let (c02, c03, c12, c13) = (comp(0, 2), comp(0, 3), comp(1, 2), comp(1, 3));
        let l02 = 0.25 * ((c02 - c13) + I * (c03 + c12));
        let l20 = 0.25 * ((c02 - c13) - I * (c03 + c12));
        hodge02 = l02;
        // conj(dz0)^conj(dz1) = dx02 - i dx03 - i dx12 - dx13
        // dz0^dz1 = dx02 + i dx03 + i dx12 - dx13
        let one = Complex64::new(1.0, 0.0);
        for (i, &p) in pairs.iter().enumerate() {
            let (b02, b20) = match p {
                (0, 2) => (one, one),
                (0, 3) => (-I, I),
                (1, 2) => (-I, I),
                (1, 3) => (-one, -one),
                _ => continue,
            };
            f02c[i] = b02 * l02;
            f20c[i] = b20 * l20;
        }
    }
    let f11c: Vec<Complex64> = ints
        .iter()
        .enumerate()
        .map(|(i, &(_, v))| v - f20c[i] - f02c[i])
        .collect();
    let with_pairs =
        |v: Vec<Complex64>| -> Vec<((usize, usize), Complex64)> {
            pairs.iter().cloned().zip(v).collect()
        };
    Ok(HodgeMonitor {
        average: ints.clone(),
        f20: with_pairs(f20c),
        f11: with_pairs(f11c),
        f02: with_pairs(f02c),
        hodge02,
        hodge02_norm_sq: hodge02.norm_sqr(),
        phi01_phi: f64::NAN,
    })
}

/// Per-iteration obstruction monitor of a triple: constant-form curvature
/// content plus the energy product entering the lower bound chain.
pub fn obstruction_monitor(triple: &Triple) -> Result<HodgeMonitor> {
    let mut hm = constant_form_pieces(&triple.conn)?;
    let rep = energies(&triple.family, &triple.h, &triple.conn)?;
    hm.phi01_phi = rep.e01 * rep.e;
    Ok(hm)
}

/// One recorded flow iteration. `wall_secs` stays in memory; serialized
/// emission drops it so traces are byte-stable across machines.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    pub phi01: f64,
    pub phi10: f64,
    pub phi: f64,
    pub phi01_g: f64,
    pub min_sv_pi: f64,
    pub stability_constant: f64,
    pub f02_can_l2: f64,
    pub hodge02_re: f64,
    pub hodge02_im: f64,
    pub hodge02_norm_sq: f64,
    pub phi01_phi: f64,
    pub curvature_bound_max: f64,
    pub lq_p: f64,
    pub lq_mid: f64,
    pub lq_inf: f64,
    pub soliton_residual: f64,
    pub terminated: bool,
    pub wall_secs: f64,
}

/// Frozen emission order of trace columns.
pub const TRACE_COLUMNS: [&str; 20] = [
    "iteration",
    "seed",
    "config_hash",
    "phi01",
    "phi10",
    "phi",
    "phi01_g",
    "min_sv_pi",
    "stability_constant",
    "f02_can_l2",
    "hodge02_re",
    "hodge02_im",
    "hodge02_norm_sq",
    "phi01_phi",
    "curvature_bound_max",
    "lq_p",
    "lq_mid",
    "lq_inf",
    "soliton_residual",
    "terminated",
];

fn measure(triple: &Triple, mon: &MonitorConfig) -> Result<TraceRow> {
    let rep = energies(&triple.family, &triple.h, &triple.conn)?;
    let pd = projection_diagonal(&triple.family, &triple.h)?;
    let min_sv = pd.min_singular_value();
    let stability = pd.stability_constant();
    let admissible = min_sv >= ADMISSIBLE_TOL;
    let mut f02_can_l2 = f64::NAN;
    let mut bound = f64::NAN;
    if admissible {
        let gf = canonical_map(&triple.h, &triple.family)?;
        let curv = canonical_curvatures(&gf, &triple.conn, Scheme::Central)?;
        f02_can_l2 = curv.f02_l2;
        if mon.curvature_bound {
            bound = curvature_bound_ratio(&gf, &triple.conn, Scheme::Forward)?;
        }
    }
    let (h02re, h02im, h02n2, p01p) = if mon.hodge {
        let hm = constant_form_pieces(&triple.conn)?;
        (
            hm.hodge02.re,
            hm.hodge02.im,
            hm.hodge02_norm_sq,
            rep.e01 * rep.e,
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(TraceRow {
        iteration: 0,
        seed: 0,
        config_hash: String::new(),
        phi01: rep.e01,
        phi10: rep.e10,
        phi: rep.e,
        phi01_g: rep.e01_g,
        min_sv_pi: min_sv,
        stability_constant: stability,
        f02_can_l2,
        hodge02_re: h02re,
        hodge02_im: h02im,
        hodge02_norm_sq: h02n2,
        phi01_phi: p01p,
        curvature_bound_max: bound,
        lq_p: rep.density_lq(Some(mon.lq_p)),
        lq_mid: rep.density_lq(Some(mon.lq_p - mon.lq_j / 2.0)),
        lq_inf: rep.density_lq(None),
        soliton_residual: f64::NAN,
        terminated: !admissible,
        wall_secs: 0.0,
    })
}

/// New triple plus the row measured on it.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub triple: Triple,
    pub row: TraceRow,
}

/// Semiconnection system step: canonical (0,1) update, then family
/// re-selection against the updated operator. The metric is untouched.
/// Monotone: the re-selected family realizes the lowest eigenvalue sum,
/// which is at most the old family's energy under the new semiconnection,
/// which equals its Grassmann (0,1) energy under the old connection.
pub fn step_t01(triple: &Triple, seed: u64, mon: &MonitorConfig) -> Result<StepOutcome> {
    let gf = canonical_map(&triple.h, &triple.family)?;
    let bnew = pullback_semiconnection(&gf, &triple.conn, Scheme::Forward)?;
    let fam = minimize_subspace(
        &triple.h,
        &bnew,
        triple.family.n_sections(),
        LapKind::Dbar,
        Some(&triple.family),
        seed,
    )?;
    let next = Triple::new(triple.h.clone(), fam, bnew)?;
    let row = measure(&next, mon)?;
    Ok(StepOutcome { triple: next, row })
}

/// Full system step: connection and metric update, re-orthonormalization,
/// then re-selection by the full connection Laplacian. No monotonicity.
pub fn step_t(triple: &Triple, seed: u64, mon: &MonitorConfig) -> Result<StepOutcome> {
    let gf = canonical_map(&triple.h, &triple.family)?;
    let anew = pullback_connection(&gf, &triple.conn, Scheme::Central)?;
    let hnew = pullback_metric(&gf, &triple.conn, Scheme::Central)?;
    let reortho = orthonormalize(&triple.family, &hnew)?;
    let fam = minimize_subspace(
        &hnew,
        &anew,
        triple.family.n_sections(),
        LapKind::Full,
        Some(&reortho),
        seed,
    )?;
    let next = Triple::new(hnew, fam, anew)?;
    let row = measure(&next, mon)?;
    Ok(StepOutcome { triple: next, row })
}

/// Conjugated curvature of the regularized step and the ε-term whose
/// small-ε limit is the kernel-bracketed curvature.
#[derive(Debug, Clone)]
pub struct EpsDiagnostics {
    pub conjugated: TwoFormEndo,
    pub eps_term: TwoFormEndo,
}

/// ε-regularized full step. The fiberwise frame operator gets an εI shift,
/// so every inverse exists and non-admissible families move finitely.
pub fn step_t_eps(
    triple: &Triple,
    eps: f64,
    seed: u64,
    mon: &MonitorConfig,
) -> Result<(StepOutcome, EpsDiagnostics)> {
    if eps <= 0.0 {
        return Err(CanonError::Config("eps must be positive".into()));
    }
    let g = triple.grid();
    let k = triple.h.k();
    let nsec = triple.family.n_sections();
    let ch = Complex64::new(nsec as f64 / k as f64, 0.0);
    let s = &triple.family.mat;
    let axes = g.axes();

    // fiberwise: R = S S^+, X = R h + eps, regularized metric c_H h X^{-1},
    // correction alpha_mu = -(D_mu S) S^+ h X^{-1}
    let mut hnew = MetricField::identity(g, k);
    let mut xinv_field = MatField::zeros(g, k, k);
    let mut r = vec![Complex64::default(); k * k];
    let mut x = vec![Complex64::default(); k * k];
    let mut xinv = vec![Complex64::default(); k * k];
    let mut t1 = vec![Complex64::default(); k * k];
    for p in 0..g.points() {
        let sb = s.block(p);
        cmat::mul_adjoint_right(sb, sb, &mut r, k, nsec, k);
        cmat::mul(&r, triple.h.field.block(p), &mut x, k, k, k);
        for d in 0..k {
            x[d * k + d] += eps;
        }
        cmat::inverse(&x, &mut xinv, k)
            .map_err(|_| CanonError::Invalid("regularized frame operator not invertible".into()))?;
        xinv_field.block_mut(p).copy_from_slice(&xinv);
        cmat::mul(triple.h.field.block(p), &xinv, &mut t1, k, k, k);
        // exact Hermitian in exact arithmetic; symmetrize rounding away
        let hb = hnew.field.block_mut(p);
        for a in 0..k {
            for b in 0..k {
                hb[a * k + b] = ch * 0.5 * (t1[a * k + b] + t1[b * k + a].conj());
            }
        }
    }
    let mut anew = triple.conn.clone();
    let mut sh = vec![Complex64::default(); k * nsec];
    let mut dssh = vec![Complex64::default(); k * k];
    for mu in 0..axes {
        let ds = triple.conn.covariant_derivative(s, mu, Scheme::Central)?;
        let mut corr = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            cmat::mul(triple.h.field.block(p), s.block(p), &mut sh, k, k, nsec);
            cmat::mul_adjoint_right(ds.block(p), &sh, &mut dssh, k, nsec, k);
            let out = corr.block_mut(p);
            cmat::mul(&dssh, xinv_field.block(p), out, k, k, k);
            for e in out.iter_mut() {
                *e = -*e;
            }
        }
        anew.add_correction(mu, &corr);
    }

    // Pi_eps^{+-1/2} via the metric square root
    let fcurv_new = anew.curvature()?;
    let fcurv_old = triple.conn.curvature()?;
    let mut conjugated = TwoFormEndo::zeros(g, k);
    let mut eps_term = TwoFormEndo::zeros(g, k);
    let mut hsq = vec![Complex64::default(); k * k];
    let mut hsqi = vec![Complex64::default(); k * k];
    let mut pe = vec![Complex64::default(); k * k];
    let mut pes = vec![Complex64::default(); k * k];
    let mut pesi = vec![Complex64::default(); k * k];
    let mut mm = vec![Complex64::default(); k * k];
    let mut mp = vec![Complex64::default(); k * k];
    let mut t2 = vec![Complex64::default(); k * k];
    for p in 0..g.points() {
        let sb = s.block(p);
        cmat::mul_adjoint_right(sb, sb, &mut r, k, nsec, k);
        cmat::herm_func(triple.h.field.block(p), k, |v| v.max(0.0).sqrt(), &mut hsq);
        cmat::herm_func(triple.h.field.block(p), k, |v| 1.0 / v.max(1e-300).sqrt(), &mut hsqi);
        cmat::mul(&hsq, &r, &mut t1, k, k, k);
        cmat::mul(&t1, &hsq, &mut pe, k, k, k);
        for d in 0..k {
            pe[d * k + d] += eps;
        }
        cmat::herm_func(&pe, k, |v| v.max(0.0).sqrt(), &mut pes);
        cmat::herm_func(&pe, k, |v| 1.0 / v.max(1e-300).sqrt(), &mut pesi);
        // M_minus = h^{-1/2} P^{-1/2} h^{1/2}, M_plus its inverse power
        cmat::mul(&hsqi, &pesi, &mut t1, k, k, k);
        cmat::mul(&t1, &hsq, &mut mm, k, k, k);
        cmat::mul(&hsqi, &pes, &mut t1, k, k, k);
        cmat::mul(&t1, &hsq, &mut mp, k, k, k);
        for (c, fnb) in conjugated.comps.iter_mut().zip(fcurv_new.comps.iter()) {
            cmat::mul(&mm, fnb.block(p), &mut t1, k, k, k);
            cmat::mul(&t1, &mp, &mut t2, k, k, k);
            c.block_mut(p).copy_from_slice(&t2);
        }
        for (c, fob) in eps_term.comps.iter_mut().zip(fcurv_old.comps.iter()) {
            cmat::mul(&mm, fob.block(p), &mut t1, k, k, k);
            cmat::mul(&t1, &mm, &mut t2, k, k, k);
            let out = c.block_mut(p);
            for (o, v) in out.iter_mut().zip(t2.iter()) {
                *o = eps * v;
            }
        }
    }

    let reortho = orthonormalize(&triple.family, &hnew)?;
    let fam = minimize_subspace(&hnew, &anew, nsec, LapKind::Full, Some(&reortho), seed)?;
    let next = Triple::new(hnew, fam, anew)?;
    let mut row = measure(&next, mon)?;
    // the regularized system is designed to survive degenerate frames
    row.terminated = false;
    Ok((
        StepOutcome { triple: next, row },
        EpsDiagnostics {
            conjugated,
            eps_term,
        },
    ))
}

/// Fiberwise orthogonal projection onto the kernel of the frame operator
/// S(x) S(x)^+ h(x); zero wherever the family spans the fiber.
pub fn kernel_projector(fam: &SectionFamily, h: &MetricField) -> Result<MatField> {
    let g = fam.grid();
    let k = fam.k();
    let n = fam.n_sections();
    if h.k() != k || h.grid() != g {
        return Err(CanonError::Shape("metric does not match family".into()));
    }
    let mut out = MatField::zeros(g, k, k);
    let mut hs = vec![Complex64::default(); k * n];
    let mut gram = vec![Complex64::default(); n * n];
    let mut gpi = vec![Complex64::default(); n * n];
    let mut srp = vec![Complex64::default(); k * n];
    let mut ss = vec![Complex64::default(); k * k];
    for p in 0..g.points() {
        let s = fam.mat.block(p);
        cmat::mul(h.field.block(p), s, &mut hs, k, k, n);
        cmat::mul_adjoint_left(s, &hs, &mut gram, k, n, n);
        cmat::herm_pseudo_inverse(&gram, n, 1e-10, &mut gpi);
        cmat::mul(s, &gpi, &mut srp, k, n, n);
        cmat::mul_adjoint_right(&srp, s, &mut ss, k, n, k);
        let o = out.block_mut(p);
        cmat::mul(&ss, h.field.block(p), o, k, k, k);
        for e in o.iter_mut() {
            *e = -*e;
        }
        for d in 0..k {
            o[d * k + d] += 1.0;
        }
    }
    Ok(out)
}

/// Why a flow stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Φ^{0,1} fell below the absolute tolerance.
    Converged,
    /// Step-to-step Φ^{0,1} change fell below the relative tolerance.
    StepChange,
    /// Re-selected family left the admissible set.
    Terminated,
    MaxIters,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::StepChange => "step-change",
            StopReason::Terminated => "terminated",
            StopReason::MaxIters => "max-iters",
        })
    }
}

/// Append-only record of a flow run. `rows` holds one entry per executed
/// iteration; the starting state's measurement sits in `initial` and is
/// not part of the emitted trace.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub seed: u64,
    pub config_hash: String,
    pub initial: TraceRow,
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
}

/// Final state plus its trace.
#[derive(Debug)]
pub struct FlowRun {
    pub trace: FlowTrace,
    pub triple: Triple,
}

/// Drive the configured system from the seeded start. Each trace row
/// records one executed step; the starting measurement sits apart in
/// `FlowTrace::initial`.
pub fn run_flow(config: &FlowConfig) -> Result<FlowRun> {
    config.validate()?;
    let hash = config.hash();
    let mut triple = config.initial_triple()?;
    let mon = config.monitors;
    let mut rows: Vec<TraceRow> = Vec::with_capacity(config.max_iters);
    let mut initial = measure(&triple, &mon)?;
    initial.seed = config.seed;
    initial.config_hash = hash.clone();
    let mut stop = StopReason::MaxIters;
    let mut prev_phi01 = initial.phi01;
    for it in 1..=config.max_iters {
        let t0 = Instant::now();
        let mut outcome = match config.system {
            FlowSystem::T01 => step_t01(&triple, config.seed, &mon),
            FlowSystem::T => step_t(&triple, config.seed, &mon),
            FlowSystem::TEps => {
                step_t_eps(&triple, config.eps, config.seed, &mon).map(|(o, _)| o)
            }
        }
        .map_err(|e| CanonError::Invalid(format!("flow iteration {it}: {e}")))?;
        if config.unitary_speedup && !outcome.row.terminated {
            let sol = soliton_residual(&triple, &outcome.triple)?;
            let mut adj = sol.gauge.clone();
            let k = triple.h.k();
            for p in 0..triple.grid().points() {
                let src = sol.gauge.block(p).to_vec();
                let dst = adj.block_mut(p);
                for a in 0..k {
                    for b in 0..k {
                        dst[a * k + b] = src[b * k + a].conj();
                    }
                }
            }
            let gt = GaugeTransform {
                field: adj,
                unitary: true,
            };
            let aligned = outcome.triple.gauge_transform(&gt)?;
            let mut row = measure(&aligned, &mon)?;
            row.terminated = outcome.row.terminated;
            outcome = StepOutcome {
                triple: aligned,
                row,
            };
        }
        if mon.soliton {
            outcome.row.soliton_residual = soliton_residual(&triple, &outcome.triple)?.residual;
        }
        outcome.row.iteration = it;
        outcome.row.seed = config.seed;
        outcome.row.config_hash = hash.clone();
        outcome.row.wall_secs = t0.elapsed().as_secs_f64();
        let terminated = outcome.row.terminated;
        let phi01 = outcome.row.phi01;
        rows.push(outcome.row);
        triple = outcome.triple;
        if terminated {
            stop = StopReason::Terminated;
            break;
        }
        if phi01 < config.abs_tol {
            stop = StopReason::Converged;
            break;
        }
        if (prev_phi01 - phi01).abs() < config.rel_tol * (1.0 + prev_phi01.abs()) {
            stop = StopReason::StepChange;
            break;
        }
        prev_phi01 = phi01;
    }
    Ok(FlowRun {
        trace: FlowTrace {
            seed: config.seed,
            config_hash: hash,
            initial,
            rows,
            stop,
        },
        triple,
    })
}

/// Result of the gauge-displacement minimization between two iterates.
#[derive(Debug, Clone)]
pub struct SolitonReport {
    /// Square root of the minimized displacement functional.
    pub residual: f64,
    pub gauge: MatField,
    pub converged: bool,
    pub iterations: usize,
}

/// exp of an anti-Hermitian block, exact via the Hermitian eigensystem.
fn unitary_exp(xi: &[Complex64], k: usize, out: &mut [Complex64]) {
    if k == 1 {
        out[0] = xi[0].exp();
        return;
    }
    let mut herm = vec![Complex64::default(); k * k];
    for (h, &x) in herm.iter_mut().zip(xi.iter()) {
        *h = I * x;
    }
    let mut vecs = vec![Complex64::default(); k * k];
    let vals = cmat::herm_eigen(&herm, k, Some(&mut vecs));
    out.fill(Complex64::default());
    for l in 0..k {
        let ph = (-I * vals[l]).exp();
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] += ph * vecs[a * k + l] * vecs[b * k + l].conj();
            }
        }
    }
}

struct SolitonProblem<'a> {
    grid: Grid,
    k: usize,
    old: &'a ConnectionField,
    dlink: Vec<MatField>,
    dcorr: Vec<MatField>,
}

impl<'a> SolitonProblem<'a> {
    /// residual fields P_j, Q_j for the current gauge; returns f.
    fn residual_fields(&self, u: &MatField, pf: &mut [MatField], qf: &mut [MatField]) -> f64 {
        let g = self.grid;
        let k = self.k;
        let n = g.n as f64;
        let w = g.weight();
        let mut t1 = vec![Complex64::default(); k * k];
        let mut t2 = vec![Complex64::default(); k * k];
        let mut f = 0.0;
        for j in 0..g.m {
            for p in 0..g.points() {
                let pb = pf[j].block_mut(p);
                pb.fill(Complex64::default());
                let qb = qf[j].block_mut(p);
                qb.fill(Complex64::default());
                for (which, mu) in [2 * j, 2 * j + 1].into_iter().enumerate() {
                    let ii = if which == 0 { Complex64::new(1.0, 0.0) } else { I };
                    let half = 0.5 * ii;
                    let up = g.shift_up(p, mu);
                    let l = self.old.link(mu).block(p);
                    // rho = dlink - n (u(x)^+ L u(x+e) - L)
                    cmat::mul(l, u.block(up), &mut t1, k, k, k);
                    cmat::mul_adjoint_left(u.block(p), &t1, &mut t2, k, k, k);
                    let dl = self.dlink[mu].block(p);
                    for (idx, pe) in pb.iter_mut().enumerate() {
                        *pe += half * (dl[idx] - n * (t2[idx] - l[idx]));
                    }
                    // sigma = dcorr - (u^+ a u - a)
                    let a = &self.old.correction[mu];
                    cmat::mul(a.block(p), u.block(p), &mut t1, k, k, k);
                    cmat::mul_adjoint_left(u.block(p), &t1, &mut t2, k, k, k);
                    let dc = self.dcorr[mu].block(p);
                    let ab = a.block(p);
                    for (idx, qe) in qb.iter_mut().enumerate() {
                        *qe += half * (dc[idx] - (t2[idx] - ab[idx]));
                    }
                }
                f += w * (cmat::frob_norm_sq(pb) + cmat::frob_norm_sq(qb));
            }
        }
        f
    }

    /// Euclidean gradient wrt conj(u) under df = sum 2 Re tr(du^+ G).
    fn gradient(&self, u: &MatField, pf: &[MatField], qf: &[MatField], grad: &mut MatField) {
        let g = self.grid;
        let k = self.k;
        let n = g.n as f64;
        let w = g.weight();
        let mut t1 = vec![Complex64::default(); k * k];
        let mut t2 = vec![Complex64::default(); k * k];
        for p in 0..g.points() {
            grad.block_mut(p).fill(Complex64::default());
        }
        for j in 0..g.m {
            for p in 0..g.points() {
                for (which, mu) in [2 * j, 2 * j + 1].into_iter().enumerate() {
                    let ii = if which == 0 { Complex64::new(1.0, 0.0) } else { I };
                    let up = g.shift_up(p, mu);
                    let l = self.old.link(mu).block(p);
                    let pj = pf[j].block(p);
                    // at x: -(n w / 2) ii * L u(x+e) P^+
                    cmat::mul(l, u.block(up), &mut t1, k, k, k);
                    cmat::mul_adjoint_right(&t1, pj, &mut t2, k, k, k);
                    let c = -0.5 * n * w * ii;
                    let gb = grad.block_mut(p);
                    for (ge, &v) in gb.iter_mut().zip(t2.iter()) {
                        *ge += c * v;
                    }
                    // at x+e: adjoint of -(n w / 2) ii * P^+ u^+ L,
                    // i.e. -(n w / 2) conj(ii) L^+ u P
                    cmat::mul_adjoint_left(l, u.block(p), &mut t1, k, k, k);
                    cmat::mul(&t1, pj, &mut t2, k, k, k);
                    let c2 = -0.5 * n * w * ii.conj();
                    let gb = grad.block_mut(up);
                    for (ge, &v) in gb.iter_mut().zip(t2.iter()) {
                        *ge += c2 * v;
                    }
                    // correction terms, both at x
                    let a = self.old.correction[mu].block(p);
                    let qj = qf[j].block(p);
                    cmat::mul(a, u.block(p), &mut t1, k, k, k);
                    cmat::mul_adjoint_right(&t1, qj, &mut t2, k, k, k);
                    let c3 = -0.5 * w * ii;
                    let gb = grad.block_mut(p);
                    for (ge, &v) in gb.iter_mut().zip(t2.iter()) {
                        *ge += c3 * v;
                    }
                    cmat::mul_adjoint_left(a, u.block(p), &mut t1, k, k, k);
                    cmat::mul(&t1, qj, &mut t2, k, k, k);
                    let c4 = -0.5 * w * ii.conj();
                    let gb = grad.block_mut(p);
                    for (ge, &v) in gb.iter_mut().zip(t2.iter()) {
                        *ge += c4 * v;
                    }
                }
            }
        }
    }
}

/// Minimize the displacement between two iterates over pointwise unitary
/// gauges: Riemannian descent with Armijo backtracking from the identity.
/// Residual zero certifies the step was pure gauge motion.
pub fn soliton_residual(before: &Triple, after: &Triple) -> Result<SolitonReport> {
    let g = before.grid();
    let k = before.h.k();
    if after.grid() != g || after.h.k() != k {
        return Err(CanonError::Shape("iterates live on different bundles".into()));
    }
    let n = g.n as f64;
    let axes = g.axes();
    let mut dlink = Vec::with_capacity(axes);
    let mut dcorr = Vec::with_capacity(axes);
    for mu in 0..axes {
        let mut dl = MatField::zeros(g, k, k);
        let lold = before.conn.link(mu);
        let lnew = after.conn.link(mu);
        for p in 0..g.points() {
            let o = dl.block_mut(p);
            for ((e, &a), &b) in o.iter_mut().zip(lnew.block(p)).zip(lold.block(p)) {
                *e = n * (a - b);
            }
        }
        dlink.push(dl);
        let mut dc = after.conn.correction[mu].clone();
        dc.axpy(Complex64::new(-1.0, 0.0), &before.conn.correction[mu]);
        dcorr.push(dc);
    }
    let prob = SolitonProblem {
        grid: g,
        k,
        old: &before.conn,
        dlink,
        dcorr,
    };
    let mut u = MatField::identity(g, k);
    let mut pf: Vec<MatField> = (0..g.m).map(|_| MatField::zeros(g, k, k)).collect();
    let mut qf: Vec<MatField> = (0..g.m).map(|_| MatField::zeros(g, k, k)).collect();
    let mut grad = MatField::zeros(g, k, k);
    let mut f = prob.residual_fields(&u, &mut pf, &mut qf);
    let mut step = 1.0f64;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut xi = vec![Complex64::default(); k * k];
    let mut ex = vec![Complex64::default(); k * k];
    let mut unew = MatField::zeros(g, k, k);
    let mut pt: Vec<MatField> = (0..g.m).map(|_| MatField::zeros(g, k, k)).collect();
    let mut qt: Vec<MatField> = (0..g.m).map(|_| MatField::zeros(g, k, k)).collect();
    for it in 0..200 {
        iterations = it;
        prob.gradient(&u, &pf, &qf, &mut grad);
        // Riemannian direction xi(x) = skew(u^+ G); slope -2 sum ||xi||^2
        let mut slope = 0.0f64;
        let mut xif = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            let ub = u.block(p);
            let gb = grad.block(p);
            cmat::mul_adjoint_left(ub, gb, &mut xi, k, k, k);
            let o = xif.block_mut(p);
            for a in 0..k {
                for b in 0..k {
                    o[a * k + b] = 0.5 * (xi[a * k + b] - xi[b * k + a].conj());
                }
            }
            slope += cmat::frob_norm_sq(o);
        }
        if 2.0 * slope <= 1e-22 * (1.0 + f) || f <= 1e-24 {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut s = step * 2.0;
        for _bt in 0..48 {
            for p in 0..g.points() {
                let o = xif.block(p);
                for (e, &v) in xi.iter_mut().zip(o.iter()) {
                    *e = Complex64::new(-s, 0.0) * v;
                }
                unitary_exp(&xi, k, &mut ex);
                cmat::mul(u.block(p), &ex, unew.block_mut(p), k, k, k);
            }
            let fnew = prob.residual_fields(&unew, &mut pt, &mut qt);
            if fnew <= f - 1e-4 * s * 2.0 * slope {
                std::mem::swap(&mut u, &mut unew);
                std::mem::swap(&mut pf, &mut pt);
                std::mem::swap(&mut qf, &mut qt);
                f = fnew;
                step = s;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            converged = 2.0 * slope <= 1e-16 * (1.0 + f);
            break;
        }
    }
    Ok(SolitonReport {
        residual: f.max(0.0).sqrt(),
        gauge: u,
        converged,
        iterations,
    })
}
