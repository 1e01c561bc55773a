//! `canonflow verify`: measure module invariants on seeded instances and
//! report the slack against pinned tolerances.

use canonflow::geometry::Twist;
use canonflow::{
    assemble_laplacian, canonical_map, chern_forms, compatibility_residual, energies,
    full_spectrum, heat_projection, lowest_eigenpairs, orthonormalize, pullback_connection,
    pullback_metric, pullback_semiconnection, run_flow, step_t01, BundleConfig, CanonError,
    ConnectionField, FlowConfig, Grid, LapKind, MetricField, MonitorConfig, Result,
    SectionFamily, SpectralData,
};
use num_complex::Complex64;

use crate::experiment::Experiment;
use crate::gauge::{phase_gauge, planted_gauge_checks};
use crate::report::{print_section, summarize, Check};
use crate::Injection;

const SUITES: [&str; 4] = ["grassmann", "dynamics", "spectral", "geometry"];

pub fn cmd_verify(
    suite: Option<&str>,
    inject: Option<Injection>,
    exp: &Experiment,
) -> anyhow::Result<u8> {
    let chosen: Vec<&str> = match suite {
        None => SUITES.to_vec(),
        Some(s) if SUITES.contains(&s) => vec![s],
        Some(other) => {
            return Err(CanonError::Config(format!(
                "unknown suite '{other}': expected one of grassmann, dynamics, spectral, geometry"
            ))
            .into())
        }
    };
    let seed = exp.seeds[0];

    let inputs = vec![metric_hermiticity(exp, inject, seed)?];
    print_section("inputs", &inputs);
    let mut all = inputs;

    for s in chosen {
        let checks = match s {
            "grassmann" => grassmann_suite(seed)?,
            "dynamics" => dynamics_suite(seed)?,
            "spectral" => spectral_suite(exp, seed)?,
            "geometry" => geometry_suite(exp)?,
            _ => unreachable!(),
        };
        print_section(s, &checks);
        all.extend(checks);
    }

    Ok(if summarize(&all) { 0 } else { 1 })
}

/// Hermiticity of the metric the run would use. `--inject` corrupts it
/// here, so this is the invariant that must catch the corruption.
fn metric_hermiticity(exp: &Experiment, inject: Option<Injection>, seed: u64) -> Result<Check> {
    let geo = exp.geometry(8)?;
    let g = Grid::new(geo.m, geo.n)?;
    let mut h = MetricField::identity(g, geo.k);
    if matches!(inject, Some(Injection::MetricNonhermitian)) {
        // a non-real diagonal entry breaks h = h^+ at every point
        let _ = seed;
        for p in 0..g.points() {
            h.field.block_mut(p)[0] += Complex64::new(0.0, 0.3);
        }
    }
    let k = geo.k;
    let mut defect = 0.0f64;
    for p in 0..g.points() {
        let b = h.field.block(p);
        for r in 0..k {
            for c in 0..k {
                defect = defect.max((b[r * k + c] - b[c * k + r].conj()).norm());
            }
        }
    }
    Ok(Check::new("metric-hermiticity", defect, 1e-12))
}

fn seeded_family(
    g: Grid,
    h: &MetricField,
    k: usize,
    n_sections: usize,
    seed: u64,
) -> Result<SectionFamily> {
    let raw = SectionFamily::random_band_limited(g, k, n_sections, 2, seed);
    orthonormalize(&raw, h)
}

fn grassmann_suite(seed: u64) -> Result<Vec<Check>> {
    let g = Grid::new(1, 8)?;
    let mut idem = 0.0f64;
    let mut herm = 0.0f64;
    let mut trace = 0.0f64;
    let mut ambient = 0.0f64;
    let mut compat = 0.0f64;
    let mut balanced = 0.0f64;
    for s in 0..5u64 {
        for k in [1usize, 2] {
            let h = MetricField::identity(g, k);
            let conn = ConnectionField::flat(g, k);
            let fam = seeded_family(g, &h, k, k + 3, seed.wrapping_add(s))?;
            let gf = canonical_map(&h, &fam)?;

            let d = gf.projector_defects();
            idem = idem.max(d.idempotence);
            herm = herm.max(d.hermiticity);
            trace = trace.max(d.trace);

            // shifting the ambient connection by a (1,0)-only correction
            // (a_{2j}, a_{2j+1}) = (b, ib) leaves every dbar untouched
            let mut shifted = conn.clone();
            let mut rng = canonflow::rng::rng_from(seed.wrapping_add(s), 31);
            for j in 0..g.m {
                for p in 0..g.points() {
                    let b: Vec<Complex64> =
                        (0..k * k).map(|_| canonflow::rng::complex_gaussian(&mut rng)).collect();
                    for (e, v) in shifted.correction[2 * j].block_mut(p).iter_mut().zip(&b) {
                        *e += v;
                    }
                    for (e, v) in shifted.correction[2 * j + 1].block_mut(p).iter_mut().zip(&b) {
                        *e += Complex64::new(0.0, 1.0) * v;
                    }
                }
            }
            let sc1 = pullback_semiconnection(&gf, &conn, canonflow::geometry::Scheme::Forward)?;
            let sc2 = pullback_semiconnection(&gf, &shifted, canonflow::geometry::Scheme::Forward)?;
            for mu in 0..g.axes() {
                let mut diff = sc1.correction[mu].clone();
                diff.axpy(Complex64::new(-1.0, 0.0), &sc2.correction[mu]);
                ambient = ambient.max(diff.linf_frobenius());
            }

            let hp = pullback_metric(&gf, &conn, canonflow::geometry::Scheme::Forward)?;
            let ap = pullback_connection(&gf, &conn, canonflow::geometry::Scheme::Forward)?;
            compat = compat.max(compatibility_residual(&ap, &hp));

            let bal = pullback_semiconnection(&gf, &conn, canonflow::geometry::Scheme::Forward)?;
            let rep_b = energies(&fam, &h, &bal)?;
            let rep_a = energies(&fam, &h, &conn)?;
            for p in 0..g.points() {
                balanced =
                    balanced.max((rep_b.density01.data[p] - rep_a.density01_g.data[p]).abs());
            }
        }
    }
    Ok(vec![
        Check::new("projector-idempotency", idem, 1e-10),
        Check::new("projector-hermiticity", herm, 1e-12),
        Check::new("projector-trace", trace, 1e-10),
        Check::new("semiconnection-ambient-independence", ambient, 1e-12),
        Check::new("pullback-compatibility", compat, 1e-10),
        Check::new("balanced-density-identity", balanced, 1e-10),
    ])
}

fn dynamics_suite(seed: u64) -> Result<Vec<Check>> {
    // monotone descent of the (0,1) energy across seeded flows
    let mut worst_rise = 0.0f64;
    for s in 0..2u64 {
        let cfg = FlowConfig {
            m: 1,
            n: 12,
            k: 1,
            sections: 3,
            twist: vec![],
            system: canonflow::FlowSystem::T01,
            eps: 1e-2,
            seed: seed.wrapping_add(s),
            band: 2,
            start_modes: None,
            max_iters: 8,
            abs_tol: 0.0,
            rel_tol: 0.0,
            monitors: MonitorConfig::default(),
            unitary_speedup: false,
        };
        let run = run_flow(&cfg)?;
        let mut prev = run.trace.initial.phi01;
        for row in &run.trace.rows {
            worst_rise = worst_rise.max(row.phi01 - prev);
            prev = row.phi01;
        }
    }

    // a one-dimensional family lands on the lowest eigensection in one step
    let cfg1 = FlowConfig {
        m: 1,
        n: 12,
        k: 1,
        sections: 1,
        twist: vec![],
        system: canonflow::FlowSystem::T01,
        eps: 1e-2,
        seed,
        band: 2,
        start_modes: None,
        max_iters: 1,
        abs_tol: 0.0,
        rel_tol: 0.0,
        monitors: MonitorConfig::default(),
        unitary_speedup: false,
    };
    let one = run_flow(&cfg1)?;
    let rank_one = one.trace.rows[0].phi01;

    // gauge equivariance of one step, and recovery of a planted gauge
    let cfg2 = FlowConfig { sections: 4, n: 8, max_iters: 8, ..cfg1.clone() };
    let triple = cfg2.initial_triple()?;
    let gauge = phase_gauge(triple.grid(), 1, seed.wrapping_add(9));
    let gauged = triple.gauge_transform(&gauge)?;
    let mon = MonitorConfig::default();
    let a = step_t01(&triple, seed, &mon)?;
    let b = step_t01(&gauged, seed, &mon)?;
    let equiv = (a.row.phi01 - b.row.phi01)
        .abs()
        .max((a.row.phi - b.row.phi).abs())
        .max((a.row.min_sv_pi - b.row.min_sv_pi).abs());

    let (planted, _) = planted_gauge_checks(&triple, &gauge)?;

    Ok(vec![
        Check::new("t01-energy-monotonicity", worst_rise.max(0.0), 1e-12),
        Check::new("rank-one-exactness", rank_one, 1e-12),
        Check::new("step-gauge-equivariance", equiv, 1e-10),
        Check::new("soliton-planted-recovery", planted, 1e-8),
    ])
}

fn kernel_dimension(m: usize, n: usize, k: usize, twist: Twist, c: i64, seed: u64) -> Result<Check> {
    let g = Grid::new(m, n)?;
    let cfg = BundleConfig::new(k, 1, twist)?;
    let conn = ConnectionField::reference(g, &cfg)?;
    let h = MetricField::identity(g, k);
    let lap = assemble_laplacian(&conn, &h, LapKind::Dbar, None)?;
    let want = (c as usize + 3).min(lap.dim());
    let spec = lowest_eigenpairs(&lap, want, seed)?;
    let dim = spec.eigenvalues.iter().filter(|&&l| l < 1e-6).count();
    let name: &'static str = match c {
        1 => "kernel-dimension-degree-1",
        2 => "kernel-dimension-degree-2",
        _ => "kernel-dimension",
    };
    Ok(Check::with_note(
        name,
        (dim as f64 - c as f64).abs(),
        0.5,
        format!("measured {dim}, expected {c}"),
    ))
}

fn spectral_suite(exp: &Experiment, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // full Laplacian of the flat line bundle against the lattice symbol
    let g = Grid::new(1, 8)?;
    let conn = ConnectionField::flat(g, 1);
    let h = MetricField::identity(g, 1);
    let lap = assemble_laplacian(&conn, &h, LapKind::Full, None)?;
    let spec = full_spectrum(&lap)?;
    let nn = g.n as f64;
    let mut expected: Vec<f64> = (0..g.n as i64)
        .flat_map(|q0| (0..g.n as i64).map(move |q1| (q0, q1)))
        .map(|(q0, q1)| {
            let s0 = (std::f64::consts::PI * q0 as f64 / nn).sin();
            let s1 = (std::f64::consts::PI * q1 as f64 / nn).sin();
            4.0 * nn * nn * (s0 * s0 + s1 * s1)
        })
        .collect();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let flat_slack = spec
        .eigenvalues
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    checks.push(Check::new("flat-spectrum-closed-form", flat_slack, 1e-9));

    // twisted kernels carry exactly c discrete zero modes
    let geo = exp.geometry(16)?;
    let config_c = if geo.m == 1 { geo.twist.get(0, 1) } else { 0 };
    if exp.has_geometry() && config_c > 0 {
        checks.push(kernel_dimension(geo.m, geo.n, geo.k, geo.twist.clone(), config_c, seed)?);
    } else {
        for c in [1i64, 2] {
            let tw = Twist::single(2, 0, 1, c)?;
            checks.push(kernel_dimension(1, 16, 1, tw, c, seed)?);
        }
    }

    // heat reconstruction of the flat diagonal against the theta value
    let g32 = Grid::new(1, 32)?;
    let modes = SpectralData::analytic_flat(g32, 600)?;
    let t = 0.01;
    let hp = heat_projection(&modes, t)?;
    let theta = theta_value(t, g32.m);
    let mut heat_slack = 0.0f64;
    for p in 0..g32.points() {
        heat_slack = heat_slack.max((hp.diag.block(p)[0].re - theta).abs());
        heat_slack = heat_slack.max(hp.diag.block(p)[0].im.abs());
    }
    checks.push(Check::new("heat-flat-reconstruction", heat_slack, 1e-10));

    // a spectrum truncated far above the heat tail must be rejected
    let short = SpectralData::analytic_flat(g32, 20)?;
    let refused = match heat_projection(&short, t) {
        Err(e) => e.to_string().contains("lambda_max"),
        Ok(_) => false,
    };
    checks.push(Check::boolean(
        "heat-cutoff-detection",
        refused,
        "truncated spectrum rejected by name".into(),
    ));

    Ok(checks)
}

/// Heat trace of the flat torus: a product of one-axis theta sums.
fn theta_value(t: f64, m: usize) -> f64 {
    let mut one = 0.0f64;
    for a in -60i64..=60 {
        one += (-4.0 * std::f64::consts::PI.powi(2) * t * (a * a) as f64).exp();
    }
    one.powi(2 * m as i32)
}

fn geometry_suite(exp: &Experiment) -> Result<Vec<Check>> {
    let mut unitarity = 0.0f64;
    let mut degree_slack = 0.0f64;
    let mut antiherm = 0.0f64;
    let mut note = String::new();

    let geo = exp.geometry(16)?;
    let instances: Vec<(usize, usize, usize, Twist, i64)> = if exp.has_geometry() {
        // degree under the standard symplectic pairing: the twist entries
        // on the complex-structure pairs
        let mut c = geo.twist.get(0, 1);
        if geo.m == 2 {
            c += geo.twist.get(2, 3);
        }
        vec![(geo.m, geo.n, geo.k, geo.twist.clone(), c)]
    } else {
        [1i64, 2]
            .into_iter()
            .map(|c| (1usize, 16usize, 1usize, Twist::single(2, 0, 1, c).unwrap(), c))
            .collect()
    };

    for (m, n, k, tw, c) in instances {
        let g = Grid::new(m, n)?;
        let cfg = BundleConfig::new(k, 1, tw)?;
        let conn = ConnectionField::reference(g, &cfg)?;

        let mut prod = vec![Complex64::default(); k * k];
        for mu in 0..g.axes() {
            let links = conn.link(mu);
            for p in 0..g.points() {
                canonflow::cmat::mul_adjoint_left(links.block(p), links.block(p), &mut prod, k, k, k);
                for r in 0..k {
                    for col in 0..k {
                        let want = if r == col { 1.0 } else { 0.0 };
                        unitarity = unitarity.max((prod[r * k + col] - want).norm());
                    }
                }
            }
        }

        let forms = chern_forms(&conn, 1)?;
        let deg = forms.degree.expect("degree defined for p = 1");
        degree_slack = degree_slack.max((deg - c as f64).abs());
        if !note.is_empty() {
            note.push_str(", ");
        }
        note.push_str(&format!("deg {deg:.2e} vs {c}"));

        let f = conn.curvature()?;
        let mut adj = vec![Complex64::default(); k * k];
        for comp in &f.comps {
            for p in 0..g.points() {
                let b = comp.block(p);
                canonflow::cmat::adjoint(b, &mut adj, k, k);
                for i in 0..k * k {
                    antiherm = antiherm.max((b[i] + adj[i]).norm());
                }
            }
        }
    }

    let rejected = Twist::new(2, vec![0, 1, 1, 0]).is_err();

    Ok(vec![
        Check::new("link-unitarity", unitarity, 1e-12),
        Check::with_note("chern-degree-integrality", degree_slack, 1e-8, note),
        Check::new("curvature-antihermiticity", antiherm, 1e-10),
        Check::boolean("twist-antisymmetry-validation", rejected, "bad twist rejected".into()),
    ])
}
