//! `canonflow gauge-check`: gauge invariance of the measured quantities,
//! equivariance of one flow step, and recovery of a planted gauge by the
//! displacement minimizer.

use canonflow::geometry::GaugeTransform;
use canonflow::rng::rng_from;
use canonflow::{
    energies, soliton_residual, step_t01, CanonError, FlowConfig, Grid, MatField, MonitorConfig,
    Result, Triple,
};
use num_complex::Complex64;
use rand::Rng;

use crate::experiment::Experiment;
use crate::report::{print_section, summarize, Check};

/// Smooth seeded U(1) phase gauge, embedded centrally for k > 1. Low
/// harmonics only, so the displacement minimizer starts in its basin.
pub fn phase_gauge(g: Grid, k: usize, seed: u64) -> GaugeTransform {
    let mut rng = rng_from(seed, 13);
    let axes = g.axes();
    let amps: Vec<(f64, f64)> =
        (0..axes).map(|_| (0.1 + 0.3 * rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let mut field = MatField::zeros(g, k, k);
    let tau = 2.0 * std::f64::consts::PI;
    for p in 0..g.points() {
        let x = g.coords(p);
        let mut theta = 0.0;
        for mu in 0..axes {
            let (a, ph) = amps[mu];
            theta += a * (tau * x[mu] as f64 / g.n as f64 + tau * ph).sin();
        }
        let z = Complex64::new(0.0, theta).exp();
        let b = field.block_mut(p);
        for r in 0..k {
            b[r * k + r] = z;
        }
    }
    GaugeTransform { field, unitary: true }
}

/// Residual of the planted-gauge recovery, plus the self-displacement of
/// an unmoved triple (both should be tiny).
pub fn planted_gauge_checks(triple: &Triple, gauge: &GaugeTransform) -> Result<(f64, f64)> {
    let moved = triple.gauge_transform(gauge)?;
    let rep = soliton_residual(triple, &moved)?;
    let still = soliton_residual(triple, triple)?;
    Ok((rep.residual, still.residual))
}

pub fn cmd_gauge_check(exp: &Experiment) -> anyhow::Result<u8> {
    let seed = exp.seeds[0];
    let cfg = if exp.has_geometry() {
        exp.flow_config(seed)?
    } else {
        FlowConfig {
            m: 1,
            n: 8,
            k: 1,
            sections: 4,
            twist: vec![],
            system: canonflow::FlowSystem::T01,
            eps: 1e-2,
            seed,
            band: 2,
            start_modes: None,
            max_iters: 8,
            abs_tol: 0.0,
            rel_tol: 0.0,
            monitors: MonitorConfig::default(),
            unitary_speedup: false,
        }
    };
    cfg.validate()?;
    let triple = cfg.initial_triple()?;
    let g = triple.grid();
    let gauge = phase_gauge(g, cfg.k, seed.wrapping_add(17));
    gauge.validate().map_err(|e| CanonError::Invalid(format!("gauge construction: {e}")))?;
    let gauged = triple.gauge_transform(&gauge)?;

    let rep = energies(&triple.family, &triple.h, &triple.conn)?;
    let rep_g = energies(&gauged.family, &gauged.h, &gauged.conn)?;
    let inv = (rep.e01 - rep_g.e01).abs().max((rep.e - rep_g.e).abs());

    let mon = MonitorConfig::default();
    let a = step_t01(&triple, seed, &mon)?;
    let b = step_t01(&gauged, seed, &mon)?;
    let equiv = (a.row.phi01 - b.row.phi01)
        .abs()
        .max((a.row.phi - b.row.phi).abs())
        .max((a.row.min_sv_pi - b.row.min_sv_pi).abs());

    let (planted, still) = planted_gauge_checks(&triple, &gauge)?;

    let checks = vec![
        Check::new("energy-gauge-invariance", inv, 1e-10),
        Check::new("step-gauge-equivariance", equiv, 1e-10),
        Check::new("soliton-planted-recovery", planted, 1e-8),
        Check::new("soliton-self-displacement", still, 1e-12),
    ];
    print_section("gauge", &checks);
    Ok(if summarize(&checks) { 0 } else { 1 })
}
