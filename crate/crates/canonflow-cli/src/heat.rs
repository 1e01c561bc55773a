//! `canonflow heat`: reconstruction error of the heat-kernel routes on the
//! configured bundle, tabulated over the time list.
//!
//! Untwisted bundles compare the projected diagonal against the closed-form
//! theta value. Twisted bundles reconstruct the curvature from the spectrum
//! (shifted by W = w I when configured) and report the sup-norm error
//! against the finite-difference curvature, with consecutive ratios: the
//! reconstruction is linear in t, so halving t should halve the error.

use std::fs;

use canonflow::{
    assemble_laplacian, entropy_curvature, full_spectrum, heat_projection, lowest_eigenpairs,
    BundleConfig, CanonError, ConnectionField, Grid, LapKind, MatField, MetricField, Result,
    SpectralData,
};
use num_complex::Complex64;

use crate::experiment::Experiment;

const FLAT_TOL: f64 = 1e-10;

pub fn cmd_heat(exp: &Experiment) -> anyhow::Result<u8> {
    let geo = exp.geometry(32)?;
    let mut times = exp.heat.t.clone();
    if times.is_empty() {
        return Err(CanonError::Config("heat.t is empty".into()).into());
    }
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(CanonError::Config("heat times must be positive".into()).into());
    }
    times.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let g = Grid::new(geo.m, geo.n)?;
    let twisted = (0..g.axes())
        .any(|mu| (0..g.axes()).any(|nu| geo.twist.get(mu, nu) != 0));

    let rows = if twisted {
        curvature_study(exp, &geo.twist, g, geo.k, &times)?
    } else {
        flat_study(exp, g, &times)?
    };

    println!("{:>10}  {:>12}  {:>6}", "t", "error", "ratio");
    for (i, (t, err)) in rows.iter().enumerate() {
        let ratio = if i == 0 { "-".to_string() } else { format!("{:.3}", rows[i - 1].1 / err) };
        println!("{t:>10.6}  {err:>12.3e}  {ratio:>6}");
    }

    let mut ok = true;
    if !twisted {
        ok = rows.iter().all(|&(_, e)| e <= FLAT_TOL);
        println!(
            "flat reconstruction {} (tolerance {FLAT_TOL:.0e})",
            if ok { "exact" } else { "BROKEN" }
        );
    }

    if let Some(out) = &exp.out {
        fs::create_dir_all(out)?;
        let mut csv = String::from("t,error,ratio\n");
        for (i, (t, err)) in rows.iter().enumerate() {
            let ratio = if i == 0 { f64::NAN } else { rows[i - 1].1 / err };
            csv.push_str(&format!("{t:?},{err:?},{ratio:?}\n"));
        }
        fs::write(out.join("study.csv"), csv)?;
        let mut experiment = serde_json::json!({
            "m": geo.m, "n": geo.n, "k": geo.k,
            "heat": exp.heat,
        });
        let tw: Vec<serde_json::Value> = (0..g.axes())
            .flat_map(|mu| (mu + 1..g.axes()).map(move |nu| (mu, nu)))
            .filter(|&(mu, nu)| geo.twist.get(mu, nu) != 0)
            .map(|(mu, nu)| {
                serde_json::json!({"mu": mu, "nu": nu, "c": geo.twist.get(mu, nu)})
            })
            .collect();
        if !tw.is_empty() {
            experiment["twist"] = serde_json::Value::Array(tw);
        }
        let manifest = serde_json::json!({
            "tool": "canonflow",
            "version": canonflow::build_version(),
            "command": "heat",
            "experiment": experiment,
            "outputs": ["study.csv"],
        });
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        println!("wrote {}", out.join("study.csv").display());
    }

    Ok(if ok { 0 } else { 1 })
}

/// Projected heat diagonal of the trivial bundle against the theta value.
fn flat_study(exp: &Experiment, g: Grid, times: &[f64]) -> Result<Vec<(f64, f64)>> {
    let count = exp.heat.modes.unwrap_or(600);
    let spec = SpectralData::analytic_flat(g, count)?;
    let mut rows = Vec::new();
    for &t in times {
        let hp = heat_projection(&spec, t)?;
        let theta = theta_value(t, g.m);
        let mut err = 0.0f64;
        for p in 0..g.points() {
            let d = hp.diag.block(p)[0];
            err = err.max((d.re - theta).abs()).max(d.im.abs());
        }
        rows.push((t, err));
    }
    Ok(rows)
}

/// Full theta sum; the mode list is forced past the heat tail by the
/// cutoff check, so truncation sits far below the comparison tolerance.
fn theta_value(t: f64, m: usize) -> f64 {
    let mut one = 0.0f64;
    for a in -60i64..=60 {
        one += (-4.0 * std::f64::consts::PI.powi(2) * t * (a * a) as f64).exp();
    }
    one.powi(2 * m as i32)
}

/// Spectral curvature reconstruction against the finite-difference
/// curvature, compensating the uniform shift W = w I by e^{+wt}.
fn curvature_study(
    exp: &Experiment,
    twist: &canonflow::geometry::Twist,
    g: Grid,
    k: usize,
    times: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let cfg = BundleConfig::new(k, 1, twist.clone())?;
    let conn = ConnectionField::reference(g, &cfg)?;
    let h = MetricField::identity(g, k);
    let w = exp.heat.w;
    let wf = if w != 0.0 {
        let mut f = MatField::zeros(g, k, k);
        for p in 0..g.points() {
            let b = f.block_mut(p);
            for r in 0..k {
                b[r * k + r] = Complex64::new(w, 0.0);
            }
        }
        Some(f)
    } else {
        None
    };
    let lap = assemble_laplacian(&conn, &h, LapKind::Dbar, wf.as_ref())?;
    let spec = match exp.heat.modes {
        Some(modes) if modes < lap.dim() => lowest_eigenpairs(&lap, modes, 7)?,
        _ => full_spectrum(&lap)?,
    };
    let fd = conn.curvature()?;
    let mut rows = Vec::new();
    for &t in times {
        let ent = entropy_curvature(&spec, &conn, t)?;
        let comp = (w * t).exp();
        let mut err = 0.0f64;
        for (a, b) in ent.comps.iter().zip(&fd.comps) {
            let mut diff = a.clone();
            diff.scale(Complex64::new(comp, 0.0));
            diff.axpy(Complex64::new(-1.0, 0.0), b);
            err = err.max(diff.linf_frobenius());
        }
        rows.push((t, err));
    }
    Ok(rows)
}
