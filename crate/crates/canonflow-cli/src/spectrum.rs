//! `canonflow spectrum`: low end of the configured operator's spectrum.

use std::fs;

use canonflow::{
    assemble_laplacian, full_spectrum, lowest_eigenpairs, BundleConfig, CanonError,
    ConnectionField, Grid, LapKind, MetricField,
};

use crate::experiment::Experiment;

const KERNEL_TOL: f64 = 1e-6;

pub fn cmd_spectrum(kind: &str, count: usize, exp: &Experiment) -> anyhow::Result<u8> {
    let lapkind = match kind {
        "dbar" => LapKind::Dbar,
        "full" => LapKind::Full,
        other => {
            return Err(CanonError::Config(format!(
                "unknown operator kind '{other}': expected dbar or full"
            ))
            .into())
        }
    };
    if count == 0 {
        return Err(CanonError::Config("count must be at least 1".into()).into());
    }
    let geo = exp.geometry(16)?;
    let g = Grid::new(geo.m, geo.n)?;
    let cfg = BundleConfig::new(geo.k, 1, geo.twist.clone())?;
    let conn = ConnectionField::reference(g, &cfg)?;
    let h = MetricField::identity(g, geo.k);
    let lap = assemble_laplacian(&conn, &h, lapkind, None)?;

    let spec = if count * 4 >= lap.dim() {
        full_spectrum(&lap)?
    } else {
        lowest_eigenpairs(&lap, count, exp.seeds[0])?
    };
    let shown = count.min(spec.count());

    println!("operator: {} on {}x T^{}, n = {}", lapkind.label(), geo.k, 2 * geo.m, geo.n);
    println!("{:>6}  {:>22}", "index", "eigenvalue");
    for (i, l) in spec.eigenvalues.iter().take(shown).enumerate() {
        println!("{i:>6}  {l:>22.15e}");
    }
    let kernel = spec.eigenvalues.iter().take(shown).filter(|&&l| l < KERNEL_TOL).count();
    println!("kernel dimension (below {KERNEL_TOL:.0e}): {kernel}");

    if let Some(out) = &exp.out {
        fs::create_dir_all(out)?;
        let mut csv = String::from("index,eigenvalue\n");
        for (i, l) in spec.eigenvalues.iter().take(shown).enumerate() {
            csv.push_str(&format!("{i},{l:?}\n"));
        }
        fs::write(out.join("spectrum.csv"), csv)?;
        let manifest = serde_json::json!({
            "tool": "canonflow",
            "version": canonflow::build_version(),
            "command": "spectrum",
            "experiment": {
                "m": geo.m, "n": geo.n, "k": geo.k,
                "kind": kind, "count": count,
            },
            "kernel_dimension": kernel,
            "outputs": ["spectrum.csv"],
        });
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        println!("wrote {}", out.join("spectrum.csv").display());
    }
    Ok(0)
}
