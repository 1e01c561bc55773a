//! `canonflow flow`: run the configured system for every seed, one worker
//! per seed up to the thread budget, and write the orchestrator manifest
//! once everything has landed.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use canonflow::{run_flow, trace_to_csv, CanonError, FlowConfig, StopReason};

use crate::experiment::Experiment;

struct RunSummary {
    seed: u64,
    config_hash: String,
    path: String,
    stop: StopReason,
    iterations: usize,
    terminated: bool,
    final_phi01: f64,
}

pub fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1);
    let budget = std::env::var("CANONFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(available);
    budget.min(jobs).max(1)
}

pub fn cmd_flow(exp: &Experiment) -> anyhow::Result<u8> {
    let out = exp.out.clone().ok_or_else(|| {
        CanonError::Config("flow needs an output directory: pass --out or set out in the config".into())
    })?;
    let configs: Vec<FlowConfig> =
        exp.seeds.iter().map(|&s| exp.flow_config(s)).collect::<canonflow::Result<_>>()?;
    for c in &configs {
        c.validate()?;
    }
    fs::create_dir_all(&out)?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunSummary, String>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    let workers = worker_count(configs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let res = run_one(&configs[i], &out);
                *slots[i].lock().unwrap() = Some(res);
            });
        }
    });

    let mut runs = Vec::with_capacity(configs.len());
    let mut errors = Vec::new();
    for slot in slots {
        match slot.into_inner().unwrap().expect("worker finished") {
            Ok(s) => runs.push(s),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        if errors.len() == 1 {
            anyhow::bail!("{}", errors[0]);
        }
        for e in &errors {
            eprintln!("error: {e}");
        }
        anyhow::bail!("{} of {} seeds failed", errors.len(), configs.len());
    }

    for r in &runs {
        println!(
            "seed {}: {} after {} iterations, phi01 {:.3e} -> {}",
            r.seed,
            r.stop,
            r.iterations,
            r.final_phi01,
            out.join(&r.path).display()
        );
    }

    let manifest = orchestrator_manifest(&configs[0], exp, &runs);
    let mpath = out.join("manifest.json");
    fs::write(&mpath, manifest)?;
    println!("manifest: {}", mpath.display());

    let any_terminated = runs.iter().any(|r| r.terminated);
    Ok(if any_terminated { 2 } else { 0 })
}

fn run_one(cfg: &FlowConfig, out: &Path) -> Result<RunSummary, String> {
    let run = run_flow(cfg).map_err(|e| format!("seed {}: {e}", cfg.seed))?;
    let dir = out.join(format!("seed-{}", cfg.seed));
    fs::create_dir_all(&dir).map_err(|e| format!("seed {}: {e}", cfg.seed))?;
    let rel = format!("seed-{}/trace.csv", cfg.seed);
    fs::write(dir.join("trace.csv"), trace_to_csv(&run.trace))
        .map_err(|e| format!("seed {}: {e}", cfg.seed))?;
    let trace = &run.trace;
    let last = trace.rows.last().unwrap_or(&trace.initial);
    Ok(RunSummary {
        seed: cfg.seed,
        config_hash: trace.config_hash.clone(),
        path: rel,
        stop: trace.stop,
        iterations: last.iteration,
        terminated: last.terminated,
        final_phi01: last.phi01,
    })
}

fn orchestrator_manifest(cfg0: &FlowConfig, exp: &Experiment, runs: &[RunSummary]) -> String {
    let mut experiment = serde_json::to_value(cfg0).expect("config serializes");
    let obj = experiment.as_object_mut().unwrap();
    obj.insert("seeds".into(), serde_json::json!(exp.seeds));
    let manifest = serde_json::json!({
        "tool": "canonflow",
        "version": canonflow::build_version(),
        "command": "flow",
        "columns": canonflow::TRACE_COLUMNS,
        "tolerances": {
            "abs_tol": cfg0.abs_tol,
            "rel_tol": cfg0.rel_tol,
            "admissible_tol": canonflow::sections::ADMISSIBLE_TOL,
        },
        "experiment": experiment,
        "runs": runs.iter().map(|r| serde_json::json!({
            "seed": r.seed,
            "config_hash": r.config_hash,
            "path": r.path,
            "stop": r.stop,
            "iterations": r.iterations,
            "terminated": r.terminated,
        })).collect::<Vec<_>>(),
    });
    let mut s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    s.push('\n');
    s
}
