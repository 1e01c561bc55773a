//! Lattice laboratory for canonical maps of triples (metric, section family,
//! connection) over flat even-dimensional tori.
//!
//! The crate builds discrete holomorphic structures on twisted bundles,
//! pulls back geometry through families of sections, and runs the discrete
//! dynamical systems whose fixed points are the balanced configurations.

pub mod cmat;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod io;
pub mod geometry;
pub mod grassmann;
pub mod grid;
pub mod rng;
pub mod sections;
pub mod spectral;

pub use dynamics::{
    kernel_projector, minimize_subspace, obstruction_monitor, run_flow, soliton_residual,
    step_t, step_t01, step_t_eps, EpsDiagnostics, FlowConfig, FlowRun, FlowSystem, FlowTrace,
    HodgeMonitor, MonitorConfig, SolitonReport, StepOutcome, StopReason, TraceRow, Triple,
    TwistEntry, TRACE_COLUMNS,
};
pub use error::{CanonError, Result};
pub use field::{MatField, ScalarField};
pub use io::{
    apply_override, build_version, config_from_value, load_config, trace_to_csv, write_run,
    RunManifest,
};
pub use geometry::{
    apply_gauge, chern_forms, compatibility_residual, type_decompose, BundleConfig,
    ChernForms, ConnectionField, GaugeTransform, MetricField, Scheme, Twist, TwoFormEndo,
};
pub use grassmann::{
    canonical_curvatures, canonical_map, canonical_map_of, projector_energy, grassmann_densities,
    curvature_bound_ratio, pullback_connection, pullback_metric, pullback_semiconnection, tension,
    CanonicalCurvature, GrassmannField, ProjectorDefects,
};
pub use grid::Grid;
pub use sections::{
    admissibility, energies, orthonormalize, projection_diagonal, AdmissibilityReport,
    EnergyReport, ProjectionDiagonal, SectionFamily,
};
pub use spectral::{
    assemble_laplacian, entropy_curvature, full_spectrum, heat_projection, lowest_eigenpairs,
    HeatProjection, LapKind, Laplacian, SpectralData,
};
