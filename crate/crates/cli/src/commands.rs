use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Context, Result};
use interfacial::export::{deformed_mesh_vtk, interface_obj, interface_vtk, to_csv, write_atomic};
use interfacial::mesh::FaceTag;
use interfacial::scenes::{cylinder_patch, plane_patch, sphere_surface};
use interfacial::topopt::{mass_residual, objective_interface, Evaluation};
use interfacial::varifold::{boundary_defect, curvature_integral, extract_reference_interface, varifold_mass};
use interfacial::{
    bulk_energy, ciarlet_necas_residual, extract_interface, load_potential, minimize_equilibrium, optimize_topology,
    DeformationState, InterfaceVarifold, MonteCarlo, ReferenceMesh,
};
use serde::Serialize;

use crate::scenario::{CurvatureSpec, Scenario};

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    write_text(dir, name, &to_csv(rows)?)
}

#[derive(Serialize)]
struct MeshSummary {
    vertices: usize,
    tets: usize,
    boundary_faces: usize,
    dirichlet_faces: usize,
    neumann_faces: usize,
    volume: f64,
    reoriented_tets: usize,
}

fn mesh_summary(mesh: &ReferenceMesh, reoriented: usize) -> MeshSummary {
    let count = |tag| mesh.boundary_faces().iter().filter(|f| f.tag == tag).count();
    MeshSummary {
        vertices: mesh.num_vertices(),
        tets: mesh.num_tets(),
        boundary_faces: mesh.boundary_faces().len(),
        dirichlet_faces: count(FaceTag::Dirichlet),
        neumann_faces: count(FaceTag::Neumann),
        volume: mesh.total_volume(),
        reoriented_tets: reoriented,
    }
}

#[derive(Serialize)]
struct ValidationOutput {
    valid: bool,
    seed: u64,
    mesh: MeshSummary,
    mesh_checks: Vec<(String, bool)>,
    phase1_tets: usize,
    phase1_fraction: f64,
    mass_residual: f64,
    interface_triangles: Option<usize>,
    interface_mass: Option<f64>,
    interface_boundary_defect: Option<usize>,
    identity_bulk_energy: f64,
    identity_injectivity_residual: f64,
    problems: Vec<String>,
    warnings: Vec<String>,
}

pub fn validate(s: &Scenario, out: &Path) -> Result<()> {
    let (mesh, report) = s.build_mesh()?;
    let phases = s.build_labels(&mesh)?;
    let mut problems: Vec<String> = report.failures().map(|c| format!("mesh check failed: {}", c.name)).collect();
    let mut warnings = Vec::new();
    for r in [
        s.model.validate_for(&mesh).map_err(|e| e.to_string()),
        s.solve.validate().map_err(|e| e.to_string()),
        s.topopt.validate().map_err(|e| e.to_string()),
    ] {
        if let Err(e) = r {
            problems.push(e);
        }
    }
    let interface = extract_reference_interface(&mesh, &phases);
    if let Err(e) = &interface {
        problems.push(format!("interface: {e}"));
    }
    let residual = mass_residual(&mesh, &phases, s.model.eta);
    if residual.abs() > s.topopt.mass_tolerance * mesh.total_volume() {
        warnings.push(format!("initial labeling misses the volume fraction by {residual:.3e}"));
    }
    if !mesh.boundary_faces().iter().any(|f| f.tag == FaceTag::Dirichlet) {
        warnings.push("no Dirichlet faces: equilibrium is defined up to rigid motions".into());
    }
    let identity = DeformationState::identity(&mesh);
    let e0 = bulk_energy(&mesh, &identity, &phases, &s.model).to_f64();
    let samples = s.solve.injectivity_samples.max(1);
    let cn = ciarlet_necas_residual(&mesh, &identity, MonteCarlo { samples, seed: s.solve_options().seed })?;
    if !cn.within(s.solve.injectivity_sigmas, 0.0) {
        warnings.push(format!("identity injectivity residual {:.3e} exceeds {} sigma", cn.residual, s.solve.injectivity_sigmas));
    }
    let iface = interface.as_ref().ok();
    let output = ValidationOutput {
        valid: problems.is_empty(),
        seed: s.seed,
        mesh: mesh_summary(&mesh, report.orientation_fixes.len()),
        mesh_checks: report.checks.iter().map(|c| (c.name.to_string(), c.passed)).collect(),
        phase1_tets: phases.count_ones(),
        phase1_fraction: phases.phase1_volume(&mesh) / mesh.total_volume(),
        mass_residual: residual,
        interface_triangles: iface.map(|v| v.triangles().len()),
        interface_mass: iface.map(varifold_mass),
        interface_boundary_defect: iface.map(|v| boundary_defect(v, mesh.boundary_edges())),
        identity_bulk_energy: e0,
        identity_injectivity_residual: cn.residual,
        problems,
        warnings,
    };
    write_json(out, "validation.json", &output)?;
    println!("{}", serde_json::to_string_pretty(&output)?);
    if !output.valid {
        bail!("scenario is invalid: {}", output.problems.join("; "));
    }
    Ok(())
}

#[derive(Serialize)]
struct EquilibriumSummary {
    seed: u64,
    converged: bool,
    failed: bool,
    iterations: usize,
    initial_objective: f64,
    final_objective: f64,
    final_grad_norm: f64,
    min_det: f64,
    bulk_energy: f64,
    load_potential: f64,
    interface_mass: f64,
    det_guard_hits: usize,
    injectivity_guard_hits: usize,
    fallback_steps: usize,
    injectivity_residual: Option<f64>,
}

pub fn equilibrium(s: &Scenario, out: &Path) -> Result<()> {
    let (mesh, _) = s.build_mesh()?;
    let phases = s.build_labels(&mesh)?;
    s.model.validate_for(&mesh)?;
    let opts = s.solve_options();
    let (state, report) = minimize_equilibrium(&mesh, &DeformationState::identity(&mesh), &phases, &s.model, &opts)?;
    let v = extract_interface(&mesh, &state, &phases)?;
    write_csv(out, "solve_log.csv", &report.history)?;
    write_text(out, "deformed.vtk", &deformed_mesh_vtk(&mesh, &state, &phases))?;
    write_interface(out, "interface", &v)?;
    let summary = EquilibriumSummary {
        seed: s.seed,
        converged: report.converged,
        failed: report.failed,
        iterations: report.iterations,
        initial_objective: report.initial_objective,
        final_objective: report.final_objective,
        final_grad_norm: report.final_grad_norm,
        min_det: report.min_det,
        bulk_energy: bulk_energy(&mesh, &state, &phases, &s.model).to_f64(),
        load_potential: load_potential(&mesh, &state, &phases, &s.model),
        interface_mass: varifold_mass(&v),
        det_guard_hits: report.det_guard_hits,
        injectivity_guard_hits: report.injectivity_guard_hits,
        fallback_steps: report.fallback_steps,
        injectivity_residual: report.injectivity.map(|c| c.residual),
    };
    write_json(out, "summary.json", &summary)?;
    eprintln!(
        "equilibrium: {} after {} iterations, objective {:.6e}, |grad| {:.2e}",
        if report.converged { "converged" } else { "not converged" },
        report.iterations,
        report.final_objective,
        report.final_grad_norm
    );
    if !report.converged {
        bail!("solver stopped without meeting the gradient tolerance (|grad| = {:.3e})", report.final_grad_norm);
    }
    Ok(())
}

fn write_interface(out: &Path, stem: &str, v: &InterfaceVarifold) -> Result<()> {
    write_text(out, &format!("{stem}.vtk"), &interface_vtk(v))?;
    write_text(out, &format!("{stem}.obj"), &interface_obj(v))
}

#[derive(Serialize)]
struct EvaluationSummary {
    objective: f64,
    compliance: f64,
    interface_energy: f64,
    mu_v: f64,
    boundary_defect: usize,
    min_det: f64,
    injectivity_ok: bool,
}

impl From<&Evaluation> for EvaluationSummary {
    fn from(e: &Evaluation) -> Self {
        Self {
            objective: e.objective,
            compliance: e.compliance,
            interface_energy: e.interface_energy,
            mu_v: e.mu_v,
            boundary_defect: e.boundary_defect,
            min_det: e.min_det,
            injectivity_ok: e.injectivity_ok,
        }
    }
}

#[derive(Serialize)]
struct TopOptSummary {
    seed: u64,
    chain_seed: u64,
    /// Proposals made; the trace has one more row for the initial state.
    steps: usize,
    accepted: usize,
    inner_failures: usize,
    snapshots: usize,
    phase1_tets: usize,
    initial: EvaluationSummary,
    best: EvaluationSummary,
}

pub fn topopt(s: &Scenario, out: &Path) -> Result<()> {
    let (mesh, _) = s.build_mesh()?;
    let init = s.build_labels(&mesh)?;
    let config = s.topopt_config();
    let mut snapshots = 0;
    let result = if s.snapshot_interval > 0 {
        if config.chains > 1 {
            bail!("snapshots need a single chain, got chains = {}", config.chains);
        }
        let mut first_error = None;
        let mut hook = |_step: usize, accepted: usize, state: &DeformationState, phases: &interfacial::PhaseLabeling| {
            if !accepted.is_multiple_of(s.snapshot_interval) || first_error.is_some() {
                return;
            }
            let stem = format!("snapshots/accepted_{accepted:06}");
            let r = objective_interface(&mesh, state, phases, config.mode)
                .map_err(anyhow::Error::from)
                .and_then(|v| {
                    write_text(out, &format!("{stem}.vtk"), &deformed_mesh_vtk(&mesh, state, phases))?;
                    write_text(out, &format!("{stem}.obj"), &interface_obj(&v))
                });
            match r {
                Ok(()) => snapshots += 1,
                Err(e) => first_error = Some(e),
            }
        };
        let r = interfacial::topopt::optimize_topology_with(&mesh, &init, &s.model, &config, &mut hook)?;
        if let Some(e) = first_error {
            return Err(e.context("writing snapshot"));
        }
        r
    } else {
        optimize_topology(&mesh, &init, &s.model, &config)?
    };
    write_csv(out, "trace.csv", &result.trace)?;
    write_text(out, "best.vtk", &deformed_mesh_vtk(&mesh, &result.best_state, &result.best_phases))?;
    let v = objective_interface(&mesh, &result.best_state, &result.best_phases, config.mode)?;
    write_interface(out, "best_interface", &v)?;
    let summary = TopOptSummary {
        seed: s.seed,
        chain_seed: result.seed,
        steps: result.trace.len() - 1,
        accepted: result.accepted,
        inner_failures: result.inner_failures,
        snapshots,
        phase1_tets: result.best_phases.count_ones(),
        initial: (&result.initial).into(),
        best: (&result.best).into(),
    };
    write_json(out, "summary.json", &summary)?;
    eprintln!(
        "topopt: {} steps, {} accepted, objective {:.6e} -> {:.6e}",
        summary.steps, summary.accepted, summary.initial.objective, summary.best.objective
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub surface: &'static str,
    pub level: usize,
    pub vertices: usize,
    pub triangles: usize,
    pub mass: f64,
    pub exact_mass: f64,
    pub curvature_integral: f64,
    pub exact_curvature_integral: f64,
    pub abs_error: f64,
}

fn row(surface: &'static str, level: usize, v: &InterfaceVarifold, exact_mass: f64, exact: f64) -> ConvergenceRow {
    let a2 = curvature_integral(v, 2.0);
    ConvergenceRow {
        surface,
        level,
        vertices: v.vertices().len(),
        triangles: v.triangles().len(),
        mass: varifold_mass(v),
        exact_mass,
        curvature_integral: a2,
        exact_curvature_integral: exact,
        abs_error: (a2 - exact).abs(),
    }
}

/// `∫|A|²` (with `|A|² = 2|II|²`) on refinements of three reference surfaces.
pub fn convergence_table(spec: &CurvatureSpec) -> Result<Vec<ConvergenceRow>> {
    let (r, h) = (spec.radius, spec.cylinder_height);
    if !(r > 0.0 && h > 0.0) {
        bail!("curvature radius and cylinder height must be positive");
    }
    let mut rows = Vec::new();
    for &l in &spec.levels {
        rows.push(row("sphere", l, &sphere_surface(l, r), 4.0 * PI * r * r, 16.0 * PI));
    }
    for &l in &spec.levels {
        rows.push(row("plane", l, &plane_patch(r, 2 << l), r * r, 0.0));
    }
    for &l in &spec.levels {
        let n_theta = 6 << l;
        let n_z = ((h * n_theta as f64 / (2.0 * PI * r)).round() as usize).max(1);
        rows.push(row("cylinder", l, &cylinder_patch(r, h, n_theta, n_z), 2.0 * PI * r * h, 4.0 * PI * h / r));
    }
    Ok(rows)
}

pub fn curvature_test(spec: &CurvatureSpec, out: &Path) -> Result<()> {
    let rows = convergence_table(spec)?;
    write_csv(out, "curvature_convergence.csv", &rows)?;
    println!("{:<9} {:>5} {:>9} {:>12} {:>12} {:>10}", "surface", "level", "triangles", "int |A|^2", "exact", "abs error");
    for r in &rows {
        println!(
            "{:<9} {:>5} {:>9} {:>12.6} {:>12.6} {:>10.3e}",
            r.surface, r.level, r.triangles, r.curvature_integral, r.exact_curvature_integral, r.abs_error
        );
    }
    Ok(())
}
