//! Equilibrium deformation for a fixed labeling.
//!
//! Minimizes `bulk_energy − load_potential` over the free nodal positions
//! with L-BFGS and a backtracking line search. Trial steps must decrease the
//! objective, keep every `det F` above a margin, and (periodically) pass the
//! Ciarlet–Nečas check; otherwise they are shrunk.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{bulk_energy, bulk_stress, load_potential, EnergyError, EnergyModel, ExtendedReal};
use crate::kinematics::{ciarlet_necas_residual, deformation_gradient, min_jacobian, CiarletNecas, DeformationState, MonteCarlo};
use crate::mesh::{triangle_area, FaceTag, ReferenceMesh, Vec3};
use crate::par;
use crate::varifold::PhaseLabeling;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("state is not feasible (min det F = {0:e})")]
    Infeasible(f64),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("invalid solver option: {0}")]
    InvalidOption(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Stop when the Euclidean norm of the free gradient drops below this.
    pub gradient_tolerance: f64,
    /// Step multiplier after a rejected trial, in `(0, 1)`.
    pub contraction: f64,
    /// Armijo constant, in `(0, 1)`.
    pub sufficient_decrease: f64,
    /// Accepted states keep `det F ≥ det_margin` in every tet.
    pub det_margin: f64,
    /// Run the Ciarlet–Nečas check every this many iterations (0 = never).
    pub injectivity_interval: usize,
    pub injectivity_samples: usize,
    /// Allowed residual in standard deviations of the Monte Carlo estimate.
    pub injectivity_sigmas: f64,
    /// Number of L-BFGS correction pairs.
    pub history: usize,
    /// Largest nodal displacement of a single trial step, in units of the
    /// smallest tet size.
    pub max_step: f64,
    pub max_backtracks: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-5,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            det_margin: 1e-6,
            injectivity_interval: 25,
            injectivity_samples: 10_000,
            injectivity_sigmas: 3.0,
            history: 8,
            max_step: 0.5,
            max_backtracks: 60,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m| Err(SolveError::InvalidOption(m));
        if !(self.gradient_tolerance > 0.0) {
            return bad("gradient_tolerance must be positive");
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad("contraction must lie in (0, 1)");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return bad("sufficient_decrease must lie in (0, 1)");
        }
        if !(self.det_margin > 0.0) {
            return bad("det_margin must be positive");
        }
        if self.injectivity_interval > 0 && self.injectivity_samples == 0 {
            return bad("injectivity_samples must be positive");
        }
        if !(self.injectivity_sigmas > 0.0) {
            return bad("injectivity_sigmas must be positive");
        }
        if self.history == 0 || self.max_backtracks == 0 {
            return bad("history and max_backtracks must be positive");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        Ok(())
    }
}

/// One accepted iterate; serialized as a row of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub min_det: f64,
    /// `;`-separated guard activations on the way to this iterate: `det`
    /// (margin violated), `cn` (injectivity check failed), `fallback`
    /// (quasi-Newton direction replaced by steepest descent).
    pub guard_flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Line search exhausted; the returned state is the last accepted one.
    pub failed: bool,
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_grad_norm: f64,
    pub min_det: f64,
    pub det_guard_hits: usize,
    pub injectivity_guard_hits: usize,
    pub fallback_steps: usize,
    pub injectivity: Option<CiarletNecas>,
    pub history: Vec<IterationRecord>,
}

/// `bulk_energy − load_potential`.
pub fn equilibrium_objective(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> ExtendedReal {
    match bulk_energy(mesh, state, phases, model) {
        ExtendedReal::Finite(e) => ExtendedReal::Finite(e - load_potential(mesh, state, phases, model)),
        ExtendedReal::Infinite => ExtendedReal::Infinite,
    }
}

/// Nodal gradient of [`equilibrium_objective`], zero on Dirichlet vertices.
pub fn equilibrium_gradient(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> Result<Vec<Vec3>, SolveError> {
    let per_tet: Vec<Result<Matrix3<f64>, EnergyError>> = par::map_range(mesh.num_tets(), |t| {
        let f = deformation_gradient(mesh, state, t);
        let p = bulk_stress(&f, phases.labels()[t], model)?;
        // columns: forces on tet vertices 1..3; vertex 0 gets minus their sum
        Ok(p * mesh.edge_inverse(t).transpose() * mesh.volumes()[t])
    });
    let mut grad = vec![Vec3::zeros(); mesh.num_vertices()];
    for (t, g) in per_tet.into_iter().enumerate() {
        let g = g.map_err(|_| SolveError::Infeasible(min_jacobian(mesh, state)))?;
        let tet = mesh.tets()[t];
        let mut sum = Vec3::zeros();
        for k in 0..3 {
            let col: Vec3 = g.column(k).into();
            grad[tet[k + 1]] += col;
            sum += col;
        }
        grad[tet[0]] -= sum;
        if phases.labels()[t] == 1 {
            let share = model.body_force.at(t) * (mesh.volumes()[t] / 4.0);
            for &v in &tet {
                grad[v] -= share;
            }
        }
    }
    for (i, b) in mesh.boundary_faces().iter().filter(|b| b.tag == FaceTag::Neumann).enumerate() {
        let [p, q, r] = b.vertices.map(|v| mesh.vertices()[v]);
        let share = model.traction.at(i) * (triangle_area(&p, &q, &r) / 3.0);
        for &v in &b.vertices {
            grad[v] -= share;
        }
    }
    for (g, &fixed) in grad.iter_mut().zip(state.dirichlet_mask()) {
        if fixed {
            *g = Vec3::zeros();
        }
    }
    Ok(grad)
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    let terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.dot(y)).collect();
    par::pairwise_sum(&terms)
}

fn norm(a: &[Vec3]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[Vec3], y: &mut [Vec3]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi * alpha;
    }
}

/// Two-loop recursion: approximate inverse Hessian times `g`.
fn lbfgs_direction(g: &[Vec3], pairs: &[(Vec<Vec3>, Vec<Vec3>, f64)]) -> Vec<Vec3> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn smallest_tet_size(mesh: &ReferenceMesh) -> f64 {
    mesh.volumes().iter().fold(f64::INFINITY, |m, &v| m.min(v)).cbrt()
}

/// Minimize the equilibrium objective from `start`.
pub fn minimize_equilibrium(
    mesh: &ReferenceMesh,
    start: &DeformationState,
    phases: &PhaseLabeling,
    model: &EnergyModel,
    options: &SolveOptions,
) -> Result<(DeformationState, SolveReport), SolveError> {
    options.validate()?;
    model.validate_for(mesh)?;
    let start_det = min_jacobian(mesh, start);
    let ExtendedReal::Finite(initial_objective) = equilibrium_objective(mesh, start, phases, model) else {
        return Err(SolveError::Infeasible(start_det));
    };
    // a start already below the margin may not get any worse
    let det_floor = options.det_margin.min(start_det);
    let step_cap = options.max_step * smallest_tet_size(mesh);

    let mut state = start.clone();
    let mut objective = initial_objective;
    let mut grad = equilibrium_gradient(mesh, &state, phases, model)?;
    let mut grad_norm = norm(&grad);
    let mut min_det = start_det;
    let mut pairs: Vec<(Vec<Vec3>, Vec<Vec3>, f64)> = Vec::new();
    let mut report = SolveReport {
        converged: false,
        failed: false,
        iterations: 0,
        initial_objective,
        final_objective: initial_objective,
        final_grad_norm: grad_norm,
        min_det,
        det_guard_hits: 0,
        injectivity_guard_hits: 0,
        fallback_steps: 0,
        injectivity: None,
        history: vec![IterationRecord {
            iter: 0,
            objective,
            grad_norm,
            min_det,
            guard_flags: String::new(),
        }],
    };

    let check_injectivity = |s: &DeformationState, iter: usize| -> Option<CiarletNecas> {
        ciarlet_necas_residual(
            mesh,
            s,
            MonteCarlo {
                samples: options.injectivity_samples,
                seed: options.seed.wrapping_add(iter as u64),
            },
        )
        .ok()
    };

    for iter in 1..=options.max_iterations {
        if grad_norm < options.gradient_tolerance {
            report.converged = true;
            break;
        }
        let mut flags: Vec<&str> = Vec::new();
        let mut dir = lbfgs_direction(&grad, &pairs);
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            pairs.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -grad_norm * grad_norm;
            flags.push("fallback");
            report.fallback_steps += 1;
        }
        let longest = dir.iter().map(|d| d.norm()).fold(0.0, f64::max);
        let mut alpha = if longest > step_cap { step_cap / longest } else { 1.0 };
        let run_cn = options.injectivity_interval > 0 && iter % options.injectivity_interval == 0;

        let mut accepted = None;
        for _ in 0..options.max_backtracks {
            let trial = state.displaced(&dir, alpha);
            let trial_det = min_jacobian(mesh, &trial);
            if !(trial_det >= det_floor) {
                if !flags.contains(&"det") {
                    flags.push("det");
                }
                report.det_guard_hits += 1;
                alpha *= options.contraction;
                continue;
            }
            let ExtendedReal::Finite(value) = equilibrium_objective(mesh, &trial, phases, model) else {
                alpha *= options.contraction;
                continue;
            };
            if !(value < objective && value <= objective + options.sufficient_decrease * alpha * slope) {
                alpha *= options.contraction;
                continue;
            }
            if run_cn {
                let ok = check_injectivity(&trial, iter).is_some_and(|cn| cn.within(options.injectivity_sigmas, 0.0));
                if !ok {
                    if !flags.contains(&"cn") {
                        flags.push("cn");
                    }
                    report.injectivity_guard_hits += 1;
                    alpha *= options.contraction;
                    continue;
                }
            }
            accepted = Some((trial, value, trial_det));
            break;
        }
        let Some((trial, value, trial_det)) = accepted else {
            report.failed = true;
            break;
        };

        let new_grad = equilibrium_gradient(mesh, &trial, phases, model)?;
        let s: Vec<Vec3> = trial.positions().iter().zip(state.positions()).map(|(a, b)| a - b).collect();
        let y: Vec<Vec3> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == options.history {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        state = trial;
        objective = value;
        grad = new_grad;
        grad_norm = norm(&grad);
        min_det = trial_det;
        report.iterations = iter;
        report.history.push(IterationRecord {
            iter,
            objective,
            grad_norm,
            min_det,
            guard_flags: flags.join(";"),
        });
    }
    if !report.failed && grad_norm < options.gradient_tolerance {
        report.converged = true;
    }
    report.final_objective = objective;
    report.final_grad_norm = grad_norm;
    report.min_det = min_det;
    if options.injectivity_samples > 0 {
        report.injectivity = check_injectivity(&state, report.iterations + 1);
    }
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::LoadField;
    use crate::scenes::{clamped_cube, unit_cube};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn relaxed() -> EnergyModel {
        EnergyModel {
            stress_free_identity: true,
            ..EnergyModel::default()
        }
    }

    fn jitter(mesh: &ReferenceMesh, amp: f64, seed: u64) -> DeformationState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = DeformationState::identity(mesh);
        let dir: Vec<Vec3> = (0..mesh.num_vertices())
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        id.displaced(&dir, amp)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mesh = clamped_cube(2).unwrap();
        let model = EnergyModel {
            body_force: LoadField::Uniform([0.1, 0.0, -1.0]),
            traction: LoadField::Uniform([0.2, 0.1, -0.3]),
            ..EnergyModel::default()
        };
        let phases = PhaseLabeling::from_fn(mesh.num_tets(), |t| t % 3 == 0);
        let state = jitter(&mesh, 0.03, 5);
        let g = equilibrium_gradient(&mesh, &state, &phases, &model).unwrap();
        let h = 1e-6 * mesh.diameter();
        let f = |s: &DeformationState| equilibrium_objective(&mesh, s, &phases, &model).value();
        for v in 0..mesh.num_vertices() {
            for a in 0..3 {
                let mut e = vec![Vec3::zeros(); mesh.num_vertices()];
                e[v][a] = 1.0;
                let fd = (f(&state.displaced(&e, h)) - f(&state.displaced(&e, -h))) / (2.0 * h);
                if state.dirichlet_mask()[v] {
                    assert_eq!(g[v][a], 0.0);
                } else {
                    assert!((fd - g[v][a]).abs() <= 1e-5 * (1.0 + fd.abs()), "v={v} a={a}: fd {fd} vs {}", g[v][a]);
                }
            }
        }
    }

    #[test]
    fn identity_is_critical_for_relaxed_density() {
        let mesh = unit_cube(3).unwrap();
        let phases = PhaseLabeling::uniform(mesh.num_tets(), 1);
        let g = equilibrium_gradient(&mesh, &DeformationState::identity(&mesh), &phases, &relaxed()).unwrap();
        assert!(norm(&g) < 1e-10);
        let (_, rep) = minimize_equilibrium(&mesh, &DeformationState::identity(&mesh), &phases, &relaxed(), &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn traction_solve_decreases_monotonically() {
        let mesh = clamped_cube(3).unwrap();
        let model = EnergyModel {
            traction: LoadField::Uniform([0.05, 0.0, -0.1]),
            ..relaxed()
        };
        let phases = PhaseLabeling::uniform(mesh.num_tets(), 1);
        let start = DeformationState::identity(&mesh);
        let (state, rep) = minimize_equilibrium(&mesh, &start, &phases, &model, &SolveOptions::default()).unwrap();
        assert!(rep.converged, "{:?}", rep.history.last());
        assert!(rep.final_objective < rep.initial_objective);
        assert!(rep.history.windows(2).all(|w| w[1].objective < w[0].objective));
        assert!(min_jacobian(&mesh, &state) > 0.0);
        for (v, &fixed) in state.dirichlet_mask().iter().enumerate() {
            if fixed {
                assert_eq!(state.positions()[v], mesh.vertices()[v]);
            }
        }
    }

    #[test]
    fn nearly_inverted_start_stays_feasible() {
        let mesh = unit_cube(2).unwrap();
        let phases = PhaseLabeling::uniform(mesh.num_tets(), 1);
        // squash the centre vertex towards a corner until one tet is almost flat
        let centre = (0..mesh.num_vertices()).find(|&v| mesh.vertices()[v] == Vec3::repeat(0.5)).unwrap();
        let mut pos = mesh.vertices().to_vec();
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            pos[centre] = Vec3::repeat(0.5 - 0.5 * mid);
            let s = DeformationState::new(&mesh, pos.clone()).unwrap();
            if min_jacobian(&mesh, &s) > 1e-3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        pos[centre] = Vec3::repeat(0.5 - 0.5 * lo);
        let start = DeformationState::new(&mesh, pos).unwrap();
        assert!(min_jacobian(&mesh, &start) > 0.0);
        let opts = SolveOptions {
            max_iterations: 300,
            ..SolveOptions::default()
        };
        let (state, rep) = minimize_equilibrium(&mesh, &start, &phases, &relaxed(), &opts).unwrap();
        assert!(min_jacobian(&mesh, &state) > 0.0);
        assert!(rep.final_objective <= rep.initial_objective);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mesh = unit_cube(1).unwrap();
        let s = DeformationState::from_map(&mesh, |x| Vec3::new(-x.x, x.y, x.z)).unwrap();
        let phases = PhaseLabeling::uniform(mesh.num_tets(), 1);
        assert!(matches!(
            minimize_equilibrium(&mesh, &s, &phases, &relaxed(), &SolveOptions::default()),
            Err(SolveError::Infeasible(_))
        ));
    }

    #[test]
    fn options_are_validated() {
        let bad = SolveOptions {
            contraction: 1.0,
            ..SolveOptions::default()
        };
        assert!(bad.validate().is_err());
        assert!(SolveOptions::default().validate().is_ok());
    }
}
