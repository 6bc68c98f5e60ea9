//! Simulated annealing over phase labelings.
//!
//! Each proposal swaps labels under the mass constraint, re-solves the
//! equilibrium from the previous state, and is accepted with the Metropolis
//! rule on `compliance + interface energy`. The interface is taken on the
//! deformed configuration ([`Mode::Eulerian`]) or on the reference one
//! ([`Mode::Referential`]).

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{load_potential, EnergyModel};
use crate::kinematics::{min_jacobian, DeformationState};
use crate::mesh::ReferenceMesh;
use crate::par;
use crate::solve::{minimize_equilibrium, SolveError, SolveOptions};
use crate::varifold::{
    boundary_defect, extract_interface, extract_reference_interface, interface_energy, varifold_mass, InterfaceVarifold, PhaseLabeling,
    VarifoldError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopOptError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no admissible mass-preserving move")]
    NoAdmissibleMove,
    #[error("initial labeling violates the mass constraint (residual {0:e})")]
    MassConstraint(f64),
    #[error("initial configuration could not be evaluated: {0}")]
    InitialEvaluation(String),
    #[error("{failed} of {total} inner solves failed at temperature {temperature:e}")]
    TooManyFailures { temperature: f64, failed: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Eulerian,
    Referential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopOptConfig {
    pub mode: Mode,
    pub initial_temperature: f64,
    /// Geometric factor applied after each temperature level.
    pub decay: f64,
    pub steps_per_temperature: usize,
    pub final_temperature: f64,
    /// Optional hard cap on the number of proposals.
    pub max_steps: Option<usize>,
    /// Relative weight of pair swaps anywhere on the interface.
    pub swap_weight: f64,
    /// Relative weight of a flip followed by a nearby compensating flip.
    pub flip_weight: f64,
    /// Probability of drawing a swap pair uniformly instead of near the interface.
    pub uniform_probability: f64,
    pub solve: SolveOptions,
    /// Re-solve from the identity every this many accepted moves.
    pub cold_solve_interval: usize,
    /// Allowed mass residual as a fraction of the domain volume.
    pub mass_tolerance: f64,
    /// Independent chains with seeds `seed, seed+1, …`; the best is kept.
    pub chains: usize,
    pub seed: u64,
}

impl Default for TopOptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Eulerian,
            initial_temperature: 0.5,
            decay: 0.8,
            steps_per_temperature: 20,
            final_temperature: 0.01,
            max_steps: None,
            swap_weight: 1.0,
            flip_weight: 1.0,
            uniform_probability: 0.05,
            solve: SolveOptions::default(),
            cold_solve_interval: 50,
            mass_tolerance: 0.01,
            chains: 1,
            seed: 0,
        }
    }
}

impl TopOptConfig {
    pub fn validate(&self) -> Result<(), TopOptError> {
        let bad = |m: &str| Err(TopOptError::InvalidConfig(m.to_string()));
        if !(self.initial_temperature > 0.0 && self.final_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.steps_per_temperature == 0 || self.chains == 0 || self.cold_solve_interval == 0 {
            return bad("steps_per_temperature, chains and cold_solve_interval must be positive");
        }
        if !(self.swap_weight >= 0.0 && self.flip_weight >= 0.0 && self.swap_weight + self.flip_weight > 0.0) {
            return bad("move weights must be non-negative and not both zero");
        }
        if !(0.0..=1.0).contains(&self.uniform_probability) {
            return bad("uniform_probability must lie in [0, 1]");
        }
        if !(self.mass_tolerance >= 0.0) {
            return bad("mass_tolerance must be non-negative");
        }
        self.solve.validate().map_err(|e| TopOptError::InvalidConfig(e.to_string()))
    }

    /// Temperature levels from the initial down to (not below) the final one.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut t = self.initial_temperature;
        while t >= self.final_temperature * (1.0 - 1e-12) {
            out.push(t);
            t *= self.decay;
        }
        if out.is_empty() {
            out.push(self.initial_temperature);
        }
        out
    }

    pub fn total_steps(&self) -> usize {
        let n = self.temperatures().len() * self.steps_per_temperature;
        self.max_steps.map_or(n, |m| m.min(n))
    }
}

/// `C(y, φ)`: the work of body forces on phase 1 and tractions on Neumann
/// faces.
pub fn compliance(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> f64 {
    load_potential(mesh, state, phases, model)
}

/// The interface entering the objective for `mode`.
pub fn objective_interface(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, mode: Mode) -> Result<InterfaceVarifold, VarifoldError> {
    match mode {
        Mode::Eulerian => extract_interface(mesh, state, phases),
        Mode::Referential => extract_reference_interface(mesh, phases),
    }
}

/// `compliance + interface energy`.
pub fn objective(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel, mode: Mode) -> Result<f64, VarifoldError> {
    let v = objective_interface(mesh, state, phases, mode)?;
    Ok(compliance(mesh, state, phases, model) + interface_energy(&v, model))
}

/// `Σ_{label=1} vol_ref − η · vol(Ω)`.
pub fn mass_residual(mesh: &ReferenceMesh, phases: &PhaseLabeling, eta: f64) -> f64 {
    phases.phase1_volume(mesh) - eta * mesh.total_volume()
}

/// Number of neighbours across faces carrying the other label.
pub fn exposure(mesh: &ReferenceMesh, phases: &PhaseLabeling, tet: usize) -> usize {
    let l = phases.labels();
    (0..4).filter(|&lf| mesh.neighbor(tet, lf).is_some_and(|n| l[n] != l[tet])).count()
}

fn pick_biased(rng: &mut impl Rng, candidates: &[(usize, usize)]) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let weights: Vec<f64> = candidates.iter().map(|&(_, e)| (e * e) as f64).collect();
    let dist = WeightedIndex::new(&weights).ok()?;
    Some(candidates[dist.sample(rng)].0)
}

fn interface_candidates(mesh: &ReferenceMesh, phases: &PhaseLabeling, label: u8) -> Vec<(usize, usize)> {
    (0..mesh.num_tets())
        .filter(|&t| phases.labels()[t] == label)
        .map(|t| (t, exposure(mesh, phases, t)))
        .filter(|&(_, e)| e > 0)
        .collect()
}

/// Members of `pool` whose volume is within `rel` of `volume`; falls back to
/// the whole pool.
fn volume_matched(mesh: &ReferenceMesh, pool: &[(usize, usize)], volume: f64, rel: f64) -> Vec<(usize, usize)> {
    let matched: Vec<(usize, usize)> = pool.iter().copied().filter(|&(t, _)| (mesh.volumes()[t] - volume).abs() <= rel * volume).collect();
    if matched.is_empty() {
        pool.to_vec()
    } else {
        matched
    }
}

fn propose(mesh: &ReferenceMesh, phases: &PhaseLabeling, model: &EnergyModel, config: &TopOptConfig, rng: &mut impl Rng) -> Option<PhaseLabeling> {
    let ones = interface_candidates(mesh, phases, 1);
    let zeros = interface_candidates(mesh, phases, 0);
    let uniform = rng.gen_bool(config.uniform_probability);
    let flip = rng.gen_bool(config.flip_weight / (config.swap_weight + config.flip_weight));
    let (a, b) = if uniform {
        let all: Vec<usize> = (0..mesh.num_tets()).collect();
        let a = *all.iter().filter(|&&t| phases.labels()[t] == 1).collect::<Vec<_>>().choose(rng)?;
        let pool: Vec<(usize, usize)> = all.iter().filter(|&&t| phases.labels()[t] == 0).map(|&t| (t, 1)).collect();
        let pool = volume_matched(mesh, &pool, mesh.volumes()[*a], 0.01);
        (*a, pool.choose(rng)?.0)
    } else if flip {
        // flip one interface tet, then compensate close to it
        let first_is_one = rng.gen_bool(0.5);
        let (src, dst) = if first_is_one { (&ones, &zeros) } else { (&zeros, &ones) };
        let a = pick_biased(rng, src)?;
        let ca = mesh.tet_centroid(a);
        let pool = volume_matched(mesh, dst, mesh.volumes()[a], 0.01);
        let mut near: Vec<(f64, usize, usize)> = pool.iter().map(|&(t, e)| ((mesh.tet_centroid(t) - ca).norm(), t, e)).collect();
        near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let local: Vec<(usize, usize)> = near.iter().take(8).map(|&(_, t, e)| (t, e)).collect();
        let b = pick_biased(rng, &local)?;
        if first_is_one {
            (a, b)
        } else {
            (b, a)
        }
    } else {
        let a = pick_biased(rng, &ones)?;
        let pool = volume_matched(mesh, &zeros, mesh.volumes()[a], 0.01);
        (a, pick_biased(rng, &pool)?)
    };
    let mut next = phases.clone();
    next.set(a, 0);
    next.set(b, 1);
    let tol = config.mass_tolerance * mesh.total_volume();
    let residual = mass_residual(mesh, &next, model.eta);
    if residual.abs() > tol {
        // compensating swap: best single pair bringing the residual back
        let mut best: Option<(f64, usize, usize)> = None;
        for &(c, _) in &interface_candidates(mesh, &next, 1) {
            for &(d, _) in &interface_candidates(mesh, &next, 0) {
                let r = (residual - mesh.volumes()[c] + mesh.volumes()[d]).abs();
                if best.is_none_or(|(br, _, _)| r < br) {
                    best = Some((r, c, d));
                }
            }
        }
        let (r, c, d) = best?;
        if r > tol {
            return None;
        }
        next.set(c, 0);
        next.set(d, 1);
    }
    Some(next)
}

/// Propose a labeling with the same phase-1 volume (within the mass
/// tolerance) and a manifold interface.
pub fn mass_preserving_move(
    mesh: &ReferenceMesh,
    phases: &PhaseLabeling,
    model: &EnergyModel,
    config: &TopOptConfig,
    rng: &mut impl Rng,
) -> Result<PhaseLabeling, TopOptError> {
    for _ in 0..200 {
        let Some(next) = propose(mesh, phases, model, config, rng) else { continue };
        if extract_reference_interface(mesh, &next).is_ok() {
            return Ok(next);
        }
    }
    Err(TopOptError::NoAdmissibleMove)
}

/// Everything known about one evaluated labeling.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: DeformationState,
    pub objective: f64,
    pub compliance: f64,
    pub interface_energy: f64,
    pub mu_v: f64,
    pub boundary_defect: usize,
    pub min_det: f64,
    pub injectivity_ok: bool,
}

fn evaluate(
    mesh: &ReferenceMesh,
    start: &DeformationState,
    phases: &PhaseLabeling,
    model: &EnergyModel,
    config: &TopOptConfig,
    solve_seed: u64,
) -> Result<Evaluation, String> {
    let opts = SolveOptions {
        seed: solve_seed,
        ..config.solve.clone()
    };
    let (state, report) = minimize_equilibrium(mesh, start, phases, model, &opts).map_err(|e: SolveError| e.to_string())?;
    if report.failed || !report.converged {
        return Err(format!("inner solve stopped after {} iterations", report.iterations));
    }
    let injectivity_ok = report.injectivity.is_none_or(|cn| cn.within(opts.injectivity_sigmas, 0.0));
    if !injectivity_ok {
        return Err("equilibrium failed the injectivity check".into());
    }
    let v = objective_interface(mesh, &state, phases, config.mode).map_err(|e| e.to_string())?;
    let comp = compliance(mesh, &state, phases, model);
    let e_int = interface_energy(&v, model);
    Ok(Evaluation {
        objective: comp + e_int,
        compliance: comp,
        interface_energy: e_int,
        mu_v: varifold_mass(&v),
        boundary_defect: boundary_defect(&v, mesh.boundary_edges()),
        min_det: min_jacobian(mesh, &state),
        injectivity_ok,
        state,
    })
}

/// One proposal of the annealing run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub temperature: f64,
    pub objective: f64,
    pub compliance: f64,
    pub interface_energy: f64,
    pub mu_v: f64,
    pub accepted: bool,
    pub best_objective: f64,
    pub mass_residual: f64,
    pub boundary_defect: usize,
    pub min_det: f64,
    pub injectivity_ok: bool,
    pub inner_failed: bool,
}

#[derive(Debug, Clone)]
pub struct TopOptResult {
    pub best_state: DeformationState,
    pub best_phases: PhaseLabeling,
    pub best: Evaluation,
    pub initial: Evaluation,
    pub trace: Vec<TraceRow>,
    pub accepted: usize,
    pub inner_failures: usize,
    /// Seed of the chain that produced the best result.
    pub seed: u64,
}

/// Hook called after every accepted move with the step, accepted count and
/// the accepted configuration.
pub type AcceptHook<'a> = dyn FnMut(usize, usize, &DeformationState, &PhaseLabeling) + 'a;

fn run_chain(
    mesh: &ReferenceMesh,
    init: &PhaseLabeling,
    model: &EnergyModel,
    config: &TopOptConfig,
    seed: u64,
    mut on_accept: Option<&mut AcceptHook<'_>>,
) -> Result<TopOptResult, TopOptError> {
    let mut move_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accept_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let identity = DeformationState::identity(mesh);
    let initial = evaluate(mesh, &identity, init, model, config, config.solve.seed).map_err(TopOptError::InitialEvaluation)?;

    let mut phases = init.clone();
    let mut current = initial.clone();
    let mut best = initial.clone();
    let mut best_phases = init.clone();
    let mut trace = vec![TraceRow {
        step: 0,
        temperature: config.initial_temperature,
        objective: initial.objective,
        compliance: initial.compliance,
        interface_energy: initial.interface_energy,
        mu_v: initial.mu_v,
        accepted: true,
        best_objective: initial.objective,
        mass_residual: mass_residual(mesh, init, model.eta),
        boundary_defect: initial.boundary_defect,
        min_det: initial.min_det,
        injectivity_ok: initial.injectivity_ok,
        inner_failed: false,
    }];
    let mut accepted = 0;
    let mut inner_failures = 0;
    let total = config.total_steps();
    let mut step = 0;
    'levels: for temperature in config.temperatures() {
        let mut level_failures = 0;
        let mut level_steps = 0;
        for _ in 0..config.steps_per_temperature {
            if step >= total {
                break 'levels;
            }
            step += 1;
            level_steps += 1;
            let proposal = mass_preserving_move(mesh, &phases, model, config, &mut move_rng)?;
            let solve_seed = config.solve.seed.wrapping_add(step as u64);
            let cold = (accepted + 1) % config.cold_solve_interval == 0;
            let start = if cold { &identity } else { &current.state };
            let outcome = evaluate(mesh, start, &proposal, model, config, solve_seed).or_else(|_| {
                if cold {
                    Err(())
                } else {
                    evaluate(mesh, &identity, &proposal, model, config, solve_seed).map_err(|_| ())
                }
            });
            let u: f64 = accept_rng.gen();
            let row_mass = mass_residual(mesh, &proposal, model.eta);
            match outcome {
                Ok(eval) => {
                    let delta = eval.objective - current.objective;
                    let accept = delta <= 0.0 || u < (-delta / temperature).exp();
                    trace.push(TraceRow {
                        step,
                        temperature,
                        objective: eval.objective,
                        compliance: eval.compliance,
                        interface_energy: eval.interface_energy,
                        mu_v: eval.mu_v,
                        accepted: accept,
                        best_objective: best.objective.min(if accept { eval.objective } else { f64::INFINITY }),
                        mass_residual: row_mass,
                        boundary_defect: eval.boundary_defect,
                        min_det: eval.min_det,
                        injectivity_ok: eval.injectivity_ok,
                        inner_failed: false,
                    });
                    if accept {
                        accepted += 1;
                        phases = proposal;
                        current = eval;
                        if current.objective < best.objective {
                            best = current.clone();
                            best_phases = phases.clone();
                        }
                        if let Some(hook) = on_accept.as_deref_mut() {
                            hook(step, accepted, &current.state, &phases);
                        }
                    }
                }
                Err(()) => {
                    inner_failures += 1;
                    level_failures += 1;
                    trace.push(TraceRow {
                        step,
                        temperature,
                        objective: f64::NAN,
                        compliance: f64::NAN,
                        interface_energy: f64::NAN,
                        mu_v: f64::NAN,
                        accepted: false,
                        best_objective: best.objective,
                        mass_residual: row_mass,
                        boundary_defect: 0,
                        min_det: f64::NAN,
                        injectivity_ok: false,
                        inner_failed: true,
                    });
                }
            }
        }
        if 2 * level_failures > level_steps {
            return Err(TopOptError::TooManyFailures {
                temperature,
                failed: level_failures,
                total: level_steps,
            });
        }
    }
    Ok(TopOptResult {
        best_state: best.state.clone(),
        best_phases,
        best,
        initial,
        trace,
        accepted,
        inner_failures,
        seed,
    })
}

fn check_start(mesh: &ReferenceMesh, init: &PhaseLabeling, model: &EnergyModel, config: &TopOptConfig) -> Result<(), TopOptError> {
    config.validate()?;
    model.validate_for(mesh).map_err(|e| TopOptError::InvalidConfig(e.to_string()))?;
    if init.len() != mesh.num_tets() {
        return Err(TopOptError::InvalidConfig(format!("{} labels for {} tets", init.len(), mesh.num_tets())));
    }
    let r = mass_residual(mesh, init, model.eta);
    // a labeling within one tet of the target counts as satisfying it
    let slack = mesh.volumes().iter().fold(0.0f64, |m, &v| m.max(v));
    if r.abs() > (config.mass_tolerance * mesh.total_volume()).max(slack) {
        return Err(TopOptError::MassConstraint(r));
    }
    Ok(())
}

/// Run the annealing search; with several chains they run in parallel and
/// the lowest best objective wins (ties go to the lower seed).
pub fn optimize_topology(mesh: &ReferenceMesh, init: &PhaseLabeling, model: &EnergyModel, config: &TopOptConfig) -> Result<TopOptResult, TopOptError> {
    check_start(mesh, init, model, config)?;
    let runs = par::map_range(config.chains, |k| run_chain(mesh, init, model, config, config.seed.wrapping_add(k as u64), None));
    let mut best: Option<TopOptResult> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.best.objective < b.best.objective) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one chain"))
}

/// Single-chain run that reports every accepted configuration to `on_accept`.
pub fn optimize_topology_with(
    mesh: &ReferenceMesh,
    init: &PhaseLabeling,
    model: &EnergyModel,
    config: &TopOptConfig,
    on_accept: &mut AcceptHook<'_>,
) -> Result<TopOptResult, TopOptError> {
    check_start(mesh, init, model, config)?;
    run_chain(mesh, init, model, config, config.seed, Some(on_accept))
}
