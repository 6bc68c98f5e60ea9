//! Stored-energy densities, interface density and energy assembly.
//!
//! The bulk density of phase `i` is
//!
//! ```text
//! W_i(F) = c_i · ( |F|^r + (|F|³ / det F)^(r-1) + (det F)^(-s) )   if det F > 0
//!        = +∞                                                       otherwise
//! ```
//!
//! evaluated through the minors `(F, Cof F, det F)`. With
//! [`EnergyModel::stress_free_identity`] the argument is pre-scaled by the
//! constant `λ*` at which `λ ↦ W(λ I)` is stationary, so the identity is a
//! critical point.

use std::cmp::Ordering;
use std::ops::Add;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{deformation_gradient, minors, DeformationState, Minors};
use crate::mesh::{triangle_area, FaceTag, ReferenceMesh, Vec3};
use crate::par;
use crate::varifold::{interface_energy, InterfaceVarifold, PhaseLabeling};

/// A real number or `+∞`, used for energies that blow up on inverted elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    Infinite,
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::Infinite => None,
        }
    }

    /// Unwrap a finite value; panics on `+∞`.
    pub fn value(self) -> f64 {
        self.finite().expect("energy is +inf")
    }

    /// Lossy conversion for logging.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl Add for ExtendedReal {
    type Output = ExtendedReal;

    fn add(self, rhs: Self) -> Self {
        match (self, rhs) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => ExtendedReal::Finite(a + b),
            _ => ExtendedReal::Infinite,
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => a.partial_cmp(b),
            (ExtendedReal::Infinite, ExtendedReal::Infinite) => Some(Ordering::Equal),
            (ExtendedReal::Infinite, _) => Some(Ordering::Greater),
            (_, ExtendedReal::Infinite) => Some(Ordering::Less),
        }
    }
}

/// A load given either once for all entities or per entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoadField {
    Uniform([f64; 3]),
    PerEntity(Vec<[f64; 3]>),
}

impl Default for LoadField {
    fn default() -> Self {
        LoadField::Uniform([0.0; 3])
    }
}

impl LoadField {
    pub fn at(&self, i: usize) -> Vec3 {
        match self {
            LoadField::Uniform(v) => Vec3::from(*v),
            LoadField::PerEntity(vs) => Vec3::from(vs[i]),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            LoadField::Uniform(v) => LoadField::Uniform(v.map(|x| x * factor)),
            LoadField::PerEntity(vs) => LoadField::PerEntity(vs.iter().map(|v| v.map(|x| x * factor)).collect()),
        }
    }

    fn check_len(&self, n: usize, what: &str) -> Result<(), EnergyError> {
        match self {
            LoadField::PerEntity(vs) if vs.len() != n => {
                Err(EnergyError::InvalidParameter(format!("{what}: expected {n} entries, got {}", vs.len())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("invalid energy parameter: {0}")]
    InvalidParameter(String),
    #[error("stress undefined for det F = {0:e}")]
    NonPositiveJacobian(f64),
}

/// Material, interface and load parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyModel {
    /// Growth exponent, `r > 3`.
    pub r: f64,
    /// Compressibility exponent, `s > 0`.
    pub s: f64,
    /// Per-phase multipliers `[c_0, c_1]`; phase 1 is the stiff material.
    pub scale: [f64; 2],
    /// Interface scale, energy per area.
    pub c_int: f64,
    /// Curvature exponent, `p > 1`.
    pub p: f64,
    /// Body force per reference volume, acting on phase-1 tets.
    #[serde(default)]
    pub body_force: LoadField,
    /// Traction on Neumann faces (in mesh boundary-face order).
    #[serde(default)]
    pub traction: LoadField,
    /// Target phase-1 volume fraction.
    pub eta: f64,
    #[serde(default)]
    pub stress_free_identity: bool,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            r: 4.0,
            s: 2.0,
            scale: [1e-3, 1.0],
            c_int: 1.0,
            p: 2.0,
            body_force: LoadField::default(),
            traction: LoadField::default(),
            eta: 0.5,
            stress_free_identity: false,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |msg: &str| Err(EnergyError::InvalidParameter(msg.to_string()));
        if !(self.r > 3.0) {
            return bad("r must exceed 3");
        }
        if !(self.s > 0.0) {
            return bad("s must be positive");
        }
        if !(self.p > 1.0) {
            return bad("p must exceed 1");
        }
        if !(self.c_int > 0.0) {
            return bad("c_int must be positive");
        }
        if !self.scale.iter().all(|&c| c > 0.0 && c.is_finite()) {
            return bad("phase scales must be positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        Ok(())
    }

    /// Check per-entity load lengths against a mesh.
    pub fn validate_for(&self, mesh: &ReferenceMesh) -> Result<(), EnergyError> {
        self.validate()?;
        self.body_force.check_len(mesh.num_tets(), "body_force")?;
        let n_neumann = mesh.boundary_faces().iter().filter(|b| b.tag == FaceTag::Neumann).count();
        self.traction.check_len(n_neumann, "traction")
    }

    /// Scaling `λ` applied to `F` before evaluating the density.
    pub fn prestretch(&self) -> f64 {
        if self.stress_free_identity {
            // d/dλ W(λI) = 0  ⇔  λ^(r+3s) = 3s / (r · 3^(r/2))
            (3.0 * self.s / (self.r * 3f64.powf(self.r / 2.0))).powf(1.0 / (self.r + 3.0 * self.s))
        } else {
            1.0
        }
    }

    pub fn phase_scale(&self, phase: u8) -> f64 {
        self.scale[usize::from(phase != 0)]
    }
}

/// The convex function of the minors behind the example density, with unit
/// multiplier. Only meaningful for `det > 0`.
pub fn polyconvex_h(mn: &Minors, r: f64, s: f64) -> f64 {
    let norm = mn.f.norm();
    norm.powf(r) + (norm.powi(3) / mn.det).powf(r - 1.0) + mn.det.powf(-s)
}

pub fn bulk_density(f: &Matrix3<f64>, phase: u8, model: &EnergyModel) -> ExtendedReal {
    let mn = minors(&(f * model.prestretch()));
    if mn.det <= 0.0 {
        return ExtendedReal::Infinite;
    }
    ExtendedReal::Finite(model.phase_scale(phase) * polyconvex_h(&mn, model.r, model.s))
}

/// First Piola–Kirchhoff stress `∂W/∂F`.
pub fn bulk_stress(f: &Matrix3<f64>, phase: u8, model: &EnergyModel) -> Result<Matrix3<f64>, EnergyError> {
    let lambda = model.prestretch();
    let mn = minors(&(f * lambda));
    if mn.det <= 0.0 {
        return Err(EnergyError::NonPositiveJacobian(mn.det));
    }
    let (r, s) = (model.r, model.s);
    let g = &mn.f;
    let n = g.norm();
    let j = mn.det;
    let dist = n.powi(3) / j;
    // d|G|^r = r|G|^(r-2) G ; dD = 3|G| G / J - |G|³ Cof G / J² ; dJ^(-s) = -s J^(-s-1) Cof G
    let d_norm = g * (r * n.powf(r - 2.0));
    let d_dist = (g * (3.0 * n / j) - mn.cof * (n.powi(3) / (j * j))) * ((r - 1.0) * dist.powf(r - 2.0));
    let d_vol = mn.cof * (-s * j.powf(-s - 1.0));
    Ok((d_norm + d_dist + d_vol) * (lambda * model.phase_scale(phase)))
}

/// Per-tet `vol · W_label(F)`; `None` marks an inverted tet.
pub fn bulk_energy_densities(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> Vec<Option<f64>> {
    par::map_range(mesh.num_tets(), |t| {
        let f = deformation_gradient(mesh, state, t);
        bulk_density(&f, phases.labels()[t], model).finite().map(|w| w * mesh.volumes()[t])
    })
}

pub fn bulk_energy(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> ExtendedReal {
    let terms: Option<Vec<f64>> = bulk_energy_densities(mesh, state, phases, model).into_iter().collect();
    match terms {
        Some(t) => ExtendedReal::Finite(par::pairwise_sum(&t)),
        None => ExtendedReal::Infinite,
    }
}

/// `Ψ(A) = c_int (1 + |A|^p)`.
pub fn interface_density(a_norm: f64, model: &EnergyModel) -> f64 {
    model.c_int * (1.0 + a_norm.powf(model.p))
}

pub fn total_energy(
    mesh: &ReferenceMesh,
    state: &DeformationState,
    phases: &PhaseLabeling,
    interface: &InterfaceVarifold,
    model: &EnergyModel,
) -> ExtendedReal {
    bulk_energy(mesh, state, phases, model) + ExtendedReal::Finite(interface_energy(interface, model))
}

/// `Σ_{label=1} vol · f · ȳ` with the tet centroid of the deformed positions.
pub fn body_load_term(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> f64 {
    let pos = state.positions();
    let terms = par::map_range(mesh.num_tets(), |t| {
        if phases.labels()[t] == 0 {
            return 0.0;
        }
        let [a, b, c, d] = mesh.tets()[t].map(|i| pos[i]);
        let centroid = (a + b + c + d) / 4.0;
        mesh.volumes()[t] * model.body_force.at(t).dot(&centroid)
    });
    par::pairwise_sum(&terms)
}

/// `Σ_{Neumann faces} area_ref · g · ȳ`.
pub fn boundary_load_term(mesh: &ReferenceMesh, state: &DeformationState, model: &EnergyModel) -> f64 {
    let pos = state.positions();
    let terms: Vec<f64> = mesh
        .boundary_faces()
        .iter()
        .filter(|b| b.tag == FaceTag::Neumann)
        .enumerate()
        .map(|(i, b)| {
            let [p, q, r] = b.vertices.map(|v| mesh.vertices()[v]);
            let centroid = b.vertices.iter().map(|&v| pos[v]).sum::<Vec3>() / 3.0;
            triangle_area(&p, &q, &r) * model.traction.at(i).dot(&centroid)
        })
        .collect();
    par::pairwise_sum(&terms)
}

/// Work of the loads. Equilibrium minimizes `bulk_energy − load_potential`.
pub fn load_potential(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling, model: &EnergyModel) -> f64 {
    body_load_term(mesh, state, phases, model) + boundary_load_term(mesh, state, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxTagging};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_model() -> EnergyModel {
        EnergyModel {
            scale: [1.0, 1.0],
            ..EnergyModel::default()
        }
    }

    fn random_feasible(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        loop {
            let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.6..0.6));
            if f.determinant() > 0.2 {
                return f;
            }
        }
    }

    #[test]
    fn density_at_identity() {
        let m = unit_model();
        let w = bulk_density(&Matrix3::identity(), 1, &m).value();
        assert_relative_eq!(w, 9.0 + 3f64.powf(4.5) + 1.0, max_relative = 1e-14);
        assert_relative_eq!(w, 150.29611541307906, max_relative = 1e-12);
    }

    #[test]
    fn density_at_twice_identity() {
        // 144 + 81√3 + 1/64
        let expected = 144.0 + 81.0 * 3f64.sqrt() + 1.0 / 64.0;
        let w = bulk_density(&(Matrix3::identity() * 2.0), 1, &unit_model()).value();
        assert_relative_eq!(w, expected, max_relative = 1e-13);
        assert_relative_eq!(w, 284.31174041307906, max_relative = 1e-12);
    }

    #[test]
    fn inverted_is_infinite() {
        let f = Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
        assert_eq!(bulk_density(&f, 0, &unit_model()), ExtendedReal::Infinite);
        assert_eq!(bulk_density(&Matrix3::zeros(), 1, &unit_model()), ExtendedReal::Infinite);
        assert!(bulk_stress(&f, 0, &unit_model()).is_err());
    }

    fn fd_stress(f: &Matrix3<f64>, phase: u8, model: &EnergyModel, h: f64) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| {
            let mut fp = *f;
            let mut fm = *f;
            fp[(i, j)] += h;
            fm[(i, j)] -= h;
            (bulk_density(&fp, phase, model).value() - bulk_density(&fm, phase, model).value()) / (2.0 * h)
        })
    }

    #[test]
    fn stress_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, model) in [unit_model(), EnergyModel { stress_free_identity: true, ..unit_model() }].iter().enumerate() {
            for _ in 0..100 {
                let f = random_feasible(&mut rng);
                let analytic = bulk_stress(&f, (k % 2) as u8, model).unwrap();
                let fd = fd_stress(&f, (k % 2) as u8, model, 1e-5 * f.norm());
                let rel = (analytic - fd).norm() / analytic.norm();
                assert!(rel < 1e-6, "relative error {rel}");
            }
        }
    }

    #[test]
    fn stress_at_identity_is_isotropic() {
        let m = unit_model();
        let p = bulk_stress(&Matrix3::identity(), 1, &m).unwrap();
        let fd = fd_stress(&Matrix3::identity(), 1, &m, 1e-6);
        let lambda = fd[(0, 0)];
        assert!((p - Matrix3::identity() * lambda).norm() < 1e-6 * lambda.abs());
        // |F|^4 contributes 4·3·I, the distortion term is stationary, det^-2 gives −2I.
        assert_relative_eq!(p[(0, 0)], 10.0, max_relative = 1e-13);
    }

    #[test]
    fn stress_scales_with_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_feasible(&mut rng);
        let one = bulk_stress(&f, 1, &unit_model()).unwrap();
        let two = bulk_stress(&f, 1, &EnergyModel { scale: [1.0, 2.0], ..unit_model() }).unwrap();
        assert!((two - one * 2.0).norm() < 1e-12 * one.norm());
    }

    #[test]
    fn stress_free_identity_is_critical() {
        let m = EnergyModel {
            stress_free_identity: true,
            ..unit_model()
        };
        let p = bulk_stress(&Matrix3::identity(), 1, &m).unwrap();
        assert!(p.norm() < 1e-12, "{p}");
        let lambda: f64 = m.prestretch();
        assert_relative_eq!(lambda.powi(10), 1.0 / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn density_is_a_function_of_minors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = unit_model();
        for _ in 0..50 {
            let f = random_feasible(&mut rng);
            assert_eq!(bulk_density(&f, 1, &m).value(), polyconvex_h(&minors(&f), m.r, m.s));
        }
    }

    #[test]
    fn density_blows_up_as_volume_vanishes() {
        let m = unit_model();
        let mut prev = 0.0;
        for k in 1..20 {
            let t = 0.5f64.powi(k);
            let w = bulk_density(&Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, t)), 1, &m).value();
            assert!(w > prev);
            prev = w;
        }
        assert!(prev > 1e10);
    }

    proptest! {
        #[test]
        fn coercivity_bound_holds_with_equality(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_feasible(&mut rng);
            let m = EnergyModel { scale: [0.5, 3.0], ..unit_model() };
            let d = crate::kinematics::distortion(&f).unwrap();
            let bound = 3.0 * (f.norm().powf(4.0) + d.powf(3.0) + f.determinant().powf(-2.0));
            let w = bulk_density(&f, 1, &m).value();
            prop_assert!((w - bound).abs() <= 1e-12 * bound);
        }

        #[test]
        fn frame_indifference(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_feasible(&mut rng);
            let r = Rotation3::from_euler_angles(a, b, c).into_inner();
            let m = unit_model();
            let w = bulk_density(&f, 0, &m).value();
            prop_assert!((bulk_density(&(r * f), 0, &m).value() - w).abs() < 1e-10 * w.max(1.0));
        }
    }

    #[test]
    fn interface_density_values() {
        let m = EnergyModel::default();
        assert_eq!(interface_density(0.0, &m), 1.0);
        assert_eq!(interface_density(3.0, &m), 10.0);
        let grid: Vec<f64> = (0..200).map(|i| interface_density(i as f64 * 0.05, &m)).collect();
        for w in grid.windows(3) {
            assert!(w[1] > w[0]);
            assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-12);
        }
    }

    #[test]
    fn model_validation() {
        assert!(EnergyModel::default().validate().is_ok());
        for bad in [
            EnergyModel { r: 3.0, ..Default::default() },
            EnergyModel { s: 0.0, ..Default::default() },
            EnergyModel { p: 1.0, ..Default::default() },
            EnergyModel { c_int: 0.0, ..Default::default() },
            EnergyModel { scale: [0.0, 1.0], ..Default::default() },
            EnergyModel { eta: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn unit_cube(tagging: BoxTagging, n: usize) -> ReferenceMesh {
        build_box_mesh([n, n, n], [1.0; 3], |c| tagging.tag(c, &[1.0; 3])).unwrap()
    }

    #[test]
    fn bulk_energy_identity() {
        let mesh = unit_cube(BoxTagging::all_free(), 2);
        let state = DeformationState::identity(&mesh);
        let m = unit_model();
        let ones = PhaseLabeling::uniform(mesh.num_tets(), 1);
        let zeros = PhaseLabeling::uniform(mesh.num_tets(), 0);
        let e1 = bulk_energy(&mesh, &state, &ones, &m).value();
        assert_relative_eq!(e1, 150.29611541307906, max_relative = 1e-12);
        assert_eq!(bulk_energy(&mesh, &state, &zeros, &m).value(), e1);
    }

    #[test]
    fn bulk_energy_with_inverted_tet() {
        let mesh = unit_cube(BoxTagging::all_free(), 2);
        let mut pos = mesh.vertices().to_vec();
        let centre = 13; // (1,1,1) in a 3×3×3 vertex grid
        assert_eq!(pos[centre], Vec3::repeat(0.5));
        pos[centre] = Vec3::new(1.6, 1.6, 1.6);
        let state = DeformationState::new(&mesh, pos).unwrap();
        let ones = PhaseLabeling::uniform(mesh.num_tets(), 1);
        assert_eq!(bulk_energy(&mesh, &state, &ones, &unit_model()), ExtendedReal::Infinite);
    }

    #[test]
    fn load_potential_examples() {
        let mesh = unit_cube(BoxTagging::clamped_bottom_loaded_top(), 2);
        let state = DeformationState::identity(&mesh);
        let ones = PhaseLabeling::uniform(mesh.num_tets(), 1);
        assert_eq!(load_potential(&mesh, &state, &ones, &unit_model()), 0.0);

        let gravity = EnergyModel {
            body_force: LoadField::Uniform([0.0, 0.0, -1.0]),
            ..unit_model()
        };
        assert_relative_eq!(load_potential(&mesh, &state, &ones, &gravity), -0.5, max_relative = 1e-14);

        let g = EnergyModel {
            traction: LoadField::Uniform([0.1, 0.0, -0.3]),
            ..unit_model()
        };
        let g2 = EnergyModel {
            traction: g.traction.scaled(2.0),
            ..unit_model()
        };
        let one = boundary_load_term(&mesh, &state, &g);
        // top face at z = 1, centroid (0.5, 0.5): 0.1·0.5 − 0.3·1
        assert_relative_eq!(one, 0.05 - 0.3, max_relative = 1e-13);
        assert_relative_eq!(boundary_load_term(&mesh, &state, &g2), 2.0 * one, max_relative = 1e-14);
    }

    #[test]
    fn extended_arithmetic() {
        use ExtendedReal::*;
        assert_eq!(Finite(1.0) + Finite(2.0), Finite(3.0));
        assert_eq!(Finite(1.0) + Infinite, Infinite);
        assert!(Infinite > Finite(1e300));
        assert!(Finite(-1.0) < Finite(0.0));
    }
}
