//! Two-phase hyperelastic bodies with a sharp, curvature-penalized interface.
//!
//! A reference tetrahedral mesh carries a piecewise-affine deformation and a
//! per-tet phase label. The interface between phases is extracted on the
//! deformed configuration as an oriented triangle varifold with discrete
//! curvature. On top of that sit an equilibrium solver for fixed labels and a
//! simulated-annealing search over labelings.
//!
//! Heavy loops go through [`par`], which uses rayon when the `parallel`
//! feature is on (the default) and plain iterators otherwise. Results are
//! identical either way.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod energy;
pub mod export;
pub mod kinematics;
pub mod mesh;
pub mod par;
pub mod quadrature;
pub mod scenes;
pub mod solve;
pub mod topopt;
pub mod varifold;

pub use energy::{bulk_energy, load_potential, total_energy, EnergyModel, ExtendedReal, LoadField};
pub use kinematics::{ciarlet_necas_residual, CiarletNecas, DeformationState, MonteCarlo};
pub use mesh::{FaceTag, ReferenceMesh, Vec3};
pub use solve::{equilibrium_gradient, minimize_equilibrium, SolveOptions, SolveReport};
pub use topopt::{optimize_topology, Mode, TopOptConfig, TopOptResult};
pub use varifold::{coupling_residual, extract_interface, InterfaceVarifold, PhaseLabeling, TestField};
