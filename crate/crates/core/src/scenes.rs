//! Reference configurations shared by tests, benches and the CLI.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::kinematics::DeformationState;
use crate::mesh::{build_ball_mesh, build_box_mesh, BoxTagging, FaceTag, MeshError, ReferenceMesh, Vec3};
use crate::varifold::{extract_reference_interface, InterfaceVarifold, PhaseLabeling};

/// Unit cube with `n³` cells and all faces free.
pub fn unit_cube(n: usize) -> Result<ReferenceMesh, MeshError> {
    build_box_mesh([n; 3], [1.0; 3], |_| FaceTag::Free)
}

/// Unit cube clamped at `z = 0` with the top face loaded.
pub fn clamped_cube(n: usize) -> Result<ReferenceMesh, MeshError> {
    let tagging = BoxTagging::clamped_bottom_loaded_top();
    build_box_mesh([n; 3], [1.0; 3], |c| tagging.tag(c, &[1.0; 3]))
}

/// Phase 1 where the reference centroid has `X[axis] ≥ level`.
pub fn half_space_labels(mesh: &ReferenceMesh, axis: usize, level: f64) -> PhaseLabeling {
    PhaseLabeling::from_centroids(mesh, |c| c[axis] >= level)
}

/// The lowest `round(η·N)` tets along `axis` in phase 1. On a box mesh whose
/// cell count along `axis` makes `η·n` an integer this is a flat slab.
pub fn slab_labels(mesh: &ReferenceMesh, eta: f64, axis: usize) -> PhaseLabeling {
    let n = mesh.num_tets();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mesh.tet_centroid(a)[axis].total_cmp(&mesh.tet_centroid(b)[axis]).then(a.cmp(&b)));
    let take = (eta * n as f64).round() as usize;
    let mut labels = vec![0u8; n];
    for &t in &order[..take.min(n)] {
        labels[t] = 1;
    }
    PhaseLabeling::new(labels).unwrap()
}

fn touches_other_phase(mesh: &ReferenceMesh, phases: &PhaseLabeling, t: usize) -> bool {
    (0..4).any(|lf| mesh.neighbor(t, lf).is_some_and(|n| phases.labels()[n] != phases.labels()[t]))
}

/// Flat slab roughened by `swaps` random exchanges of interface-adjacent
/// tets. Each exchange keeps the phase-1 count and a manifold interface.
pub fn perturbed_slab(mesh: &ReferenceMesh, eta: f64, axis: usize, swaps: usize, rng: &mut impl Rng) -> PhaseLabeling {
    let mut phases = slab_labels(mesh, eta, axis);
    let mut done = 0;
    let mut attempts = 0;
    while done < swaps && attempts < 1000 * (swaps + 1) {
        attempts += 1;
        let near: Vec<usize> = (0..mesh.num_tets()).filter(|&t| touches_other_phase(mesh, &phases, t)).collect();
        let ones: Vec<usize> = near.iter().copied().filter(|&t| phases.labels()[t] == 1).collect();
        let zeros: Vec<usize> = near.iter().copied().filter(|&t| phases.labels()[t] == 0).collect();
        let (Some(&a), Some(&b)) = (ones.choose(rng), zeros.choose(rng)) else { break };
        let mut next = phases.clone();
        next.flip(a);
        next.flip(b);
        if extract_reference_interface(mesh, &next).is_ok() {
            phases = next;
            done += 1;
        }
    }
    phases
}

/// Ball of radius `0.3` (phase 1) inside a shell of outer radius `0.45`,
/// centred in the unit cube, with `layers` radial layers inside and out.
pub fn sphere_scene(level: usize, layers: [usize; 2]) -> Result<(ReferenceMesh, PhaseLabeling), MeshError> {
    let (mesh, inside) = build_ball_mesh(level, Vec3::repeat(0.5), 0.3, 0.45, layers)?;
    let phases = PhaseLabeling::from_fn(mesh.num_tets(), |t| inside[t]);
    Ok((mesh, phases))
}

/// Map of `[0,1]³` wrapping twice around an annulus: `θ = −4π X₁`,
/// `ρ = ρ₀ + w X₂`, `z = X₃`. With `2·turn_cells` angular cells the second
/// turn lands exactly on the first.
pub fn double_wrap(x: &Vec3, inner_radius: f64, width: f64) -> Vec3 {
    let theta = -4.0 * PI * x.x;
    let rho = inner_radius + width * x.y;
    Vec3::new(rho * theta.cos(), rho * theta.sin(), x.z)
}

/// Box mesh for [`double_wrap`] and its folded state.
pub fn folded_annulus(turn_cells: usize, radial_cells: usize, height_cells: usize) -> Result<(ReferenceMesh, DeformationState), MeshError> {
    let mesh = build_box_mesh([2 * turn_cells, radial_cells, height_cells], [1.0; 3], |_| FaceTag::Free)?;
    let state = DeformationState::from_map(&mesh, |x| double_wrap(x, 0.5, 0.5)).expect("no Dirichlet vertices");
    Ok((mesh, state))
}

/// Open cylinder of radius `r` and given height, closed in angle.
pub fn cylinder_patch(r: f64, height: f64, n_theta: usize, n_z: usize) -> InterfaceVarifold {
    let mut verts = Vec::with_capacity(n_theta * (n_z + 1));
    for k in 0..=n_z {
        for i in 0..n_theta {
            let th = 2.0 * PI * i as f64 / n_theta as f64;
            verts.push(Vec3::new(r * th.cos(), r * th.sin(), height * k as f64 / n_z as f64));
        }
    }
    let id = |i: usize, k: usize| k * n_theta + i % n_theta;
    let mut tris = Vec::with_capacity(2 * n_theta * n_z);
    for k in 0..n_z {
        for i in 0..n_theta {
            let (a, b, c, d) = (id(i, k), id(i + 1, k), id(i + 1, k + 1), id(i, k + 1));
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    let n = verts.len();
    InterfaceVarifold::from_triangles(verts, (0..n).collect(), &tris).expect("cylinder is manifold")
}

/// Square `[0,side]²` in the plane `z = 0` with `n × n` cells.
pub fn plane_patch(side: f64, n: usize) -> InterfaceVarifold {
    let mut verts = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            verts.push(Vec3::new(side * i as f64 / n as f64, side * j as f64 / n as f64, 0.0));
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut tris = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    let m = verts.len();
    InterfaceVarifold::from_triangles(verts, (0..m).collect(), &tris).expect("plane is manifold")
}

/// Icosphere of radius `r` as a closed varifold.
pub fn sphere_surface(level: usize, r: f64) -> InterfaceVarifold {
    let (v, t) = crate::mesh::icosphere(level);
    let n = v.len();
    InterfaceVarifold::from_triangles(v.into_iter().map(|p| p * r).collect(), (0..n).collect(), &t).expect("sphere is manifold")
}
