//! Deformation states, per-tet deformation gradients and their minors,
//! distortion, and the Monte Carlo Ciarlet–Nečas check.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{bounding_box, FaceTag, ReferenceMesh, Vec3};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("tet {tet} has non-positive Jacobian {det:e}")]
    NonPositiveJacobian { tet: usize, det: f64 },
    #[error("distortion undefined for det F = {0:e}")]
    Distortion(f64),
    #[error("Dirichlet vertex {0} moved away from its reference position")]
    DirichletMismatch(usize),
    #[error("expected {expected} positions, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("Monte Carlo sampling needs at least one sample")]
    ZeroSamples,
}

/// Nodal positions of the piecewise-affine deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationState {
    positions: Vec<Vec3>,
    dirichlet_mask: Vec<bool>,
}

impl DeformationState {
    pub fn identity(mesh: &ReferenceMesh) -> Self {
        Self {
            positions: mesh.vertices().to_vec(),
            dirichlet_mask: mesh.tagged_vertices(FaceTag::Dirichlet),
        }
    }

    /// Positions must equal the reference coordinates on clamped vertices.
    pub fn new(mesh: &ReferenceMesh, positions: Vec<Vec3>) -> Result<Self, KinematicsError> {
        if positions.len() != mesh.num_vertices() {
            return Err(KinematicsError::SizeMismatch {
                expected: mesh.num_vertices(),
                got: positions.len(),
            });
        }
        let dirichlet_mask = mesh.tagged_vertices(FaceTag::Dirichlet);
        if let Some(v) = (0..positions.len()).find(|&v| dirichlet_mask[v] && positions[v] != mesh.vertices()[v]) {
            return Err(KinematicsError::DirichletMismatch(v));
        }
        Ok(Self {
            positions,
            dirichlet_mask,
        })
    }

    /// Apply `map` to every reference vertex.
    pub fn from_map(mesh: &ReferenceMesh, map: impl Fn(&Vec3) -> Vec3) -> Result<Self, KinematicsError> {
        Self::new(mesh, mesh.vertices().iter().map(map).collect())
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    /// `positions += alpha * direction` on free vertices only.
    pub fn displaced(&self, direction: &[Vec3], alpha: f64) -> Self {
        let positions = self
            .positions
            .iter()
            .zip(direction)
            .zip(&self.dirichlet_mask)
            .map(|((x, d), &fixed)| if fixed { *x } else { x + d * alpha })
            .collect();
        Self {
            positions,
            dirichlet_mask: self.dirichlet_mask.clone(),
        }
    }
}

/// `F = Dx · DX⁻¹` with edge matrices taken from vertex 0 of the tet.
pub fn deformation_gradient(mesh: &ReferenceMesh, state: &DeformationState, tet: usize) -> Matrix3<f64> {
    let [a, b, c, d] = mesh.tets()[tet].map(|i| state.positions[i]);
    let dx = Matrix3::from_columns(&[b - a, c - a, d - a]);
    dx * mesh.edge_inverse(tet)
}

/// The polyconvex arguments `(F, Cof F, det F)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minors {
    pub f: Matrix3<f64>,
    pub cof: Matrix3<f64>,
    pub det: f64,
}

pub fn minors(f: &Matrix3<f64>) -> Minors {
    let m = |r0: usize, r1: usize, c0: usize, c1: usize| f[(r0, c0)] * f[(r1, c1)] - f[(r0, c1)] * f[(r1, c0)];
    let cof = Matrix3::new(
        m(1, 2, 1, 2),
        -m(1, 2, 0, 2),
        m(1, 2, 0, 1),
        -m(0, 2, 1, 2),
        m(0, 2, 0, 2),
        -m(0, 2, 0, 1),
        m(0, 1, 1, 2),
        -m(0, 1, 0, 2),
        m(0, 1, 0, 1),
    );
    let det = f[(0, 0)] * cof[(0, 0)] + f[(0, 1)] * cof[(0, 1)] + f[(0, 2)] * cof[(0, 2)];
    Minors { f: *f, cof, det }
}

/// `|F|³ / det F` with the Frobenius norm.
pub fn distortion(f: &Matrix3<f64>) -> Result<f64, KinematicsError> {
    let det = minors(f).det;
    if det <= 0.0 {
        return Err(KinematicsError::Distortion(det));
    }
    Ok(f.norm().powi(3) / det)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicQuantities {
    pub minors: Minors,
    pub distortion: f64,
}

/// Per-tet kinematics; fails on the first tet with `det F <= 0`.
pub fn compute_kinematics(mesh: &ReferenceMesh, state: &DeformationState) -> Result<Vec<KinematicQuantities>, KinematicsError> {
    par::map_range(mesh.num_tets(), |t| {
        let f = deformation_gradient(mesh, state, t);
        let mn = minors(&f);
        if mn.det <= 0.0 {
            return Err(KinematicsError::NonPositiveJacobian { tet: t, det: mn.det });
        }
        Ok(KinematicQuantities {
            minors: mn,
            distortion: f.norm().powi(3) / mn.det,
        })
    })
    .into_iter()
    .collect()
}

/// Per-tet `det F`.
pub fn jacobians(mesh: &ReferenceMesh, state: &DeformationState) -> Vec<f64> {
    par::map_range(mesh.num_tets(), |t| minors(&deformation_gradient(mesh, state, t)).det)
}

pub fn min_jacobian(mesh: &ReferenceMesh, state: &DeformationState) -> f64 {
    jacobians(mesh, state).into_iter().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiarletNecas {
    /// `Σ vol_ref · det F`.
    pub jacobian_integral: f64,
    /// Monte Carlo estimate of the volume of the deformed body.
    pub image_volume: f64,
    /// One standard deviation of `image_volume`.
    pub std_error: f64,
    pub residual: f64,
    pub samples: usize,
    pub hits: usize,
}

impl CiarletNecas {
    /// Residual at most `sigmas` standard deviations plus `relative` of the
    /// Jacobian integral.
    pub fn within(&self, sigmas: f64, relative: f64) -> bool {
        self.residual <= sigmas * self.std_error + relative * self.jacobian_integral
    }
}

/// Uniform-grid spatial hash over deformed tets for point location.
pub struct TetLocator {
    lo: Vec3,
    cell: Vec3,
    dims: [usize; 3],
    offsets: Vec<usize>,
    entries: Vec<usize>,
    origins: Vec<Vec3>,
    inverses: Vec<Matrix3<f64>>,
}

impl TetLocator {
    pub fn new(mesh: &ReferenceMesh, state: &DeformationState) -> Self {
        let pos = state.positions();
        let (lo, hi) = bounding_box(pos);
        let extent = (hi - lo).map(|e| e.max(1e-300));
        let n = mesh.num_tets().max(1) as f64;
        let h = (extent.x * extent.y * extent.z / n).cbrt().max(extent.max() / 512.0);
        let dims = [0, 1, 2].map(|a| ((extent[a] / h).ceil() as usize).clamp(1, 512));
        let cell = Vec3::new(extent.x / dims[0] as f64, extent.y / dims[1] as f64, extent.z / dims[2] as f64);

        let mut origins = Vec::with_capacity(mesh.num_tets());
        let mut inverses = Vec::with_capacity(mesh.num_tets());
        let mut ranges = Vec::with_capacity(mesh.num_tets());
        for t in mesh.tets() {
            let [a, b, c, d] = t.map(|i| pos[i]);
            let m = Matrix3::from_columns(&[b - a, c - a, d - a]);
            origins.push(a);
            inverses.push(m.try_inverse().unwrap_or_else(Matrix3::zeros));
            let (tlo, thi) = bounding_box(&[a, b, c, d]);
            let clamp = |x: f64, axis: usize| (((x - lo[axis]) / cell[axis]).floor().max(0.0) as usize).min(dims[axis] - 1);
            ranges.push([0, 1, 2].map(|k| (clamp(tlo[k], k), clamp(thi[k], k))));
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let flat = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
        for r in &ranges {
            for k in r[2].0..=r[2].1 {
                for j in r[1].0..=r[1].1 {
                    for i in r[0].0..=r[0].1 {
                        counts[flat(i, j, k) + 1] += 1;
                    }
                }
            }
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let mut cursor = counts.clone();
        let mut entries = vec![0; counts[ncells]];
        for (t, r) in ranges.iter().enumerate() {
            for k in r[2].0..=r[2].1 {
                for j in r[1].0..=r[1].1 {
                    for i in r[0].0..=r[0].1 {
                        let c = flat(i, j, k);
                        entries[cursor[c]] = t;
                        cursor[c] += 1;
                    }
                }
            }
        }
        Self {
            lo,
            cell,
            dims,
            offsets: counts,
            entries,
            origins,
            inverses,
        }
    }

    fn cell_of(&self, p: &Vec3) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let x = (p[a] - self.lo[a]) / self.cell[a];
            if !(x >= -1e-9) || x > self.dims[a] as f64 + 1e-9 {
                return None;
            }
            idx[a] = (x.max(0.0) as usize).min(self.dims[a] - 1);
        }
        Some(idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2]))
    }

    /// Whether `p` lies in at least one deformed tet (closed, with a 1e-12
    /// barycentric tolerance).
    pub fn covers(&self, p: &Vec3) -> bool {
        const TOL: f64 = 1e-12;
        let Some(c) = self.cell_of(p) else {
            return false;
        };
        self.entries[self.offsets[c]..self.offsets[c + 1]].iter().any(|&t| {
            let l = self.inverses[t] * (p - self.origins[t]);
            l.x >= -TOL && l.y >= -TOL && l.z >= -TOL && l.x + l.y + l.z <= 1.0 + TOL
        })
    }
}

/// Compare `∫ det ∇y` against a Monte Carlo estimate of the image volume.
/// A residual significantly above zero means some region is covered twice.
pub fn ciarlet_necas_residual(mesh: &ReferenceMesh, state: &DeformationState, sampling: MonteCarlo) -> Result<CiarletNecas, KinematicsError> {
    if sampling.samples == 0 {
        return Err(KinematicsError::ZeroSamples);
    }
    let dets = jacobians(mesh, state);
    if let Some((tet, &det)) = dets.iter().enumerate().find(|(_, &d)| d <= 0.0) {
        return Err(KinematicsError::NonPositiveJacobian { tet, det });
    }
    let weighted: Vec<f64> = dets.iter().zip(mesh.volumes()).map(|(d, v)| d * v).collect();
    let jacobian_integral = par::pairwise_sum(&weighted);

    // sample a padded box so a body filling its bounding box still has a
    // nonzero standard error
    let (lo, hi) = bounding_box(state.positions());
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let extent = hi - lo;
    let box_volume = extent.x * extent.y * extent.z;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let points: Vec<Vec3> = (0..sampling.samples)
        .map(|_| lo + Vec3::new(rng.gen::<f64>() * extent.x, rng.gen::<f64>() * extent.y, rng.gen::<f64>() * extent.z))
        .collect();
    let locator = TetLocator::new(mesh, state);
    let hits = par::map_slice(&points, |p| locator.covers(p)).into_iter().filter(|&h| h).count();
    let n = sampling.samples as f64;
    let frac = hits as f64 / n;
    let image_volume = box_volume * frac;
    let std_error = box_volume * (frac * (1.0 - frac) / n).sqrt();
    Ok(CiarletNecas {
        jacobian_integral,
        image_volume,
        std_error,
        residual: jacobian_integral - image_volume,
        samples: sampling.samples,
        hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::Rng;

    fn cube(n: usize) -> ReferenceMesh {
        build_box_mesh([n, n, n], [1.0; 3], |_| FaceTag::Free).unwrap()
    }

    fn mat(v: &[f64]) -> Matrix3<f64> {
        Matrix3::from_row_slice(v)
    }

    #[test]
    fn identity_gradient() {
        let m = cube(2);
        let s = DeformationState::identity(&m);
        for t in 0..m.num_tets() {
            assert_relative_eq!(deformation_gradient(&m, &s, t), Matrix3::identity(), epsilon = 1e-14);
        }
    }

    #[test]
    fn affine_maps_are_reproduced() {
        let m = cube(2);
        let stretch = Matrix3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        let s = DeformationState::from_map(&m, |x| stretch * x).unwrap();
        for t in 0..m.num_tets() {
            assert_relative_eq!(deformation_gradient(&m, &s, t), stretch, epsilon = 1e-14);
        }
        let a = mat(&[1.1, 0.3, -0.2, 0.05, 0.9, 0.4, -0.3, 0.2, 1.3]);
        let shift = Vec3::new(0.3, -1.0, 2.0);
        let s = DeformationState::from_map(&m, |x| a * x + shift).unwrap();
        for t in 0..m.num_tets() {
            assert!((deformation_gradient(&m, &s, t) - a).abs().max() < 1e-13);
        }
    }

    #[test]
    fn minors_of_simple_matrices() {
        let id = minors(&Matrix3::identity());
        assert_eq!(id.cof, Matrix3::identity());
        assert_eq!(id.det, 1.0);
        let d = minors(&Matrix3::from_diagonal(&Vec3::new(2.0, 3.0, 4.0)));
        assert_eq!(d.cof, Matrix3::from_diagonal(&Vec3::new(12.0, 8.0, 6.0)));
        assert_eq!(d.det, 24.0);
    }

    #[test]
    fn distortion_values() {
        let r3 = 3f64.sqrt();
        assert_relative_eq!(distortion(&Matrix3::identity()).unwrap(), 3.0 * r3, epsilon = 1e-14);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        assert_relative_eq!(distortion(&rot).unwrap(), 3.0 * r3, epsilon = 1e-12);
        let d = distortion(&Matrix3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))).unwrap();
        assert_relative_eq!(d, 3.0 * 6f64.sqrt(), epsilon = 1e-13);
        assert!(distortion(&Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0))).is_err());
    }

    #[test]
    fn dirichlet_conformity_is_enforced() {
        let rule = crate::mesh::BoxTagging::clamped_bottom_loaded_top();
        let m = build_box_mesh([1, 1, 1], [1.0; 3], |c| rule.tag(c, &[1.0; 3])).unwrap();
        let err = DeformationState::from_map(&m, |x| x * 2.0).unwrap_err();
        assert!(matches!(err, KinematicsError::DirichletMismatch(_)));
        let moved = DeformationState::identity(&m).displaced(&vec![Vec3::repeat(1.0); m.num_vertices()], 0.5);
        for v in 0..m.num_vertices() {
            if moved.dirichlet_mask()[v] {
                assert_eq!(moved.positions()[v], m.vertices()[v]);
            } else {
                assert_eq!(moved.positions()[v], m.vertices()[v] + Vec3::repeat(0.5));
            }
        }
    }

    #[test]
    fn ciarlet_necas_identity_and_stretch() {
        let m = cube(3);
        let id = ciarlet_necas_residual(&m, &DeformationState::identity(&m), MonteCarlo { samples: 100_000, seed: 1 }).unwrap();
        assert_relative_eq!(id.jacobian_integral, 1.0, epsilon = 1e-13);
        assert!(id.residual.abs() <= 3.0 * id.std_error + 1e-12);

        let s = DeformationState::from_map(&m, |x| Vec3::new(2.0 * x.x, x.y, x.z)).unwrap();
        let st = ciarlet_necas_residual(&m, &s, MonteCarlo { samples: 100_000, seed: 2 }).unwrap();
        assert_relative_eq!(st.jacobian_integral, 2.0, epsilon = 1e-13);
        assert!(st.residual.abs() <= 3.0 * st.std_error + 1e-12);
    }

    #[test]
    fn ciarlet_necas_errors() {
        let m = cube(1);
        let s = DeformationState::identity(&m);
        assert_eq!(
            ciarlet_necas_residual(&m, &s, MonteCarlo { samples: 0, seed: 0 }).unwrap_err(),
            KinematicsError::ZeroSamples
        );
        let flat = DeformationState::from_map(&m, |x| Vec3::new(x.x, x.y, 0.0)).unwrap();
        assert!(matches!(
            ciarlet_necas_residual(&m, &flat, MonteCarlo { samples: 10, seed: 0 }),
            Err(KinematicsError::NonPositiveJacobian { .. })
        ));
    }

    #[test]
    fn locator_finds_sheared_box_interior() {
        let m = cube(3);
        let a = mat(&[1.0, 0.5, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0, 1.0]);
        let s = DeformationState::from_map(&m, |x| a * x).unwrap();
        let loc = TetLocator::new(&m, &s);
        let ainv = a.try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let p = Vec3::new(rng.gen::<f64>() * 1.5, rng.gen::<f64>() * 1.2, rng.gen::<f64>());
            let x = ainv * p;
            let inside = x.iter().all(|&c| (1e-9..=1.0 - 1e-9).contains(&c));
            let outside = x.iter().any(|&c| !(-1e-9..=1.0 + 1e-9).contains(&c));
            if inside {
                assert!(loc.covers(&p));
            } else if outside {
                assert!(!loc.covers(&p));
            }
        }
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix3<f64>> {
        proptest::collection::vec(-2.0f64..2.0, 9).prop_map(|v| Matrix3::from_row_slice(&v))
    }

    proptest! {
        #[test]
        fn cofactor_identity(f in arb_matrix()) {
            let mn = minors(&f);
            let err = (mn.cof * f.transpose() - Matrix3::identity() * mn.det).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((mn.det - f.determinant()).abs() < 1e-12);
            if mn.det > 1e-3 {
                let alt = f.try_inverse().unwrap().transpose() * mn.det;
                prop_assert!((alt - mn.cof).abs().max() < 1e-9 * (1.0 + mn.cof.abs().max()));
            }
        }

        #[test]
        fn distortion_lower_bound(f in arb_matrix()) {
            prop_assume!(f.determinant() > 1e-6);
            prop_assert!(distortion(&f).unwrap() >= 3.0 * 3f64.sqrt() * (1.0 - 1e-12));
        }

        #[test]
        fn gradient_is_linear_in_positions(seed in 0u64..1000, alpha in -2.0f64..2.0) {
            let m = cube(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_field = || -> Vec<Vec3> {
                (0..m.num_vertices()).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
            };
            let p = rand_field();
            let q = rand_field();
            let combo: Vec<Vec3> = p.iter().zip(&q).map(|(a, b)| a + b * alpha).collect();
            let sp = DeformationState::new(&m, p).unwrap();
            let sq = DeformationState::new(&m, q).unwrap();
            let sc = DeformationState::new(&m, combo).unwrap();
            for t in 0..m.num_tets() {
                let lhs = deformation_gradient(&m, &sc, t);
                let rhs = deformation_gradient(&m, &sp, t) + deformation_gradient(&m, &sq, t) * alpha;
                prop_assert!((lhs - rhs).abs().max() < 1e-12);
            }
        }
    }
}
