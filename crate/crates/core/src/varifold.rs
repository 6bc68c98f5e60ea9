//! Phase labelings and the oriented interface varifold they induce.
//!
//! The interface is the set of deformed interior faces separating tets with
//! different labels, each carried with multiplicity one and the unit normal
//! pointing into phase 1. Curvature is sampled per vertex with the cotangent
//! mean-curvature vector and the angle-defect Gaussian curvature; the squared
//! second fundamental form is estimated as `4|H|² − 2K` and the curvature
//! function norm as `|A| = √(2|II|²)`.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;

use nalgebra::Matrix3;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::energy::{interface_density, EnergyModel};
use crate::kinematics::{min_jacobian, DeformationState};
use crate::mesh::{ReferenceMesh, Vec3};
use crate::par;
use crate::quadrature::{tet_rule, triangle_rule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarifoldError {
    #[error("label {value} at tet {tet} is not 0 or 1")]
    NonBinaryLabel { tet: usize, value: u8 },
    #[error("expected {expected} labels, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("state is not feasible (min det F = {0:e})")]
    Infeasible(f64),
    #[error("interface edge {0:?} has {1} incident triangles")]
    NonManifoldEdge([usize; 2], usize),
    #[error("interface vertex {0} has a non-manifold neighbourhood")]
    NonManifoldVertex(usize),
    #[error("interface triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("interface vertex {0} has zero mixed area")]
    ZeroMixedArea(usize),
    #[error("test field {0} does not vanish on the domain boundary")]
    SupportTouchesBoundary(usize),
    #[error("quadrature order must be positive")]
    ZeroOrder,
}

/// Per-tet phase label in `{0, 1}`; phase 1 is the stiff material.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhaseLabeling {
    labels: Vec<u8>,
}

impl PhaseLabeling {
    pub fn new(labels: Vec<u8>) -> Result<Self, VarifoldError> {
        if let Some((tet, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(VarifoldError::NonBinaryLabel { tet, value });
        }
        Ok(Self { labels })
    }

    pub fn for_mesh(mesh: &ReferenceMesh, labels: Vec<u8>) -> Result<Self, VarifoldError> {
        if labels.len() != mesh.num_tets() {
            return Err(VarifoldError::SizeMismatch {
                expected: mesh.num_tets(),
                got: labels.len(),
            });
        }
        Self::new(labels)
    }

    pub fn uniform(n: usize, label: u8) -> Self {
        Self::new(vec![label.min(1); n]).unwrap()
    }

    pub fn from_fn(n: usize, f: impl Fn(usize) -> bool) -> Self {
        Self {
            labels: (0..n).map(|t| u8::from(f(t))).collect(),
        }
    }

    /// Label tets by whether their reference centroid satisfies `inside`.
    pub fn from_centroids(mesh: &ReferenceMesh, inside: impl Fn(&Vec3) -> bool) -> Self {
        Self::from_fn(mesh.num_tets(), |t| inside(&mesh.tet_centroid(t)))
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// `Σ_{label=1} vol_ref`.
    pub fn phase1_volume(&self, mesh: &ReferenceMesh) -> f64 {
        let v: Vec<f64> = self.labels.iter().zip(mesh.volumes()).map(|(&l, &v)| if l == 1 { v } else { 0.0 }).collect();
        par::pairwise_sum(&v)
    }

    pub fn set(&mut self, tet: usize, label: u8) {
        self.labels[tet] = label.min(1);
    }

    pub fn flip(&mut self, tet: usize) {
        self.labels[tet] ^= 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceTriangle {
    /// Local vertex indices, ordered so the right-hand normal is `normal`.
    pub vertices: [usize; 3],
    pub area: f64,
    /// Unit normal pointing into phase 1.
    pub normal: Vec3,
    /// Mesh face and its phase-1 / phase-0 tets, when extracted from a mesh.
    pub origin: Option<FaceOrigin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceOrigin {
    pub face: usize,
    pub phase1_tet: usize,
    pub phase0_tet: usize,
}

/// Per-vertex curvature samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurvatureSamples {
    /// Mean-curvature vector, `|H| = (κ₁ + κ₂)/2`.
    pub mean_curvature: Vec<Vec3>,
    pub gaussian_curvature: Vec<f64>,
    pub mixed_area: Vec<f64>,
    /// Estimate of `|II|² = κ₁² + κ₂²` after round-off flooring and clipping.
    pub second_fundamental_sq: Vec<f64>,
    pub a_norm: Vec<f64>,
    /// Vertices on an open edge; excluded from curvature quadrature.
    pub boundary: Vec<bool>,
    /// Vertices where `4|H|² − 2K` came out significantly negative.
    pub clipped: usize,
}

/// Oriented multiplicity-one varifold carried by a triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceVarifold {
    vertices: Vec<Vec3>,
    /// Identifier of each vertex in the source numbering (mesh vertex ids).
    sources: Vec<usize>,
    triangles: Vec<InterfaceTriangle>,
    open_edges: Vec<[usize; 2]>,
    curvature: CurvatureSamples,
}

impl InterfaceVarifold {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            sources: Vec::new(),
            triangles: Vec::new(),
            open_edges: Vec::new(),
            curvature: CurvatureSamples::default(),
        }
    }

    /// Build from an oriented triangle soup; normals follow the right-hand
    /// rule. `sources` identifies vertices for [`boundary_defect`].
    pub fn from_triangles(vertices: Vec<Vec3>, sources: Vec<usize>, triangles: &[[usize; 3]]) -> Result<Self, VarifoldError> {
        Self::build(vertices, sources, triangles.iter().map(|&t| (t, None)).collect())
    }

    fn build(vertices: Vec<Vec3>, sources: Vec<usize>, tris: Vec<([usize; 3], Option<FaceOrigin>)>) -> Result<Self, VarifoldError> {
        let mut triangles = Vec::with_capacity(tris.len());
        for (i, (t, origin)) in tris.into_iter().enumerate() {
            let [a, b, c] = t.map(|k| vertices[k]);
            let n = (b - a).cross(&(c - a));
            let len = n.norm();
            if !(len > 0.0) {
                return Err(VarifoldError::DegenerateTriangle(i));
            }
            triangles.push(InterfaceTriangle {
                vertices: t,
                area: 0.5 * len,
                normal: n / len,
                origin,
            });
        }
        let mut edge_count: HashMap<[usize; 2], usize> = HashMap::new();
        for t in &triangles {
            let [a, b, c] = t.vertices;
            for (p, q) in [(a, b), (b, c), (c, a)] {
                *edge_count.entry([p.min(q), p.max(q)]).or_default() += 1;
            }
        }
        let mut bad: Vec<_> = edge_count.iter().filter(|(_, &c)| c > 2).collect();
        bad.sort();
        if let Some((&e, &c)) = bad.first() {
            return Err(VarifoldError::NonManifoldEdge([sources[e[0]], sources[e[1]]], c));
        }
        let mut open_edges: Vec<[usize; 2]> = edge_count.into_iter().filter(|(_, c)| *c == 1).map(|(e, _)| e).collect();
        open_edges.sort_unstable();
        let mut v = Self {
            vertices,
            sources,
            triangles,
            open_edges,
            curvature: CurvatureSamples::default(),
        };
        v.curvature = discrete_curvature(&v)?;
        Ok(v)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn triangles(&self) -> &[InterfaceTriangle] {
        &self.triangles
    }

    pub fn open_edges(&self) -> &[[usize; 2]] {
        &self.open_edges
    }

    pub fn curvature(&self) -> &CurvatureSamples {
        &self.curvature
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Reverse the orientation of one triangle (used to inject coupling
    /// defects). Curvature magnitudes are unaffected.
    pub fn flip_triangle(&mut self, i: usize) {
        let t = &mut self.triangles[i];
        t.vertices.swap(1, 2);
        t.normal = -t.normal;
    }

    /// Copy without triangle `i`; open edges and curvature are recomputed.
    pub fn without_triangle(&self, i: usize) -> Result<Self, VarifoldError> {
        let tris = self
            .triangles
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, t)| (t.vertices, t.origin))
            .collect();
        Self::build(self.vertices.clone(), self.sources.clone(), tris)
    }
}

/// Extract the interface between phases on the deformed configuration.
pub fn extract_interface(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling) -> Result<InterfaceVarifold, VarifoldError> {
    if phases.len() != mesh.num_tets() {
        return Err(VarifoldError::SizeMismatch {
            expected: mesh.num_tets(),
            got: phases.len(),
        });
    }
    let min_det = min_jacobian(mesh, state);
    if !(min_det > 0.0) {
        return Err(VarifoldError::Infeasible(min_det));
    }
    extract_at_positions(mesh, state.positions(), phases)
}

/// Same as [`extract_interface`] with the reference positions (identity
/// placement), as used by the referential objective.
pub fn extract_reference_interface(mesh: &ReferenceMesh, phases: &PhaseLabeling) -> Result<InterfaceVarifold, VarifoldError> {
    extract_at_positions(mesh, mesh.vertices(), phases)
}

fn extract_at_positions(mesh: &ReferenceMesh, pos: &[Vec3], phases: &PhaseLabeling) -> Result<InterfaceVarifold, VarifoldError> {
    let labels = phases.labels();
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut sources = Vec::new();
    let mut tris = Vec::new();
    let centroid = |t: usize| mesh.tets()[t].iter().map(|&i| pos[i]).sum::<Vec3>() / 4.0;
    for (fid, face) in mesh.faces().iter().enumerate() {
        let Some(second) = face.second else { continue };
        if labels[face.first] == labels[second] {
            continue;
        }
        let (one, zero) = if labels[face.first] == 1 { (face.first, second) } else { (second, face.first) };
        let mut ids = face.key;
        let [a, b, c] = ids.map(|i| pos[i]);
        let n = (b - a).cross(&(c - a));
        if n.dot(&(centroid(one) - centroid(zero))) < 0.0 {
            ids.swap(1, 2);
        }
        let tri = ids.map(|g| {
            *local.entry(g).or_insert_with(|| {
                vertices.push(pos[g]);
                sources.push(g);
                vertices.len() - 1
            })
        });
        tris.push((
            tri,
            Some(FaceOrigin {
                face: fid,
                phase1_tet: one,
                phase0_tet: zero,
            }),
        ));
    }
    InterfaceVarifold::build(vertices, sources, tris)
}

/// `μ_V(ℝ³)`: total area with multiplicity one.
pub fn varifold_mass(v: &InterfaceVarifold) -> f64 {
    let areas: Vec<f64> = v.triangles.iter().map(|t| t.area).collect();
    par::pairwise_sum(&areas)
}

fn angle(u: &Vec3, w: &Vec3) -> f64 {
    u.cross(w).norm().atan2(u.dot(w))
}

/// Whether the link of each vertex is a single cycle (interior) or a single
/// path (boundary).
fn check_vertex_links(v: &InterfaceVarifold, boundary: &[bool]) -> Result<(), VarifoldError> {
    let mut links: Vec<Vec<[usize; 2]>> = vec![Vec::new(); v.vertices.len()];
    for t in &v.triangles {
        let [a, b, c] = t.vertices;
        links[a].push([b, c]);
        links[b].push([c, a]);
        links[c].push([a, b]);
    }
    for (vid, link) in links.iter().enumerate() {
        if link.is_empty() {
            continue;
        }
        let mut degree: HashMap<usize, usize> = HashMap::new();
        for e in link {
            *degree.entry(e[0]).or_default() += 1;
            *degree.entry(e[1]).or_default() += 1;
        }
        let ends = degree.values().filter(|&&d| d == 1).count();
        let ok_degrees = degree.values().all(|&d| d <= 2) && if boundary[vid] { ends == 2 } else { ends == 0 };
        // connected: number of link edges equals vertices − components, so a
        // single path has |E| = |V| − 1 and a single cycle |E| = |V|
        let mut parent: HashMap<usize, usize> = degree.keys().map(|&k| (k, k)).collect();
        fn find(p: &mut HashMap<usize, usize>, x: usize) -> usize {
            let mut r = x;
            while p[&r] != r {
                r = p[&r];
            }
            p.insert(x, r);
            r
        }
        for e in link {
            let (ra, rb) = (find(&mut parent, e[0]), find(&mut parent, e[1]));
            if ra != rb {
                parent.insert(ra, rb);
            }
        }
        let keys: Vec<usize> = degree.keys().copied().collect();
        let roots: HashSet<usize> = keys.into_iter().map(|k| find(&mut parent, k)).collect();
        if !ok_degrees || roots.len() != 1 {
            return Err(VarifoldError::NonManifoldVertex(v.sources[vid]));
        }
    }
    Ok(())
}

/// Cotangent mean curvature, angle-defect Gaussian curvature and mixed
/// (Voronoi/barycentric) areas per vertex.
pub fn discrete_curvature(v: &InterfaceVarifold) -> Result<CurvatureSamples, VarifoldError> {
    let n = v.vertices.len();
    let mut boundary = vec![false; n];
    for e in &v.open_edges {
        boundary[e[0]] = true;
        boundary[e[1]] = true;
    }
    check_vertex_links(v, &boundary)?;

    let mut laplace = vec![Vec3::zeros(); n];
    let mut laplace_scale = vec![0.0; n];
    let mut angle_sum = vec![0.0; n];
    let mut mixed = vec![0.0; n];
    let x = &v.vertices;
    for t in &v.triangles {
        let ids = t.vertices;
        let mut cot = [0.0; 3];
        let mut ang = [0.0; 3];
        for k in 0..3 {
            let (i, j, l) = (ids[k], ids[(k + 1) % 3], ids[(k + 2) % 3]);
            let (u, w) = (x[j] - x[i], x[l] - x[i]);
            ang[k] = angle(&u, &w);
            cot[k] = u.dot(&w) / u.cross(&w).norm();
        }
        for k in 0..3 {
            let i = ids[k];
            angle_sum[i] += ang[k];
            // edge (j, l) opposite corner k
            let (j, l) = (ids[(k + 1) % 3], ids[(k + 2) % 3]);
            let e = x[j] - x[l];
            laplace[j] += e * cot[k];
            laplace[l] -= e * cot[k];
            let s = cot[k].abs() * e.norm();
            laplace_scale[j] += s;
            laplace_scale[l] += s;
        }
        let obtuse = ang.iter().position(|&a| a > PI / 2.0);
        for k in 0..3 {
            let i = ids[k];
            mixed[i] += match obtuse {
                None => {
                    let (j, l) = (ids[(k + 1) % 3], ids[(k + 2) % 3]);
                    // Voronoi: (|x_i − x_j|² cot(∠l) + |x_i − x_l|² cot(∠j)) / 8
                    ((x[i] - x[j]).norm_squared() * cot[(k + 2) % 3] + (x[i] - x[l]).norm_squared() * cot[(k + 1) % 3]) / 8.0
                }
                Some(o) if o == k => t.area / 2.0,
                Some(_) => t.area / 4.0,
            };
        }
    }

    let mut out = CurvatureSamples {
        mean_curvature: vec![Vec3::zeros(); n],
        gaussian_curvature: vec![0.0; n],
        mixed_area: mixed,
        second_fundamental_sq: vec![0.0; n],
        a_norm: vec![0.0; n],
        boundary,
        clipped: 0,
    };
    for i in 0..n {
        let area = out.mixed_area[i];
        if !(area > 0.0) {
            return Err(VarifoldError::ZeroMixedArea(v.sources[i]));
        }
        let h = laplace[i] / (4.0 * area);
        let full = if out.boundary[i] { PI } else { 2.0 * PI };
        let k = (full - angle_sum[i]) / area;
        out.mean_curvature[i] = h;
        out.gaussian_curvature[i] = k;
        if out.boundary[i] {
            continue;
        }
        let ii = 4.0 * h.norm_squared() - 2.0 * k;
        // floating-point error bound of the estimate; anything inside is noise
        let h_err = 16.0 * f64::EPSILON * laplace_scale[i] / (4.0 * area);
        let k_err = 16.0 * f64::EPSILON * (angle_sum[i] + full) / area;
        let floor = 4.0 * (4.0 * (2.0 * h.norm() * h_err + h_err * h_err) + 2.0 * k_err);
        let ii = if ii < -floor {
            out.clipped += 1;
            0.0
        } else if ii <= floor {
            0.0
        } else {
            ii
        };
        out.second_fundamental_sq[i] = ii;
        out.a_norm[i] = (2.0 * ii).sqrt();
    }
    Ok(out)
}

/// `Σ_v mixed_area · Ψ(|A|(v))`; boundary vertices contribute `Ψ(0)`.
pub fn interface_energy(v: &InterfaceVarifold, model: &EnergyModel) -> f64 {
    let c = &v.curvature;
    let terms: Vec<f64> = c.mixed_area.iter().zip(&c.a_norm).map(|(&w, &a)| w * interface_density(a, model)).collect();
    par::pairwise_sum(&terms)
}

/// `∫ |A|^p dμ_V` by the same vertex quadrature.
pub fn curvature_integral(v: &InterfaceVarifold, p: f64) -> f64 {
    let c = &v.curvature;
    let terms: Vec<f64> = c.mixed_area.iter().zip(&c.a_norm).map(|(&w, &a)| w * a.powf(p)).collect();
    par::pairwise_sum(&terms)
}

/// Number of open interface edges that do not lie on the domain boundary.
/// `domain_boundary` holds sorted source-vertex pairs.
pub fn boundary_defect(v: &InterfaceVarifold, domain_boundary: &HashSet<[usize; 2]>) -> usize {
    v.open_edges
        .iter()
        .filter(|e| {
            let (a, b) = (v.sources[e[0]], v.sources[e[1]]);
            !domain_boundary.contains(&[a.min(b), a.max(b)])
        })
        .count()
}

/// Vector test fields for the coupling identity.
#[derive(Debug, Clone, PartialEq)]
pub enum TestField {
    Constant(Vec3),
    /// `(a + B (x − c)) · (1 − |x − c|²/ρ²)³₊`, a C² polynomial bump.
    Bump {
        center: Vec3,
        radius: f64,
        constant: Vec3,
        linear: Matrix3<f64>,
    },
}

impl TestField {
    /// `Y(x) = (x − c) · bump(x)`.
    pub fn radial_bump(center: Vec3, radius: f64) -> Self {
        TestField::Bump {
            center,
            radius,
            constant: Vec3::zeros(),
            linear: Matrix3::identity(),
        }
    }

    /// Random bump centred within `spread` of `around` with radius in
    /// `radius`, unit-scale random coefficients.
    pub fn random_bump(rng: &mut impl Rng, around: Vec3, spread: f64, radius: (f64, f64)) -> Self {
        let mut unit = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let offset = unit() * spread;
        let constant = unit();
        let linear = Matrix3::from_columns(&[unit(), unit(), unit()]);
        let r = rng.gen_range(radius.0..radius.1);
        TestField::Bump {
            center: around + offset,
            radius: r,
            constant,
            linear: linear / r,
        }
    }

    pub fn value(&self, x: &Vec3) -> Vec3 {
        match self {
            TestField::Constant(c) => *c,
            TestField::Bump {
                center,
                radius,
                constant,
                linear,
            } => {
                let d = x - center;
                let q = d.norm_squared() / (radius * radius);
                if q >= 1.0 {
                    return Vec3::zeros();
                }
                (constant + linear * d) * (1.0 - q).powi(3)
            }
        }
    }

    pub fn divergence(&self, x: &Vec3) -> f64 {
        match self {
            TestField::Constant(_) => 0.0,
            TestField::Bump {
                center,
                radius,
                constant,
                linear,
            } => {
                let d = x - center;
                let r2 = radius * radius;
                let q = d.norm_squared() / r2;
                if q >= 1.0 {
                    return 0.0;
                }
                let bump = (1.0 - q).powi(3);
                let grad = d * (-6.0 * (1.0 - q).powi(2) / r2);
                linear.trace() * bump + (constant + linear * d).dot(&grad)
            }
        }
    }

    /// Closed ball containing the support, `None` if unbounded.
    pub fn support(&self) -> Option<(Vec3, f64)> {
        match self {
            TestField::Constant(_) => None,
            TestField::Bump { center, radius, .. } => Some((*center, *radius)),
        }
    }

    /// Sup norm estimated on a 41³ lattice over the support (exact for
    /// constants).
    pub fn sup_norm(&self) -> f64 {
        match self {
            TestField::Constant(c) => c.norm(),
            TestField::Bump { center, radius, .. } => {
                const N: usize = 41;
                let mut best = 0.0f64;
                for i in 0..N {
                    for j in 0..N {
                        for k in 0..N {
                            let s = |m: usize| -1.0 + 2.0 * m as f64 / (N - 1) as f64;
                            let x = center + Vec3::new(s(i), s(j), s(k)) * *radius;
                            best = best.max(self.value(&x).norm());
                        }
                    }
                }
                best
            }
        }
    }
}

fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    // closest point by Voronoi region classification
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (p - (a + ab * t)).norm();
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (p - (a + ac * t)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * t)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    (p - (a + ab * v + ac * w)).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingTerm {
    /// `⟨Dφ, Y⟩ = −Σ_{phase-1 tets} ∫ div Y`.
    pub lhs: f64,
    /// `⟨V, QY⟩ = Σ_triangles ∫ Y · ν`.
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingReport {
    pub terms: Vec<CouplingTerm>,
    pub max_residual: f64,
}

/// Compare the distributional derivative of the phase indicator with the
/// first moment of the varifold normals, field by field.
pub fn coupling_residual(
    mesh: &ReferenceMesh,
    state: &DeformationState,
    phases: &PhaseLabeling,
    v: &InterfaceVarifold,
    fields: &[TestField],
    order: usize,
) -> Result<CouplingReport, VarifoldError> {
    if order == 0 {
        return Err(VarifoldError::ZeroOrder);
    }
    let pos = state.positions();
    let labels = phases.labels();

    // deformed boundary faces of phase-1 tets: where div-theorem flux would leak
    let mut leaking = Vec::new();
    for face in mesh.faces().iter().filter(|f| !f.is_interior() && labels[f.first] == 1) {
        leaking.push(face.key.map(|i| pos[i]));
    }
    for (i, field) in fields.iter().enumerate() {
        let touches = match field.support() {
            None => !leaking.is_empty(),
            Some((c, r)) => leaking.iter().any(|[a, b, cc]| point_triangle_distance(&c, a, b, cc) < r),
        };
        if touches {
            return Err(VarifoldError::SupportTouchesBoundary(i));
        }
    }

    let tet_q = tet_rule(order);
    let tri_q = triangle_rule(order);
    let phase1: Vec<usize> = (0..mesh.num_tets()).filter(|&t| labels[t] == 1).collect();
    let mut terms = Vec::with_capacity(fields.len());
    for field in fields {
        let lhs_parts = par::map_slice(&phase1, |&t| {
            let [a, b, c, d] = mesh.tets()[t].map(|i| pos[i]);
            let (e1, e2, e3) = (b - a, c - a, d - a);
            let jac = e1.cross(&e2).dot(&e3);
            let s: f64 = tet_q.iter().map(|(xi, w)| w * field.divergence(&(a + e1 * xi[0] + e2 * xi[1] + e3 * xi[2]))).sum();
            s * jac
        });
        let rhs_parts = par::map_slice(&v.triangles, |t| {
            let [a, b, c] = t.vertices.map(|k| v.vertices[k]);
            let (e1, e2) = (b - a, c - a);
            let s: f64 = tri_q.iter().map(|(xi, w)| w * field.value(&(a + e1 * xi[0] + e2 * xi[1])).dot(&t.normal)).sum();
            s * 2.0 * t.area
        });
        let lhs = -par::pairwise_sum(&lhs_parts);
        let rhs = par::pairwise_sum(&rhs_parts);
        terms.push(CouplingTerm {
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        });
    }
    let max_residual = terms.iter().map(|t| t.residual).fold(0.0, f64::max);
    Ok(CouplingReport { terms, max_residual })
}

/// For each interface triangle, `ν · (centroid(phase-1 tet) − centroid(phase-0 tet))`
/// on the given positions; all must be positive.
pub fn orientation_margins(mesh: &ReferenceMesh, state: &DeformationState, v: &InterfaceVarifold) -> Vec<f64> {
    let pos = state.positions();
    let centroid = |t: usize| mesh.tets()[t].iter().map(|&i| pos[i]).sum::<Vec3>() / 4.0;
    v.triangles
        .iter()
        .filter_map(|t| t.origin.map(|o| t.normal.dot(&(centroid(o.phase1_tet) - centroid(o.phase0_tet)))))
        .collect()
}
