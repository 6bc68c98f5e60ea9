//! Tetrahedral reference meshes of the body with tagged boundary faces.
//!
//! A [`ReferenceMesh`] is always valid: it can only be obtained through
//! [`ReferenceMesh::from_parts`], which repairs inverted tets by swapping two
//! vertices and rejects anything else that fails [`validate_parts`]. Raw,
//! possibly broken input lives in [`MeshParts`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Local faces of a tet, each listed opposite the vertex with the same index
/// and ordered so the right-hand normal points outward for a positive tet.
pub const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaceTag {
    Dirichlet,
    Neumann,
    Free,
}

impl fmt::Display for FaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaceTag::Dirichlet => "DIRICHLET",
            FaceTag::Neumann => "NEUMANN",
            FaceTag::Free => "FREE",
        };
        f.write_str(s)
    }
}

impl FromStr for FaceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DIRICHLET" => Ok(FaceTag::Dirichlet),
            "NEUMANN" => Ok(FaceTag::Neumann),
            "FREE" => Ok(FaceTag::Free),
            other => Err(format!("unknown face tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundaryFace {
    pub vertices: [usize; 3],
    pub tag: FaceTag,
}

/// A side of an axis-aligned box `[0, extent]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSide {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl BoxSide {
    fn contains(self, p: &Vec3, extent: &[f64; 3]) -> bool {
        let (axis, value) = match self {
            BoxSide::XMin => (0, 0.0),
            BoxSide::XMax => (0, extent[0]),
            BoxSide::YMin => (1, 0.0),
            BoxSide::YMax => (1, extent[1]),
            BoxSide::ZMin => (2, 0.0),
            BoxSide::ZMax => (2, extent[2]),
        };
        (p[axis] - value).abs() <= 1e-9 * extent[axis]
    }
}

/// Face-centroid tagging rule for box meshes. Dirichlet wins over Neumann;
/// untouched sides are free.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxTagging {
    #[serde(default)]
    pub dirichlet: Vec<BoxSide>,
    #[serde(default)]
    pub neumann: Vec<BoxSide>,
}

impl BoxTagging {
    pub fn all_free() -> Self {
        Self::default()
    }

    /// Bottom clamped, top loaded.
    pub fn clamped_bottom_loaded_top() -> Self {
        Self {
            dirichlet: vec![BoxSide::ZMin],
            neumann: vec![BoxSide::ZMax],
        }
    }

    pub fn tag(&self, centroid: &Vec3, extent: &[f64; 3]) -> FaceTag {
        if self.dirichlet.iter().any(|s| s.contains(centroid, extent)) {
            FaceTag::Dirichlet
        } else if self.neumann.iter().any(|s| s.contains(centroid, extent)) {
            FaceTag::Neumann
        } else {
            FaceTag::Free
        }
    }
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("cell counts must be at least 1, got {0:?}")]
    ZeroCount([usize; 3]),
    #[error("box extents must be finite and positive, got {0:?}")]
    DegenerateExtent([f64; 3]),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unvalidated mesh data as read from a file or produced by a generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshParts {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    pub boundary_faces: Vec<BoundaryFace>,
}

/// An interior or boundary face of the tetrahedralization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    /// Sorted vertex indices.
    pub key: [usize; 3],
    pub first: usize,
    pub second: Option<usize>,
}

impl Face {
    pub fn is_interior(&self) -> bool {
        self.second.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub offenders: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Tets whose orientation was repaired on construction.
    pub orientation_fixes: Vec<usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, offenders: Vec<String>) {
        self.checks.push(Check {
            name,
            passed: offenders.is_empty(),
            offenders,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            write!(f, "{status}: {}", c.name)?;
            if !c.offenders.is_empty() {
                let shown: Vec<&str> = c.offenders.iter().take(8).map(String::as_str).collect();
                write!(f, " [{}", shown.join(", "))?;
                if c.offenders.len() > shown.len() {
                    write!(f, ", ... {} total", c.offenders.len())?;
                }
                write!(f, "]")?;
            }
            writeln!(f)?;
        }
        if !self.orientation_fixes.is_empty() {
            writeln!(f, "reoriented tets: {:?}", self.orientation_fixes)?;
        }
        Ok(())
    }
}

pub const CHECK_INDEX_RANGE: &str = "index range";
pub const CHECK_NEGATIVE_VOLUME: &str = "negative volume";
pub const CHECK_DUPLICATE_TET: &str = "duplicate tet";
pub const CHECK_NON_MANIFOLD_FACE: &str = "face with more than two tets";
pub const CHECK_TAG_ON_INTERIOR: &str = "tag on non-boundary face";
pub const CHECK_UNTAGGED_BOUNDARY: &str = "untagged boundary face";
pub const CHECK_DUPLICATE_TAG: &str = "duplicate boundary tag";

pub fn signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

fn face_incidence(tets: &[[usize; 4]]) -> HashMap<[usize; 3], Vec<(usize, usize)>> {
    let mut map: HashMap<[usize; 3], Vec<(usize, usize)>> = HashMap::with_capacity(tets.len() * 2);
    for (t, tet) in tets.iter().enumerate() {
        for (lf, local) in TET_FACES.iter().enumerate() {
            let key = sorted3([tet[local[0]], tet[local[1]], tet[local[2]]]);
            map.entry(key).or_default().push((t, lf));
        }
    }
    map
}

/// Check every mesh invariant on raw data. Never fails; the report carries the
/// offending entities.
pub fn validate_parts(parts: &MeshParts) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nv = parts.vertices.len();

    let mut bad_index = Vec::new();
    for (t, tet) in parts.tets.iter().enumerate() {
        if tet.iter().any(|&i| i >= nv) {
            bad_index.push(format!("tet {t}"));
        }
    }
    for (i, bf) in parts.boundary_faces.iter().enumerate() {
        if bf.vertices.iter().any(|&v| v >= nv) {
            bad_index.push(format!("boundary face {i}"));
        }
    }
    let indices_ok = bad_index.is_empty();
    report.push(CHECK_INDEX_RANGE, bad_index);
    if !indices_ok {
        return report;
    }

    let negative: Vec<String> = parts
        .tets
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let v = &parts.vertices;
            signed_volume(&v[t[0]], &v[t[1]], &v[t[2]], &v[t[3]]) <= 0.0
        })
        .map(|(i, _)| format!("tet {i}"))
        .collect();
    report.push(CHECK_NEGATIVE_VOLUME, negative);

    let mut seen: HashMap<[usize; 4], usize> = HashMap::new();
    let mut duplicates = Vec::new();
    for (t, tet) in parts.tets.iter().enumerate() {
        let mut key = *tet;
        key.sort_unstable();
        if let Some(prev) = seen.insert(key, t) {
            duplicates.push(format!("tet {t} (same as {prev})"));
        }
    }
    report.push(CHECK_DUPLICATE_TET, duplicates);

    let incidence = face_incidence(&parts.tets);
    let mut non_manifold: Vec<String> = incidence
        .iter()
        .filter(|(_, inc)| inc.len() > 2)
        .map(|(k, _)| format!("face {k:?}"))
        .collect();
    non_manifold.sort();
    report.push(CHECK_NON_MANIFOLD_FACE, non_manifold);

    let mut tagged: HashMap<[usize; 3], usize> = HashMap::new();
    let mut dup_tags = Vec::new();
    let mut on_interior = Vec::new();
    for (i, bf) in parts.boundary_faces.iter().enumerate() {
        let key = sorted3(bf.vertices);
        if let Some(prev) = tagged.insert(key, i) {
            dup_tags.push(format!("boundary face {i} (same as {prev})"));
        }
        if incidence.get(&key).is_none_or(|inc| inc.len() != 1) {
            on_interior.push(format!("boundary face {i} {:?}", bf.vertices));
        }
    }
    let mut untagged: Vec<String> = incidence
        .iter()
        .filter(|(k, inc)| inc.len() == 1 && !tagged.contains_key(*k))
        .map(|(k, _)| format!("face {k:?}"))
        .collect();
    untagged.sort();
    report.push(CHECK_TAG_ON_INTERIOR, on_interior);
    report.push(CHECK_UNTAGGED_BOUNDARY, untagged);
    report.push(CHECK_DUPLICATE_TAG, dup_tags);
    report
}

/// Immutable, validated tetrahedral mesh of the reference configuration.
#[derive(Debug, Clone)]
pub struct ReferenceMesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    boundary_faces: Vec<BoundaryFace>,
    volumes: Vec<f64>,
    /// Inverse of the reference edge matrix `[X1-X0, X2-X0, X3-X0]` per tet.
    edge_inverse: Vec<Matrix3<f64>>,
    faces: Vec<Face>,
    tet_faces: Vec<[usize; 4]>,
    boundary_edges: HashSet<[usize; 2]>,
}

impl ReferenceMesh {
    /// Repair orientation, validate, and build adjacency.
    pub fn from_parts(mut parts: MeshParts) -> Result<(Self, ValidationReport), MeshError> {
        let nv = parts.vertices.len();
        let mut fixes = Vec::new();
        for (t, tet) in parts.tets.iter_mut().enumerate() {
            if tet.iter().any(|&i| i >= nv) {
                continue;
            }
            let v = &parts.vertices;
            if signed_volume(&v[tet[0]], &v[tet[1]], &v[tet[2]], &v[tet[3]]) < 0.0 {
                tet.swap(2, 3);
                fixes.push(t);
            }
        }
        let mut report = validate_parts(&parts);
        report.orientation_fixes = fixes;
        if !report.is_valid() {
            return Err(MeshError::Invalid(report));
        }
        Ok((Self::assemble(parts), report))
    }

    fn assemble(parts: MeshParts) -> Self {
        let MeshParts {
            vertices,
            tets,
            boundary_faces,
        } = parts;
        let mut volumes = Vec::with_capacity(tets.len());
        let mut edge_inverse = Vec::with_capacity(tets.len());
        for t in &tets {
            let [a, b, c, d] = t.map(|i| vertices[i]);
            volumes.push(signed_volume(&a, &b, &c, &d));
            let m = Matrix3::from_columns(&[b - a, c - a, d - a]);
            edge_inverse.push(m.try_inverse().expect("validated tet is non-degenerate"));
        }

        let incidence = face_incidence(&tets);
        let mut keys: Vec<&[usize; 3]> = incidence.keys().collect();
        keys.sort_unstable();
        let mut faces = Vec::with_capacity(keys.len());
        let mut tet_faces = vec![[usize::MAX; 4]; tets.len()];
        for key in keys {
            let inc = &incidence[key];
            let fid = faces.len();
            for &(t, lf) in inc {
                tet_faces[t][lf] = fid;
            }
            faces.push(Face {
                key: *key,
                first: inc[0].0,
                second: inc.get(1).map(|x| x.0),
            });
        }

        let mut boundary_edges = HashSet::new();
        for bf in &boundary_faces {
            let [a, b, c] = bf.vertices;
            for (p, q) in [(a, b), (b, c), (c, a)] {
                boundary_edges.insert([p.min(q), p.max(q)]);
            }
        }

        Self {
            vertices,
            tets,
            boundary_faces,
            volumes,
            edge_inverse,
            faces,
            tet_faces,
            boundary_edges,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn edge_inverse(&self, tet: usize) -> &Matrix3<f64> {
        &self.edge_inverse[tet]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Face indices of a tet, in [`TET_FACES`] order.
    pub fn tet_faces(&self, tet: usize) -> [usize; 4] {
        self.tet_faces[tet]
    }

    /// Tet across local face `local` of `tet`, if any.
    pub fn neighbor(&self, tet: usize, local: usize) -> Option<usize> {
        let f = &self.faces[self.tet_faces[tet][local]];
        if f.first == tet {
            f.second
        } else {
            Some(f.first)
        }
    }

    /// Sorted vertex pairs of edges lying on the domain boundary.
    pub fn boundary_edges(&self) -> &HashSet<[usize; 2]> {
        &self.boundary_edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn total_volume(&self) -> f64 {
        crate::par::pairwise_sum(&self.volumes)
    }

    pub fn tet_centroid(&self, tet: usize) -> Vec3 {
        let t = self.tets[tet];
        (self.vertices[t[0]] + self.vertices[t[1]] + self.vertices[t[2]] + self.vertices[t[3]]) / 4.0
    }

    /// Vertices lying on a face with the given tag.
    pub fn tagged_vertices(&self, tag: FaceTag) -> Vec<bool> {
        let mut mask = vec![false; self.vertices.len()];
        for bf in self.boundary_faces.iter().filter(|b| b.tag == tag) {
            for &v in &bf.vertices {
                mask[v] = true;
            }
        }
        mask
    }

    /// Largest extent of the vertex bounding box.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = bounding_box(&self.vertices);
        (hi - lo).norm()
    }

    pub fn to_parts(&self) -> MeshParts {
        MeshParts {
            vertices: self.vertices.clone(),
            tets: self.tets.clone(),
            boundary_faces: self.boundary_faces.clone(),
        }
    }
}

pub fn validate_mesh(mesh: &ReferenceMesh) -> ValidationReport {
    validate_parts(&mesh.to_parts())
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Structured box `[0, extent]` with `counts` cells per axis, each cell split
/// into six tets around its main diagonal. All square faces are cut along the
/// same diagonal, so neighbouring cells conform and all tets have equal volume.
pub fn build_box_mesh<T>(counts: [usize; 3], extent: [f64; 3], tagging: T) -> Result<ReferenceMesh, MeshError>
where
    T: Fn(&Vec3) -> FaceTag,
{
    Ok(ReferenceMesh::from_parts(box_mesh_parts(counts, extent, tagging)?)?.0)
}

pub fn box_mesh_parts<T>(counts: [usize; 3], extent: [f64; 3], tagging: T) -> Result<MeshParts, MeshError>
where
    T: Fn(&Vec3) -> FaceTag,
{
    if counts.contains(&0) {
        return Err(MeshError::ZeroCount(counts));
    }
    if extent.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
        return Err(MeshError::DegenerateExtent(extent));
    }
    let [nx, ny, nz] = counts;
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Vec3::new(
                    extent[0] * i as f64 / nx as f64,
                    extent[1] * j as f64 / ny as f64,
                    extent[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [id(c[0], c[1], c[2]); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[step + 1] = id(c[0], c[1], c[2]);
                    }
                    let v = &vertices;
                    if signed_volume(&v[tet[0]], &v[tet[1]], &v[tet[2]], &v[tet[3]]) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    let boundary_faces = boundary_faces_of(&vertices, &tets, tagging);
    Ok(MeshParts {
        vertices,
        tets,
        boundary_faces,
    })
}

/// Tag every combinatorial boundary face (one incident tet) with the outward
/// orientation inherited from its tet.
pub fn boundary_faces_of<T>(vertices: &[Vec3], tets: &[[usize; 4]], tagging: T) -> Vec<BoundaryFace>
where
    T: Fn(&Vec3) -> FaceTag,
{
    let incidence = face_incidence(tets);
    let mut out: Vec<BoundaryFace> = incidence
        .values()
        .filter(|inc| inc.len() == 1)
        .map(|inc| {
            let (t, lf) = inc[0];
            let l = TET_FACES[lf];
            let verts = [tets[t][l[0]], tets[t][l[1]], tets[t][l[2]]];
            let centroid = (vertices[verts[0]] + vertices[verts[1]] + vertices[verts[2]]) / 3.0;
            BoundaryFace {
                vertices: verts,
                tag: tagging(&centroid),
            }
        })
        .collect();
    out.sort_unstable_by_key(|b| sorted3(b.vertices));
    out
}

/// Unit icosphere: an icosahedron subdivided `level` times with vertices
/// projected to the unit sphere. Triangles are outward oriented.
pub fn icosphere(level: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<[usize; 2], usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = [a.min(b), a.max(b)];
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    (verts, tris)
}

/// Polyhedral ball around `center`: a cone core and `layers[0] − 1` prism
/// shells out to an icosphere of radius `inner` (flagged `true`), then
/// `layers[1]` prism shells out to radius `outer`. Shell radii are equally
/// spaced. The outer surface is tagged free.
pub fn build_ball_mesh(level: usize, center: Vec3, inner: f64, outer: f64, layers: [usize; 2]) -> Result<(ReferenceMesh, Vec<bool>), MeshError> {
    if !(inner > 0.0 && outer > inner && inner.is_finite() && outer.is_finite()) {
        return Err(MeshError::DegenerateExtent([inner, outer, outer - inner]));
    }
    if layers[0] == 0 || layers[1] == 0 {
        return Err(MeshError::ZeroCount([layers[0], layers[1], 1]));
    }
    let (dirs, tris) = icosphere(level);
    let n = dirs.len();
    let mut radii: Vec<f64> = (1..=layers[0]).map(|k| inner * k as f64 / layers[0] as f64).collect();
    radii.extend((1..=layers[1]).map(|k| inner + (outer - inner) * k as f64 / layers[1] as f64));
    let mut vertices = Vec::with_capacity(radii.len() * n + 1);
    vertices.push(center);
    for r in &radii {
        vertices.extend(dirs.iter().map(|d| center + d * *r));
    }
    let id = |shell: usize, i: usize| 1 + shell * n + i;

    let mut tets = Vec::with_capacity(tris.len() * (3 * radii.len() - 2));
    let mut inside = Vec::with_capacity(tets.capacity());
    for &[a, b, c] in &tris {
        tets.push([0, id(0, a), id(0, b), id(0, c)]);
        inside.push(true);
    }
    for shell in 1..radii.len() {
        for &tri in &tris {
            // Sorted-index prism split: every quad side is cut from its larger
            // bottom index to its smaller top index, which is conforming.
            let mut s = tri;
            s.sort_unstable();
            let [a, b, c] = s;
            let (lo, hi) = (shell - 1, shell);
            tets.push([id(lo, a), id(lo, b), id(lo, c), id(hi, a)]);
            tets.push([id(lo, b), id(lo, c), id(hi, a), id(hi, b)]);
            tets.push([id(lo, c), id(hi, a), id(hi, b), id(hi, c)]);
            inside.extend([shell < layers[0]; 3]);
        }
    }
    for t in tets.iter_mut() {
        if signed_volume(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]], &vertices[t[3]]) < 0.0 {
            t.swap(2, 3);
        }
    }
    let boundary_faces = boundary_faces_of(&vertices, &tets, |_| FaceTag::Free);
    let (mesh, _) = ReferenceMesh::from_parts(MeshParts {
        vertices,
        tets,
        boundary_faces,
    })?;
    Ok((mesh, inside))
}

pub const MESH_HEADER: &str = "tetmesh v1";

/// Serialize in the line-oriented `tetmesh v1` format. Coordinates use the
/// shortest representation that round-trips exactly.
pub fn format_mesh(mesh: &ReferenceMesh) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "{MESH_HEADER}").unwrap();
    writeln!(
        out,
        "# {} vertices, {} tets, {} boundary faces",
        mesh.num_vertices(),
        mesh.num_tets(),
        mesh.boundary_faces().len()
    )
    .unwrap();
    for v in mesh.vertices() {
        writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for t in mesh.tets() {
        writeln!(out, "t {} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
    }
    for b in mesh.boundary_faces() {
        writeln!(out, "bf {} {} {} {}", b.vertices[0], b.vertices[1], b.vertices[2], b.tag).unwrap();
    }
    out
}

pub fn parse_mesh(text: &str) -> Result<MeshParts, MeshError> {
    let mut parts = MeshParts::default();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| MeshError::Parse { line: line_no, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != MESH_HEADER {
                return Err(err(format!("expected header `{MESH_HEADER}`, found `{line}`")));
            }
            saw_header = true;
            continue;
        }
        let mut fields = line.split_whitespace();
        let kind = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        let nums = |n: usize| -> Result<Vec<usize>, MeshError> {
            if rest.len() < n {
                return Err(err(format!("`{kind}` expects {n} indices")));
            }
            rest[..n]
                .iter()
                .map(|s| s.parse::<usize>().map_err(|e| err(format!("bad index `{s}`: {e}"))))
                .collect()
        };
        match kind {
            "v" => {
                if rest.len() != 3 {
                    return Err(err("`v` expects 3 coordinates".into()));
                }
                let mut c = [0.0; 3];
                for (slot, s) in c.iter_mut().zip(&rest) {
                    *slot = s.parse::<f64>().map_err(|e| err(format!("bad coordinate `{s}`: {e}")))?;
                }
                parts.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            "t" => {
                if rest.len() != 4 {
                    return Err(err("`t` expects 4 indices".into()));
                }
                let n = nums(4)?;
                parts.tets.push([n[0], n[1], n[2], n[3]]);
            }
            "bf" => {
                if rest.len() != 4 {
                    return Err(err("`bf` expects 3 indices and a tag".into()));
                }
                let n = nums(3)?;
                let tag = rest[3].parse::<FaceTag>().map_err(err)?;
                parts.boundary_faces.push(BoundaryFace {
                    vertices: [n[0], n[1], n[2]],
                    tag,
                });
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    if !saw_header {
        return Err(MeshError::Parse {
            line: 1,
            message: format!("missing header `{MESH_HEADER}`"),
        });
    }
    Ok(parts)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<(ReferenceMesh, ValidationReport), MeshError> {
    let text = fs::read_to_string(path)?;
    ReferenceMesh::from_parts(parse_mesh(&text)?)
}

pub fn save_mesh(mesh: &ReferenceMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    crate::export::write_atomic(path.as_ref(), format_mesh(mesh).as_bytes())?;
    Ok(())
}
