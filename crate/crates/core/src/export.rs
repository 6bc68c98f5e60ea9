//! File output: atomic writes, VTK legacy ASCII unstructured grids and OBJ.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::kinematics::DeformationState;
use crate::mesh::{ReferenceMesh, Vec3};
use crate::varifold::{InterfaceVarifold, PhaseLabeling};

/// Write `bytes` to a sibling temp file and rename it over `path`, so readers
/// never observe a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp.{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// RFC-4180 CSV with a header row taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const VTK_TETRA: u8 = 10;
const VTK_TRIANGLE: u8 = 5;

enum Attribute {
    Scalars(String, Vec<f64>),
    Vectors(String, Vec<Vec3>),
}

/// Minimal builder for a legacy `DATASET UNSTRUCTURED_GRID` file.
pub struct VtkGrid {
    title: String,
    points: Vec<Vec3>,
    cells: Vec<Vec<usize>>,
    cell_types: Vec<u8>,
    point_data: Vec<Attribute>,
    cell_data: Vec<Attribute>,
}

impl VtkGrid {
    pub fn new(title: impl Into<String>, points: Vec<Vec3>) -> Self {
        Self {
            title: title.into(),
            points,
            cells: Vec::new(),
            cell_types: Vec::new(),
            point_data: Vec::new(),
            cell_data: Vec::new(),
        }
    }

    pub fn tets(mut self, tets: &[[usize; 4]]) -> Self {
        for t in tets {
            self.cells.push(t.to_vec());
            self.cell_types.push(VTK_TETRA);
        }
        self
    }

    pub fn triangles(mut self, tris: &[[usize; 3]]) -> Self {
        for t in tris {
            self.cells.push(t.to_vec());
            self.cell_types.push(VTK_TRIANGLE);
        }
        self
    }

    pub fn point_scalars(mut self, name: &str, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.points.len());
        self.point_data.push(Attribute::Scalars(name.into(), values));
        self
    }

    pub fn point_vectors(mut self, name: &str, values: Vec<Vec3>) -> Self {
        assert_eq!(values.len(), self.points.len());
        self.point_data.push(Attribute::Vectors(name.into(), values));
        self
    }

    pub fn cell_scalars(mut self, name: &str, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.cells.len());
        self.cell_data.push(Attribute::Scalars(name.into(), values));
        self
    }

    pub fn cell_vectors(mut self, name: &str, values: Vec<Vec3>) -> Self {
        assert_eq!(values.len(), self.cells.len());
        self.cell_data.push(Attribute::Vectors(name.into(), values));
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# vtk DataFile Version 3.0");
        let _ = writeln!(s, "{}", self.title.lines().next().unwrap_or(""));
        let _ = writeln!(s, "ASCII");
        let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
        let _ = writeln!(s, "POINTS {} double", self.points.len());
        for p in &self.points {
            let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        }
        let size: usize = self.cells.iter().map(|c| c.len() + 1).sum();
        let _ = writeln!(s, "CELLS {} {}", self.cells.len(), size);
        for c in &self.cells {
            let _ = write!(s, "{}", c.len());
            for i in c {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "CELL_TYPES {}", self.cell_types.len());
        for t in &self.cell_types {
            let _ = writeln!(s, "{t}");
        }
        if !self.point_data.is_empty() {
            let _ = writeln!(s, "POINT_DATA {}", self.points.len());
            render_attributes(&mut s, &self.point_data);
        }
        if !self.cell_data.is_empty() {
            let _ = writeln!(s, "CELL_DATA {}", self.cells.len());
            render_attributes(&mut s, &self.cell_data);
        }
        s
    }
}

fn render_attributes(s: &mut String, attrs: &[Attribute]) {
    for a in attrs {
        match a {
            Attribute::Scalars(name, values) => {
                let _ = writeln!(s, "SCALARS {name} double 1");
                let _ = writeln!(s, "LOOKUP_TABLE default");
                for v in values {
                    let _ = writeln!(s, "{v:?}");
                }
            }
            Attribute::Vectors(name, values) => {
                let _ = writeln!(s, "VECTORS {name} double");
                for v in values {
                    let _ = writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z);
                }
            }
        }
    }
}

/// Deformed volume mesh with per-tet phase and Jacobian.
pub fn deformed_mesh_vtk(mesh: &ReferenceMesh, state: &DeformationState, phases: &PhaseLabeling) -> String {
    let det: Vec<f64> = (0..mesh.num_tets())
        .map(|t| crate::kinematics::deformation_gradient(mesh, state, t).determinant())
        .collect();
    let displacement: Vec<Vec3> = state.positions().iter().zip(mesh.vertices()).map(|(x, xr)| x - xr).collect();
    VtkGrid::new("deformed configuration", state.positions().to_vec())
        .tets(mesh.tets())
        .point_vectors("displacement", displacement)
        .cell_scalars("phase", phases.labels().iter().map(|&l| l as f64).collect())
        .cell_scalars("detF", det)
        .render()
}

/// Interface triangles with per-vertex curvature samples.
pub fn interface_vtk(v: &InterfaceVarifold) -> String {
    let tris: Vec<[usize; 3]> = v.triangles().iter().map(|t| t.vertices).collect();
    let c = v.curvature();
    VtkGrid::new("interface varifold", v.vertices().to_vec())
        .triangles(&tris)
        .point_scalars("H", c.mean_curvature.iter().map(|h| h.norm()).collect())
        .point_scalars("K", c.gaussian_curvature.clone())
        .point_scalars("A_norm", c.a_norm.clone())
        .point_vectors("H_vector", c.mean_curvature.clone())
        .cell_vectors("normal", v.triangles().iter().map(|t| t.normal).collect())
        .render()
}

/// Wavefront OBJ with one normal per triangle.
pub fn interface_obj(v: &InterfaceVarifold) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# interface: {} vertices, {} triangles", v.vertices().len(), v.triangles().len());
    for p in v.vertices() {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for t in v.triangles() {
        let _ = writeln!(s, "vn {:?} {:?} {:?}", t.normal.x, t.normal.y, t.normal.z);
    }
    for (i, t) in v.triangles().iter().enumerate() {
        let [a, b, c] = t.vertices.map(|k| k + 1);
        let n = i + 1;
        let _ = writeln!(s, "f {a}//{n} {b}//{n} {c}//{n}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vtk_header_and_counts() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let s = VtkGrid::new("t", pts).tets(&[[0, 1, 2, 3]]).cell_scalars("phase", vec![1.0]).render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# vtk DataFile Version 3.0");
        assert_eq!(lines[2], "ASCII");
        assert!(s.contains("CELLS 1 5\n4 0 1 2 3\n"));
        assert!(s.contains("CELL_TYPES 1\n10\n"));
        assert!(s.contains("CELL_DATA 1\nSCALARS phase double 1\nLOOKUP_TABLE default\n1.0\n"));
    }

    #[derive(Serialize)]
    struct Row {
        step: usize,
        value: f64,
        note: &'static str,
    }

    #[test]
    fn csv_quotes_and_headers() {
        let rows = [Row { step: 1, value: 0.5, note: "a,b" }, Row { step: 2, value: f64::NAN, note: "" }];
        assert_eq!(to_csv(&rows).unwrap(), "step,value,note\n1,0.5,\"a,b\"\n2,NaN,\n");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = std::env::temp_dir().join(format!("interfacial-export-{}", std::process::id()));
        let path = dir.join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(dir).unwrap();
    }
}
