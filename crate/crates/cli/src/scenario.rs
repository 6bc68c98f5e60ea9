//! Scenario files: mesh, model, initial labeling and run settings in one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use interfacial::mesh::{box_mesh_parts, load_mesh, BoxTagging, ValidationReport};
use interfacial::scenes::{half_space_labels, perturbed_slab, slab_labels};
use interfacial::{EnergyModel, PhaseLabeling, ReferenceMesh, SolveOptions, TopOptConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    Box {
        counts: [usize; 3],
        #[serde(default = "unit_extent")]
        extent: [f64; 3],
        #[serde(default)]
        tagging: BoxTagging,
    },
    /// Path relative to the scenario file.
    File { path: PathBuf },
}

fn unit_extent() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    Uniform {
        phase: u8,
    },
    /// `eta` defaults to the model's volume fraction.
    Slab {
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default = "z_axis")]
        axis: usize,
    },
    HalfSpace {
        #[serde(default = "z_axis")]
        axis: usize,
        level: f64,
    },
    PerturbedSlab {
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default = "z_axis")]
        axis: usize,
        swaps: usize,
    },
}

fn z_axis() -> usize {
    2
}

impl Default for LabelSpec {
    fn default() -> Self {
        LabelSpec::Slab { eta: None, axis: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvatureSpec {
    pub levels: Vec<usize>,
    pub radius: f64,
    pub cylinder_height: f64,
}

impl Default for CurvatureSpec {
    fn default() -> Self {
        Self {
            levels: vec![1, 2, 3, 4],
            radius: 1.0,
            cylinder_height: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mesh: MeshSpec,
    #[serde(default)]
    pub model: EnergyModel,
    #[serde(default)]
    pub labels: LabelSpec,
    #[serde(default)]
    pub solve: SolveOptions,
    #[serde(default)]
    pub topopt: TopOptConfig,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory; `--out` wins.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Write a snapshot every this many accepted moves (0 = never).
    #[serde(default)]
    pub snapshot_interval: usize,
    #[serde(default)]
    pub curvature: CurvatureSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Moves = 1,
    MonteCarlo = 2,
    Labels = 3,
}

pub fn sub_seed(master: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let mut s: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn build_mesh(&self) -> Result<(ReferenceMesh, ValidationReport)> {
        match &self.mesh {
            MeshSpec::Box { counts, extent, tagging } => {
                let parts = box_mesh_parts(*counts, *extent, |c| tagging.tag(c, extent))?;
                Ok(ReferenceMesh::from_parts(parts)?)
            }
            MeshSpec::File { path } => {
                let full = self.base_dir.join(path);
                load_mesh(&full).with_context(|| format!("loading mesh {}", full.display()))
            }
        }
    }

    pub fn build_labels(&self, mesh: &ReferenceMesh) -> Result<PhaseLabeling> {
        let eta_or = |eta: &Option<f64>| eta.unwrap_or(self.model.eta);
        let check_axis = |axis: usize| {
            if axis > 2 {
                bail!("label axis must be 0, 1 or 2, got {axis}");
            }
            Ok(())
        };
        Ok(match &self.labels {
            LabelSpec::Uniform { phase } => {
                if *phase > 1 {
                    bail!("uniform phase must be 0 or 1, got {phase}");
                }
                PhaseLabeling::uniform(mesh.num_tets(), *phase)
            }
            LabelSpec::Slab { eta, axis } => {
                check_axis(*axis)?;
                slab_labels(mesh, eta_or(eta), *axis)
            }
            LabelSpec::HalfSpace { axis, level } => {
                check_axis(*axis)?;
                half_space_labels(mesh, *axis, *level)
            }
            LabelSpec::PerturbedSlab { eta, axis, swaps } => {
                check_axis(*axis)?;
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, Stream::Labels));
                perturbed_slab(mesh, eta_or(eta), *axis, *swaps, &mut rng)
            }
        })
    }

    /// Solver options with the Monte Carlo seed drawn from the master seed.
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            seed: sub_seed(self.seed, Stream::MonteCarlo),
            ..self.solve.clone()
        }
    }

    /// Annealing settings with move and Monte Carlo seeds drawn from the master seed.
    pub fn topopt_config(&self) -> TopOptConfig {
        let mut c = self.topopt.clone();
        c.seed = sub_seed(self.seed, Stream::Moves);
        c.solve.seed = sub_seed(self.seed, Stream::MonteCarlo);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let s = [Stream::Moves, Stream::MonteCarlo, Stream::Labels].map(|k| sub_seed(7, k));
        assert_ne!(s[0], s[1]);
        assert_ne!(s[1], s[2]);
        assert_eq!(sub_seed(7, Stream::Moves), s[0]);
        assert_ne!(sub_seed(8, Stream::Moves), s[0]);
    }

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s: Scenario = serde_json::from_str(r#"{"mesh": {"kind": "box", "counts": [2, 2, 2]}}"#).unwrap();
        assert_eq!(s.model, EnergyModel::default());
        let (mesh, report) = s.build_mesh().unwrap();
        assert!(report.is_valid());
        let labels = s.build_labels(&mesh).unwrap();
        assert_eq!(labels.count_ones(), mesh.num_tets() / 2);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: Result<Scenario, _> = serde_json::from_str(r#"{"mesh": {"kind": "box", "counts": [2, 2, 2]}, "sead": 3}"#);
        assert!(r.is_err());
    }
}
