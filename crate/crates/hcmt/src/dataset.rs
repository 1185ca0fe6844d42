//! On-disk dataset format.
//!
//! A dataset directory holds one `meta.json` describing the shared topology,
//! material baselines, contact radius, and the per-trajectory material draws,
//! plus one binary `traj_<k>.bin` per trajectory:
//!
//! ```text
//! magic "HCMT" | version u32=1 | num_nodes u32 | num_steps u32
//! then num_steps records of
//!   positions: num_nodes × 2 f32, row-major | stress: num_nodes f32
//! ```
//!
//! All integers and floats are little-endian. Mesh-space coordinates are the
//! first record's positions; each state's previous positions chain to the
//! preceding record, and the first record's previous positions encode the
//! trajectory's initial ball velocity from the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mesh::{MeshTopology, NodeKind, SystemState, Trajectory};
use crate::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"HCMT";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Per-trajectory material draw, recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub file: String,
    pub split: String,
    pub rho_scale: f64,
    pub y_scale: f64,
    pub thickness_scale: f64,
    pub drop_gap: f64,
    /// Initial downward speed of the ball (length units per second).
    pub impact_speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dim: u32,
    pub dt: f64,
    pub num_nodes: u32,
    pub cells: Vec<[u32; 3]>,
    pub object_id: Vec<u32>,
    pub kinds: Vec<u8>,
    /// Baseline per-node density; trajectory values scale it by `rho_scale`.
    pub rho: Vec<f64>,
    /// Baseline per-node Young's modulus, scaled by `y_scale` per trajectory.
    #[serde(rename = "Y")]
    pub youngs_modulus: Vec<f64>,
    /// Contact radius the dataset was generated for.
    pub gamma: f64,
    pub trajectories: Vec<TrajectoryMeta>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?;
        let n = meta.num_nodes as usize;
        if meta.object_id.len() != n
            || meta.kinds.len() != n
            || meta.rho.len() != n
            || meta.youngs_modulus.len() != n
        {
            return Err(Error::Dataset(format!(
                "{}: per-node arrays disagree with num_nodes {n}",
                meta_path.display()
            )));
        }
        Ok(Dataset { dir: dir.to_path_buf(), meta })
    }

    pub fn num_trajectories(&self) -> usize {
        self.meta.trajectories.len()
    }

    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.meta
            .trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn contact_radius(&self) -> f64 {
        self.meta.gamma
    }

    /// Materializes trajectory `index` with its per-trajectory material
    /// values applied to the shared topology.
    pub fn load(&self, index: usize) -> Result<Trajectory> {
        let tm = self.meta.trajectories.get(index).ok_or_else(|| {
            Error::Dataset(format!(
                "trajectory index {index} out of range ({} available)",
                self.num_trajectories()
            ))
        })?;
        let path = self.dir.join(&tm.file);
        let (positions, stress) = read_trajectory(&path)?;
        if positions.is_empty() {
            return Err(Error::Dataset(format!("{}: no recorded states", path.display())));
        }
        let n = self.meta.num_nodes as usize;
        if positions[0].len() != n {
            return Err(Error::Dataset(format!(
                "{}: record has {} nodes, meta says {n}",
                path.display(),
                positions[0].len()
            )));
        }

        let kinds: Vec<NodeKind> =
            self.meta.kinds.iter().map(|&c| NodeKind::from_code(c)).collect::<Result<_>>()?;
        let topology = MeshTopology {
            cells: self
                .meta
                .cells
                .iter()
                .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
                .collect(),
            mesh_coords: positions[0].clone(),
            object_id: self.meta.object_id.clone(),
            kinds: kinds.clone(),
            density: self.meta.rho.iter().map(|r| r * tm.rho_scale).collect(),
            youngs_modulus: self.meta.youngs_modulus.iter().map(|y| y * tm.y_scale).collect(),
        };

        // The pre-initial positions encode the initial ball velocity.
        let prev0: Vec<[f64; 2]> = positions[0]
            .iter()
            .zip(&kinds)
            .map(|(p, k)| {
                if *k == NodeKind::Ball {
                    [p[0], p[1] + tm.impact_speed * self.meta.dt]
                } else {
                    *p
                }
            })
            .collect();

        let mut states = Vec::with_capacity(positions.len());
        for (t, pos) in positions.iter().enumerate() {
            states.push(SystemState {
                world_coords: pos.clone(),
                prev_world_coords: if t == 0 { prev0.clone() } else { positions[t - 1].clone() },
                stress: stress[t].clone(),
            });
        }
        let traj = Trajectory { topology, states, dt: self.meta.dt };
        traj.validate()?;
        Ok(traj)
    }
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Dataset(format!("meta serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[allow(clippy::type_complexity)]
pub fn read_trajectory(path: &Path) -> Result<(Vec<Vec<[f64; 2]>>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::Dataset(format!("{}: not a trajectory file", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != TRAJECTORY_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported trajectory version {version}",
            path.display()
        )));
    }
    let num_nodes = read_u32(&mut r, path)? as usize;
    let num_steps = read_u32(&mut r, path)? as usize;
    let mut positions = Vec::with_capacity(num_steps);
    let mut stress = Vec::with_capacity(num_steps);
    let mut buf = vec![0u8; num_nodes * 2 * 4];
    let mut sbuf = vec![0u8; num_nodes * 4];
    for _ in 0..num_steps {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut pos = Vec::with_capacity(num_nodes);
        for i in 0..num_nodes {
            let x = f32::from_le_bytes(buf[8 * i..8 * i + 4].try_into().unwrap());
            let y = f32::from_le_bytes(buf[8 * i + 4..8 * i + 8].try_into().unwrap());
            pos.push([x as f64, y as f64]);
        }
        positions.push(pos);
        r.read_exact(&mut sbuf).map_err(|e| Error::io(path, e))?;
        stress.push(
            sbuf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        );
    }
    Ok((positions, stress))
}

pub fn write_trajectory(
    path: &Path,
    positions: &[Vec<[f64; 2]>],
    stress: &[Vec<f64>],
) -> Result<()> {
    assert_eq!(positions.len(), stress.len());
    let num_steps = positions.len();
    let num_nodes = positions.first().map_or(0, |p| p.len());
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(TRAJECTORY_MAGIC).map_err(io_err)?;
    w.write_all(&TRAJECTORY_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(num_nodes as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(num_steps as u32).to_le_bytes()).map_err(io_err)?;
    for (pos, st) in positions.iter().zip(stress) {
        assert_eq!(pos.len(), num_nodes);
        assert_eq!(st.len(), num_nodes);
        for p in pos {
            w.write_all(&(p[0] as f32).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(p[1] as f32).to_le_bytes()).map_err(io_err)?;
        }
        for &s in st {
            w.write_all(&(s as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_file_roundtrip() {
        let dir = std::env::temp_dir().join("hcmt_dataset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj_0.bin");
        let positions = vec![vec![[0.0, 0.0], [1.0, 2.0]], vec![[0.5, -0.25], [1.5, 2.5]]];
        let stress = vec![vec![0.0, 0.0], vec![3.25, -1.5]];
        write_trajectory(&path, &positions, &stress).unwrap();
        let (p, s) = read_trajectory(&path).unwrap();
        assert_eq!(p, positions);
        assert_eq!(s, stress);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("hcmt_dataset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"XXXX0123456789").unwrap();
        assert!(read_trajectory(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn missing_directory_is_io_error_with_path() {
        let err = Dataset::open(Path::new("/nonexistent/hcmt-data")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.to_string_lossy().contains("nonexistent")),
            other => panic!("expected io error, got {other}"),
        }
    }
}
