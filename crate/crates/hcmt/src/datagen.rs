//! Synthetic 2D flexible-impact ground truth.
//!
//! A ball is dropped onto a horizontally clamped plate. Both objects are
//! triangle meshes discretized as a lumped-mass spring network with dashpot
//! damping and penalty contact between objects — an explicit integration of
//! the flexible-dynamic balance of mass, damping, and stiffness forces. The
//! oracle integrates semi-implicit Euler substeps well below the recorded
//! step, and doubles as the physical reference the learned model is judged
//! against.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::dataset::{write_meta, write_trajectory, DatasetMeta, TrajectoryMeta};
use crate::delaunay::delaunay_remesh;
use crate::mesh::{signed_area, MeshTopology, NodeKind, SystemState, Trajectory};
use crate::{Error, Result};

/// Scene and integration parameters. Lengths are desk units, times seconds;
/// densities are mass per area and moduli pressure-like, consistent within
/// the system.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub plate_cols: usize,
    pub plate_rows: usize,
    pub element_size: f64,
    pub plate_density: f64,
    pub plate_youngs: f64,

    pub ball_radius: f64,
    pub ball_density: f64,
    pub ball_youngs: f64,
    pub drop_gap: f64,
    pub impact_speed: f64,

    pub contact_stiffness: f64,
    pub contact_range: f64,
    pub damping_ratio: f64,

    /// Oracle substep; `dt_fine * record_every` is the recorded Δt.
    pub dt_fine: f64,
    pub record_every: usize,
    /// Recorded transitions κ; a trajectory stores κ+1 states.
    pub steps: usize,
    pub gravity: f64,

    /// Contact radius written into the dataset meta for the learned model.
    pub gamma: f64,
}

impl ScenarioSpec {
    /// Desk-scale ball-drop preset: ≈290 nodes, κ=50, recorded Δt = 2 ms.
    pub fn impact2d() -> Self {
        ScenarioSpec {
            plate_cols: 50,
            plate_rows: 5,
            element_size: 0.3,
            plate_density: 1.0,
            plate_youngs: 1.0e7,
            ball_radius: 1.05,
            ball_density: 2.0,
            ball_youngs: 5.0e7,
            drop_gap: 0.9,
            impact_speed: 20.0,
            contact_stiffness: 1.0e6,
            contact_range: 0.25,
            damping_ratio: 0.02,
            dt_fine: 1.0e-4,
            record_every: 20,
            steps: 50,
            gravity: 9.8,
            gamma: 0.4,
        }
    }

    pub fn recorded_dt(&self) -> f64 {
        self.dt_fine * self.record_every as f64
    }
}

/// Per-trajectory randomized draw ranges.
#[derive(Debug, Clone)]
pub struct MaterialRanges {
    pub rho_scale: (f64, f64),
    pub y_scale: (f64, f64),
    pub thickness_scale: (f64, f64),
    pub drop_gap: (f64, f64),
    pub impact_speed: (f64, f64),
}

impl Default for MaterialRanges {
    fn default() -> Self {
        MaterialRanges {
            rho_scale: (0.8, 1.25),
            y_scale: (0.5, 2.0),
            thickness_scale: (0.75, 1.3),
            drop_gap: (0.6, 1.2),
            impact_speed: (15.0, 25.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaterialSample {
    pub rho_scale: f64,
    pub y_scale: f64,
    pub thickness_scale: f64,
    pub drop_gap: f64,
    pub impact_speed: f64,
}

impl MaterialSample {
    pub fn neutral(spec: &ScenarioSpec) -> Self {
        MaterialSample {
            rho_scale: 1.0,
            y_scale: 1.0,
            thickness_scale: 1.0,
            drop_gap: spec.drop_gap,
            impact_speed: spec.impact_speed,
        }
    }
}

pub fn sample_materials(ranges: &MaterialRanges, rng: &mut impl Rng) -> MaterialSample {
    let draw = |(lo, hi): (f64, f64), rng: &mut dyn rand::RngCore| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    MaterialSample {
        rho_scale: draw(ranges.rho_scale, rng),
        y_scale: draw(ranges.y_scale, rng),
        thickness_scale: draw(ranges.thickness_scale, rng),
        drop_gap: draw(ranges.drop_gap, rng),
        impact_speed: draw(ranges.impact_speed, rng),
    }
}

/// Concentric-ring disc points: center plus rings of 6k nodes at radius
/// k·Δr. Ring spacing roughly matches the circumferential spacing, and
/// non-adjacent nodes stay farther apart than the default contact radius.
fn disc_points(radius: f64, ring_spacing: f64) -> Vec<[f64; 2]> {
    let rings = (radius / ring_spacing).round().max(1.0) as usize;
    let dr = radius / rings as f64;
    let mut pts = vec![[0.0, 0.0]];
    for k in 1..=rings {
        let n = 6 * k;
        let r = k as f64 * dr;
        let offset = if k % 2 == 0 { std::f64::consts::PI / n as f64 } else { 0.0 };
        for j in 0..n {
            let a = offset + 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            pts.push([r * a.cos(), r * a.sin()]);
        }
    }
    pts
}

/// Builds the two-object scene: a clamped plate strip with the ball placed
/// `drop_gap` above its top surface, moving downward at `impact_speed`.
pub fn build_scene(
    spec: &ScenarioSpec,
    materials: &MaterialSample,
) -> Result<(MeshTopology, SystemState)> {
    if spec.plate_cols < 2 || spec.plate_rows < 2 {
        return Err(Error::Config("plate grid needs at least 2×2 nodes".into()));
    }
    if materials.drop_gap <= 0.0 {
        return Err(Error::Topology(format!(
            "initial geometry overlaps: drop gap {} must be positive",
            materials.drop_gap
        )));
    }
    let h = spec.element_size;
    let (cols, rows) = (spec.plate_cols, spec.plate_rows);
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let mut kinds = Vec::new();
    let mut object_id = Vec::new();
    let mut cells: Vec<[usize; 3]> = Vec::new();

    // Plate: top row at y = 0, centered on x = 0, end columns clamped.
    let x0 = -0.5 * (cols - 1) as f64 * h;
    for r in 0..rows {
        for c in 0..cols {
            coords.push([x0 + c as f64 * h, -(r as f64) * h]);
            kinds.push(if c == 0 || c == cols - 1 {
                NodeKind::PlateFixed
            } else {
                NodeKind::PlateFree
            });
            object_id.push(0);
        }
    }
    let idx = |c: usize, r: usize| r * cols + c;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            if (r + c) % 2 == 0 {
                cells.push([idx(c, r), idx(c + 1, r), idx(c + 1, r + 1)]);
                cells.push([idx(c, r), idx(c + 1, r + 1), idx(c, r + 1)]);
            } else {
                cells.push([idx(c, r), idx(c + 1, r), idx(c, r + 1)]);
                cells.push([idx(c + 1, r), idx(c + 1, r + 1), idx(c, r + 1)]);
            }
        }
    }

    // Ball: disc centered above the plate.
    let base = coords.len();
    let center_y = materials.drop_gap + spec.ball_radius;
    let local = disc_points(spec.ball_radius, 1.15 * h);
    for p in &local {
        coords.push([p[0], center_y + p[1]]);
        kinds.push(NodeKind::Ball);
        object_id.push(1);
    }
    let ball_cells = delaunay_remesh(&local)?;
    for t in &ball_cells {
        cells.push([base + t[0], base + t[1], base + t[2]]);
    }

    let n = coords.len();
    let density = kinds
        .iter()
        .map(|k| {
            materials.rho_scale
                * if *k == NodeKind::Ball { spec.ball_density } else { spec.plate_density }
        })
        .collect();
    let youngs_modulus = kinds
        .iter()
        .map(|k| {
            materials.y_scale
                * if *k == NodeKind::Ball { spec.ball_youngs } else { spec.plate_youngs }
        })
        .collect();
    let topo = MeshTopology {
        cells,
        mesh_coords: coords.clone(),
        object_id,
        kinds,
        density,
        youngs_modulus,
    };
    let state = SystemState {
        world_coords: coords.clone(),
        prev_world_coords: coords,
        stress: vec![0.0; n],
    };
    topo.validate()?;
    Ok((topo, state))
}

// ---------------------------------------------------------------------------
// Spring system and explicit integration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
}

#[derive(Debug, Clone)]
pub struct SpringSystem {
    pub springs: Vec<Spring>,
    pub node_mass: Vec<f64>,
    pub degree: Vec<usize>,
    pub max_omega: f64,
}

impl SpringSystem {
    /// Lumped masses from cell areas; per-edge stiffness `Y·cross / L₀` with
    /// the plate cross-section scaled by the thickness draw; dashpot damping
    /// as a fraction of critical.
    pub fn build(
        topology: &MeshTopology,
        spec: &ScenarioSpec,
        materials: &MaterialSample,
    ) -> Result<Self> {
        let n = topology.num_nodes();
        let mut node_mass = vec![0.0f64; n];
        for cell in &topology.cells {
            let area = signed_area(
                topology.mesh_coords[cell[0]],
                topology.mesh_coords[cell[1]],
                topology.mesh_coords[cell[2]],
            )
            .abs();
            for &v in cell {
                node_mass[v] += topology.density[v] * area / 3.0;
            }
        }
        if node_mass.iter().any(|&m| m <= 0.0) {
            return Err(Error::Topology("node without incident cell area".into()));
        }

        let directed = crate::mesh::build_graph(topology)?;
        let mut degree = vec![0usize; n];
        let mut springs = Vec::new();
        let mut max_omega = 0.0f64;
        for &(i, j) in &directed {
            degree[i] += 1;
            if i >= j {
                continue;
            }
            let du = [
                topology.mesh_coords[i][0] - topology.mesh_coords[j][0],
                topology.mesh_coords[i][1] - topology.mesh_coords[j][1],
            ];
            let rest = du[0].hypot(du[1]);
            if rest <= 0.0 {
                return Err(Error::Topology(format!("zero-length edge ({i},{j})")));
            }
            let youngs = 0.5 * (topology.youngs_modulus[i] + topology.youngs_modulus[j]);
            let cross = spec.element_size
                * if topology.object_id[i] == 0 { materials.thickness_scale } else { 1.0 };
            let stiffness = youngs * cross / rest;
            let reduced = node_mass[i] * node_mass[j] / (node_mass[i] + node_mass[j]);
            let damping = 2.0 * spec.damping_ratio * (stiffness * reduced).sqrt();
            let omega = (stiffness * (1.0 / node_mass[i] + 1.0 / node_mass[j])).sqrt();
            max_omega = max_omega.max(omega);
            springs.push(Spring { i, j, rest_length: rest, stiffness, damping });
        }
        // Contact penalties participate in the stability budget too.
        let m_min = node_mass.iter().cloned().fold(f64::INFINITY, f64::min);
        max_omega = max_omega.max((spec.contact_stiffness * 2.0 / m_min).sqrt());
        Ok(SpringSystem { springs, node_mass, degree, max_omega })
    }

    /// Explicit-integration stability margin `ω·dt < 0.3`.
    pub fn validate_dt(&self, dt_fine: f64) -> Result<()> {
        if self.max_omega * dt_fine >= 0.3 {
            return Err(Error::Numerical(format!(
                "substep {dt_fine} unstable: ω·dt = {:.3} ≥ 0.3 (needs dt < {:.3e})",
                self.max_omega * dt_fine,
                0.3 / self.max_omega
            )));
        }
        Ok(())
    }

    /// Smallest substep count per recorded step that meets the margin with
    /// headroom.
    pub fn stable_substeps(&self, recorded_dt: f64, baseline: usize) -> usize {
        let needed = (recorded_dt * self.max_omega / 0.25).ceil() as usize;
        needed.max(baseline).max(1)
    }
}

/// Integrator state: positions and velocities in physical units.
#[derive(Debug, Clone)]
pub struct SimState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

fn accumulate_contact_forces(
    topology: &MeshTopology,
    positions: &[[f64; 2]],
    velocities: &[[f64; 2]],
    spec: &ScenarioSpec,
    forces: &mut [[f64; 2]],
) {
    let range = spec.contact_range;
    let inv = 1.0 / range;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (k, p) in positions.iter().enumerate() {
        grid.entry(((p[0] * inv).floor() as i64, (p[1] * inv).floor() as i64))
            .or_default()
            .push(k);
    }
    let _ = velocities;
    for (i, p) in positions.iter().enumerate() {
        let (cx, cy) = ((p[0] * inv).floor() as i64, (p[1] * inv).floor() as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &q in bucket {
                    // Each unordered pair once, opposing objects only.
                    if q <= i || topology.object_id[i] == topology.object_id[q] {
                        continue;
                    }
                    let d = [p[0] - positions[q][0], p[1] - positions[q][1]];
                    let dist = d[0].hypot(d[1]);
                    if dist >= range || dist == 0.0 {
                        continue;
                    }
                    let overlap = range - dist;
                    let f = spec.contact_stiffness * overlap / dist;
                    forces[i][0] += f * d[0];
                    forces[i][1] += f * d[1];
                    forces[q][0] -= f * d[0];
                    forces[q][1] -= f * d[1];
                }
            }
        }
    }
}

/// One semi-implicit Euler substep: spring, damping, contact, and gravity
/// forces, then `v += f/m·dt`, `x += v·dt`, with clamped nodes pinned.
pub fn step_dynamics(
    topology: &MeshTopology,
    system: &SpringSystem,
    state: &mut SimState,
    spec: &ScenarioSpec,
    dt_fine: f64,
) -> Result<()> {
    system.validate_dt(dt_fine)?;
    let n = topology.num_nodes();
    let mut forces = vec![[0.0f64; 2]; n];
    for (i, f) in forces.iter_mut().enumerate() {
        if !topology.kinds[i].is_fixed() {
            f[1] -= system.node_mass[i] * spec.gravity;
        }
    }
    for s in &system.springs {
        let d = [
            state.positions[s.j][0] - state.positions[s.i][0],
            state.positions[s.j][1] - state.positions[s.i][1],
        ];
        let len = d[0].hypot(d[1]);
        if len == 0.0 {
            continue;
        }
        let dir = [d[0] / len, d[1] / len];
        let rel_v = [
            state.velocities[s.j][0] - state.velocities[s.i][0],
            state.velocities[s.j][1] - state.velocities[s.i][1],
        ];
        let v_along = rel_v[0] * dir[0] + rel_v[1] * dir[1];
        let magnitude = s.stiffness * (len - s.rest_length) + s.damping * v_along;
        let f = [magnitude * dir[0], magnitude * dir[1]];
        forces[s.i][0] += f[0];
        forces[s.i][1] += f[1];
        forces[s.j][0] -= f[0];
        forces[s.j][1] -= f[1];
    }
    accumulate_contact_forces(topology, &state.positions, &state.velocities, spec, &mut forces);

    for i in 0..n {
        if topology.kinds[i].is_fixed() {
            state.velocities[i] = [0.0, 0.0];
            continue;
        }
        let inv_m = 1.0 / system.node_mass[i];
        state.velocities[i][0] += forces[i][0] * inv_m * dt_fine;
        state.velocities[i][1] += forces[i][1] * inv_m * dt_fine;
        state.positions[i][0] += state.velocities[i][0] * dt_fine;
        state.positions[i][1] += state.velocities[i][1] * dt_fine;
        if !(state.positions[i][0].is_finite() && state.positions[i][1].is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite state at node {i}; dt_fine {dt_fine} too large for this stiffness"
            )));
        }
    }
    Ok(())
}

/// Per-node stress proxy: mean over incident edges of `Y·|strain|`.
pub fn stress_proxy(
    topology: &MeshTopology,
    system: &SpringSystem,
    positions: &[[f64; 2]],
) -> Vec<f64> {
    let n = topology.num_nodes();
    let mut stress = vec![0.0f64; n];
    for s in &system.springs {
        let d = [
            positions[s.j][0] - positions[s.i][0],
            positions[s.j][1] - positions[s.i][1],
        ];
        let len = d[0].hypot(d[1]);
        let strain = (len - s.rest_length).abs() / s.rest_length;
        let youngs = 0.5 * (topology.youngs_modulus[s.i] + topology.youngs_modulus[s.j]);
        stress[s.i] += youngs * strain;
        stress[s.j] += youngs * strain;
    }
    for i in 0..n {
        // Directed degree counts each incident edge twice.
        let deg = (system.degree[i] / 2).max(1);
        stress[i] /= deg as f64;
    }
    stress
}

/// Simulates one trajectory, recording κ+1 states at the recorded step.
#[allow(clippy::type_complexity)]
pub fn simulate_trajectory(
    spec: &ScenarioSpec,
    materials: &MaterialSample,
) -> Result<(MeshTopology, Vec<Vec<[f64; 2]>>, Vec<Vec<f64>>)> {
    let (topology, initial) = build_scene(spec, materials)?;
    let system = SpringSystem::build(&topology, spec, materials)?;
    let recorded_dt = spec.recorded_dt();
    let substeps = system.stable_substeps(recorded_dt, spec.record_every);
    let dt_fine = recorded_dt / substeps as f64;
    system.validate_dt(dt_fine)?;

    let n = topology.num_nodes();
    let mut state = SimState {
        positions: initial.world_coords.clone(),
        velocities: (0..n)
            .map(|i| {
                if topology.kinds[i] == NodeKind::Ball {
                    [0.0, -materials.impact_speed]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect(),
    };

    let mut positions = Vec::with_capacity(spec.steps + 1);
    let mut stress = Vec::with_capacity(spec.steps + 1);
    positions.push(state.positions.clone());
    stress.push(stress_proxy(&topology, &system, &state.positions));
    for _ in 0..spec.steps {
        for _ in 0..substeps {
            step_dynamics(&topology, &system, &mut state, spec, dt_fine)?;
        }
        positions.push(state.positions.clone());
        stress.push(stress_proxy(&topology, &system, &state.positions));
    }
    Ok((topology, positions, stress))
}

// ---------------------------------------------------------------------------
// Dataset generation.
// ---------------------------------------------------------------------------

/// Writes `n_train + n_val + n_test` trajectories plus `meta.json` into
/// `out`. Deterministic per seed: each trajectory draws its materials from
/// an independent stream.
pub fn generate_dataset(
    spec: &ScenarioSpec,
    ranges: &MaterialRanges,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetMeta> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("each split needs at least one trajectory".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Baseline topology (neutral draws) defines the shared meta arrays.
    let (base_topo, _) = build_scene(spec, &MaterialSample::neutral(spec))?;
    let mut meta = DatasetMeta {
        dim: 2,
        dt: spec.recorded_dt(),
        num_nodes: base_topo.num_nodes() as u32,
        cells: base_topo
            .cells
            .iter()
            .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
            .collect(),
        object_id: base_topo.object_id.clone(),
        kinds: base_topo.kinds.iter().map(|k| k.code()).collect(),
        rho: base_topo.density.clone(),
        youngs_modulus: base_topo.youngs_modulus.clone(),
        gamma: spec.gamma,
        trajectories: Vec::new(),
    };

    let total = n_train + n_val + n_test;
    for k in 0..total {
        let split = if k < n_train {
            "train"
        } else if k < n_train + n_val {
            "val"
        } else {
            "test"
        };
        let mut rng = crate::rng_stream(seed, k as u64);
        let materials = sample_materials(ranges, &mut rng);
        let (topo, positions, stress) = simulate_trajectory(spec, &materials)?;
        if topo.cells != base_topo.cells {
            return Err(Error::Topology("trajectory topology diverged from baseline".into()));
        }
        let file = format!("traj_{k}.bin");
        write_trajectory(&out.join(&file), &positions, &stress)?;
        meta.trajectories.push(TrajectoryMeta {
            file,
            split: split.to_string(),
            rho_scale: materials.rho_scale,
            y_scale: materials.y_scale,
            thickness_scale: materials.thickness_scale,
            drop_gap: materials.drop_gap,
            impact_speed: materials.impact_speed,
        });
    }
    write_meta(out, &meta)?;
    Ok(meta)
}

/// In-memory trajectory straight from the oracle, for tests.
pub fn oracle_trajectory(spec: &ScenarioSpec, materials: &MaterialSample) -> Result<Trajectory> {
    let (topology, positions, stress) = simulate_trajectory(spec, materials)?;
    let dt = spec.recorded_dt();
    let prev0: Vec<[f64; 2]> = positions[0]
        .iter()
        .zip(&topology.kinds)
        .map(|(p, k)| {
            if *k == NodeKind::Ball {
                [p[0], p[1] + materials.impact_speed * dt]
            } else {
                *p
            }
        })
        .collect();
    let states: Vec<SystemState> = positions
        .iter()
        .enumerate()
        .map(|(t, pos)| SystemState {
            world_coords: pos.clone(),
            prev_world_coords: if t == 0 { prev0.clone() } else { positions[t - 1].clone() },
            stress: stress[t].clone(),
        })
        .collect();
    Ok(Trajectory { topology, states, dt })
}
