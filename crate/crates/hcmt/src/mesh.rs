//! Mesh/graph data model: topology and state containers, graph construction,
//! node and edge features, radius-based contact search, and random-walk
//! training noise.
//!
//! Feature layout (2D impact configuration):
//! - node: `one_hot(kind) ‖ (x^t − x^{t−1}) ‖ ρ ‖ Y`, dimension 7
//! - mesh edge: `(u_i − u_j, |u_i − u_j|, x_i − x_j, |x_i − x_j|)`, dimension 6
//! - contact edge: `(x_i − x_q, |x_i − x_q|)`, dimension 3

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NODE_FEATURE_DIM: usize = 7;
pub const MESH_EDGE_FEATURE_DIM: usize = 6;
pub const CONTACT_EDGE_FEATURE_DIM: usize = 3;

/// Node classification. One-hot encoded into the first three node-feature
/// channels; `PlateFixed` nodes are boundary-prescribed and never move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    PlateFree,
    PlateFixed,
    Ball,
}

impl NodeKind {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            NodeKind::PlateFree => [1.0, 0.0, 0.0],
            NodeKind::PlateFixed => [0.0, 1.0, 0.0],
            NodeKind::Ball => [0.0, 0.0, 1.0],
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NodeKind::PlateFree => 0,
            NodeKind::PlateFixed => 1,
            NodeKind::Ball => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(NodeKind::PlateFree),
            1 => Ok(NodeKind::PlateFixed),
            2 => Ok(NodeKind::Ball),
            other => Err(Error::Dataset(format!("unknown node kind code {other}"))),
        }
    }

    pub fn is_fixed(self) -> bool {
        self == NodeKind::PlateFixed
    }
}

/// Static mesh description shared by all states of a trajectory.
///
/// `mesh_coords` are undeformed reference coordinates; they never change over
/// a trajectory. `density` and `youngs_modulus` are per-node material
/// constants replicated from the material spec.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    pub cells: Vec<[usize; 3]>,
    pub mesh_coords: Vec<[f64; 2]>,
    pub object_id: Vec<u32>,
    pub kinds: Vec<NodeKind>,
    pub density: Vec<f64>,
    pub youngs_modulus: Vec<f64>,
}

impl MeshTopology {
    pub fn num_nodes(&self) -> usize {
        self.mesh_coords.len()
    }

    /// Checks index ranges, per-node array lengths, cell areas, and that
    /// `object_id` is constant on each connected component of the cell graph.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.object_id.len() != n
            || self.kinds.len() != n
            || self.density.len() != n
            || self.youngs_modulus.len() != n
        {
            return Err(Error::Topology(format!(
                "per-node array lengths disagree with {n} nodes"
            )));
        }
        for (c, cell) in self.cells.iter().enumerate() {
            for &v in cell {
                if v >= n {
                    return Err(Error::Topology(format!(
                        "cell {c} references node {v} but mesh has {n} nodes"
                    )));
                }
            }
            if signed_area(
                self.mesh_coords[cell[0]],
                self.mesh_coords[cell[1]],
                self.mesh_coords[cell[2]],
            )
            .abs()
                <= 0.0
            {
                return Err(Error::Topology(format!("cell {c} {:?} is degenerate", cell)));
            }
        }
        // Object labels must be constant within each connected component.
        for cell in &self.cells {
            let id = self.object_id[cell[0]];
            if self.object_id[cell[1]] != id || self.object_id[cell[2]] != id {
                return Err(Error::Topology(format!(
                    "cell {:?} spans distinct object ids",
                    cell
                )));
            }
        }
        Ok(())
    }
}

/// Per-step dynamic data for one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub world_coords: Vec<[f64; 2]>,
    pub prev_world_coords: Vec<[f64; 2]>,
    pub stress: Vec<f64>,
}

impl SystemState {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.world_coords.len() != num_nodes
            || self.prev_world_coords.len() != num_nodes
            || self.stress.len() != num_nodes
        {
            return Err(Error::Topology(format!(
                "state arrays disagree with {num_nodes} nodes"
            )));
        }
        let finite = self
            .world_coords
            .iter()
            .chain(self.prev_world_coords.iter())
            .all(|p| p[0].is_finite() && p[1].is_finite())
            && self.stress.iter().all(|s| s.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite entry in system state".into()));
        }
        Ok(())
    }

    /// Per-step velocity `x^t − x^{t−1}` (displacement per recorded step).
    pub fn velocity(&self, node: usize) -> [f64; 2] {
        [
            self.world_coords[node][0] - self.prev_world_coords[node][0],
            self.world_coords[node][1] - self.prev_world_coords[node][1],
        ]
    }
}

/// A recorded sequence of `κ+1` states over a fixed topology.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub topology: MeshTopology,
    pub states: Vec<SystemState>,
    pub dt: f64,
}

impl Trajectory {
    /// Number of transitions (κ): one less than the number of states.
    pub fn num_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let n = self.topology.num_nodes();
        for state in &self.states {
            state.validate(n)?;
        }
        for t in 1..self.states.len() {
            if self.states[t].prev_world_coords != self.states[t - 1].world_coords {
                return Err(Error::Topology(format!(
                    "state {t} prev positions do not chain to state {} positions",
                    t - 1
                )));
            }
        }
        Ok(())
    }
}

/// Level-0 input graph for the model: raw features plus directed edge lists.
///
/// Both edge lists are bidirectional (`(i,j)` present iff `(j,i)` present),
/// lexicographically sorted, and mutually disjoint.
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub node_features: Vec<[f64; NODE_FEATURE_DIM]>,
    pub mesh_edges: Vec<(usize, usize)>,
    pub mesh_edge_features: Vec<[f64; MESH_EDGE_FEATURE_DIM]>,
    pub contact_edges: Vec<(usize, usize)>,
    pub contact_edge_features: Vec<[f64; CONTACT_EDGE_FEATURE_DIM]>,
}

impl GraphSample {
    pub fn num_nodes(&self) -> usize {
        self.node_features.len()
    }
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Expands triangle cells into the deduplicated, lexicographically sorted list
/// of directed mesh edges: `{(i,j),(j,i)}` for every undirected cell edge.
pub fn build_graph(topology: &MeshTopology) -> Result<Vec<(usize, usize)>> {
    let n = topology.num_nodes();
    let mut edges = Vec::with_capacity(topology.cells.len() * 6);
    for (c, cell) in topology.cells.iter().enumerate() {
        for &v in cell {
            if v >= n {
                return Err(Error::Topology(format!(
                    "cell {c} references node {v} but mesh has {n} nodes"
                )));
            }
        }
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            edges.push((cell[a], cell[b]));
            edges.push((cell[b], cell[a]));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Directed edges grouped by receiver (first component) into contiguous runs.
/// Requires the edge list sorted lexicographically, as produced by
/// [`build_graph`] and [`build_contact_edges`].
pub fn receiver_offsets(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut offsets = vec![0usize; num_nodes + 1];
    for &(i, _) in edges {
        offsets[i + 1] += 1;
    }
    for i in 0..num_nodes {
        offsets[i + 1] += offsets[i];
    }
    offsets
}

fn hash_cell(p: [f64; 2], inv_radius: f64) -> (i64, i64) {
    ((p[0] * inv_radius).floor() as i64, (p[1] * inv_radius).floor() as i64)
}

/// All directed pairs `(i,q)`, `i ≠ q`, with `|x_i − x_q| < radius` in world
/// space, excluding pairs already connected by a mesh edge. Uses a uniform
/// spatial hash with cell size `radius`, scanning the 3×3 neighborhood, so the
/// result matches a brute-force all-pairs scan. Output is sorted.
pub fn build_contact_edges(
    topology: &MeshTopology,
    state: &SystemState,
    radius: f64,
    mesh_edges: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("contact radius must be > 0, got {radius}")));
    }
    let n = topology.num_nodes();
    state.validate(n)?;
    let mesh_set: HashSet<(usize, usize)> = mesh_edges.iter().copied().collect();

    let inv = 1.0 / radius;
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in state.world_coords.iter().enumerate() {
        grid.entry(hash_cell(p, inv)).or_default().push(i);
    }

    let mut out = Vec::new();
    for (i, &p) in state.world_coords.iter().enumerate() {
        let (cx, cy) = hash_cell(p, inv);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &q in bucket {
                    if q == i {
                        continue;
                    }
                    let d = norm(sub(p, state.world_coords[q]));
                    if d < radius && !mesh_set.contains(&(i, q)) {
                        out.push((i, q));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Node features `one_hot(kind) ‖ velocity ‖ ρ ‖ Y`.
pub fn compute_node_features(
    topology: &MeshTopology,
    state: &SystemState,
) -> Vec<[f64; NODE_FEATURE_DIM]> {
    (0..topology.num_nodes())
        .map(|i| {
            let k = topology.kinds[i].one_hot();
            let v = state.velocity(i);
            [k[0], k[1], k[2], v[0], v[1], topology.density[i], topology.youngs_modulus[i]]
        })
        .collect()
}

pub fn mesh_edge_feature(
    topology: &MeshTopology,
    state: &SystemState,
    i: usize,
    j: usize,
) -> [f64; MESH_EDGE_FEATURE_DIM] {
    let du = sub(topology.mesh_coords[i], topology.mesh_coords[j]);
    let dx = sub(state.world_coords[i], state.world_coords[j]);
    [du[0], du[1], norm(du), dx[0], dx[1], norm(dx)]
}

pub fn contact_edge_feature(
    state: &SystemState,
    i: usize,
    q: usize,
) -> [f64; CONTACT_EDGE_FEATURE_DIM] {
    let dx = sub(state.world_coords[i], state.world_coords[q]);
    [dx[0], dx[1], norm(dx)]
}

/// Raw feature arrays for both edge families.
#[allow(clippy::type_complexity)]
pub fn compute_edge_features(
    topology: &MeshTopology,
    state: &SystemState,
    mesh_edges: &[(usize, usize)],
    contact_edges: &[(usize, usize)],
) -> (Vec<[f64; MESH_EDGE_FEATURE_DIM]>, Vec<[f64; CONTACT_EDGE_FEATURE_DIM]>) {
    let mesh = mesh_edges
        .iter()
        .map(|&(i, j)| mesh_edge_feature(topology, state, i, j))
        .collect();
    let contact = contact_edges
        .iter()
        .map(|&(i, q)| contact_edge_feature(state, i, q))
        .collect();
    (mesh, contact)
}

/// Builds the complete level-0 graph for one state.
pub fn build_sample(
    topology: &MeshTopology,
    state: &SystemState,
    contact_radius: f64,
) -> Result<GraphSample> {
    let mesh_edges = build_graph(topology)?;
    let contact_edges = build_contact_edges(topology, state, contact_radius, &mesh_edges)?;
    let (mesh_edge_features, contact_edge_features) =
        compute_edge_features(topology, state, &mesh_edges, &contact_edges);
    Ok(GraphSample {
        node_features: compute_node_features(topology, state),
        mesh_edges,
        mesh_edge_features,
        contact_edges,
        contact_edge_features,
    })
}

/// Noised input positions for every step of a trajectory.
///
/// `prev0` is the noised version of `states[0].prev_world_coords`; the input
/// for step `t ≥ 1` pairs `positions[t]` with `positions[t−1]`.
#[derive(Debug, Clone)]
pub struct NoisedInputs {
    pub prev0: Vec<[f64; 2]>,
    pub positions: Vec<Vec<[f64; 2]>>,
}

impl NoisedInputs {
    /// Input state for step `t`: noised current and previous positions, clean
    /// stress. The training target for this input is the clean state `t+1`.
    pub fn input_state(&self, trajectory: &Trajectory, t: usize) -> SystemState {
        SystemState {
            world_coords: self.positions[t].clone(),
            prev_world_coords: if t == 0 {
                self.prev0.clone()
            } else {
                self.positions[t - 1].clone()
            },
            stress: trajectory.states[t].stress.clone(),
        }
    }
}

/// Accumulates zero-mean Gaussian random-walk noise along the trajectory's
/// input positions. Targets stay clean: the training target velocity is
/// computed from the noised step-`t` positions to the clean step-`t+1`
/// positions, so the model learns to correct its own drift. `PlateFixed`
/// nodes receive exactly zero noise.
pub fn add_randomwalk_noise(
    trajectory: &Trajectory,
    std: f64,
    rng: &mut impl Rng,
) -> Result<NoisedInputs> {
    if std < 0.0 {
        return Err(Error::Config(format!("noise std must be ≥ 0, got {std}")));
    }
    let n = trajectory.topology.num_nodes();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut walk = vec![[0.0f64; 2]; n];
    let mut advance = |walk: &mut Vec<[f64; 2]>| {
        for (i, w) in walk.iter_mut().enumerate() {
            if trajectory.topology.kinds[i].is_fixed() || std == 0.0 {
                continue;
            }
            w[0] += std * normal.sample(rng);
            w[1] += std * normal.sample(rng);
        }
    };

    advance(&mut walk);
    let prev0 = trajectory.states[0]
        .prev_world_coords
        .iter()
        .zip(&walk)
        .map(|(p, w)| [p[0] + w[0], p[1] + w[1]])
        .collect();

    let mut positions = Vec::with_capacity(trajectory.states.len());
    for state in &trajectory.states {
        advance(&mut walk);
        positions.push(
            state
                .world_coords
                .iter()
                .zip(&walk)
                .map(|(p, w)| [p[0] + w[0], p[1] + w[1]])
                .collect(),
        );
    }
    Ok(NoisedInputs { prev0, positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_node_topology(coords: [[f64; 2]; 2], objects: [u32; 2]) -> (MeshTopology, SystemState) {
        let topo = MeshTopology {
            cells: vec![],
            mesh_coords: coords.to_vec(),
            object_id: objects.to_vec(),
            kinds: vec![NodeKind::PlateFree; 2],
            density: vec![1.0; 2],
            youngs_modulus: vec![1.0; 2],
        };
        let state = SystemState {
            world_coords: coords.to_vec(),
            prev_world_coords: coords.to_vec(),
            stress: vec![0.0; 2],
        };
        (topo, state)
    }

    fn grid_topology(cols: usize, rows: usize) -> MeshTopology {
        let mut coords = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                coords.push([c as f64, r as f64]);
            }
        }
        let idx = |c: usize, r: usize| r * cols + c;
        let mut cells = Vec::new();
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                cells.push([idx(c, r), idx(c + 1, r), idx(c, r + 1)]);
                cells.push([idx(c + 1, r), idx(c + 1, r + 1), idx(c, r + 1)]);
            }
        }
        let n = coords.len();
        MeshTopology {
            cells,
            mesh_coords: coords,
            object_id: vec![0; n],
            kinds: vec![NodeKind::PlateFree; n],
            density: vec![1.0; n],
            youngs_modulus: vec![1.0; n],
        }
    }

    #[test]
    fn single_triangle_expands_to_six_directed_edges() {
        let mut topo = grid_topology(2, 2);
        topo.cells = vec![[0, 1, 2]];
        let edges = build_graph(&topo).unwrap();
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn shared_edge_is_deduplicated() {
        let mut topo = grid_topology(2, 2);
        topo.cells = vec![[0, 1, 2], [1, 2, 3]];
        let edges = build_graph(&topo).unwrap();
        assert_eq!(edges.len(), 10);
        let expected: Vec<(usize, usize)> = vec![
            (0, 1),
            (0, 2),
            (1, 0),
            (1, 2),
            (1, 3),
            (2, 0),
            (2, 1),
            (2, 3),
            (3, 1),
            (3, 2),
        ];
        assert_eq!(edges, expected);
    }

    #[test]
    fn empty_cells_yield_empty_edges() {
        let mut topo = grid_topology(2, 2);
        topo.cells = vec![];
        assert!(build_graph(&topo).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_cell_is_topology_error() {
        let mut topo = grid_topology(2, 2);
        topo.cells = vec![[0, 1, 9]];
        assert!(matches!(build_graph(&topo), Err(Error::Topology(_))));
    }

    #[test]
    fn contact_within_radius_is_bidirectional() {
        let (topo, state) = two_node_topology([[0.0, 0.0], [0.3, 0.0]], [0, 1]);
        let edges = build_contact_edges(&topo, &state, 0.4, &[]).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn contact_beyond_radius_is_empty() {
        let (topo, state) = two_node_topology([[0.0, 0.0], [0.5, 0.0]], [0, 1]);
        assert!(build_contact_edges(&topo, &state, 0.4, &[]).unwrap().is_empty());
    }

    #[test]
    fn contact_at_exact_radius_is_excluded() {
        let (topo, state) = two_node_topology([[0.0, 0.0], [0.4, 0.0]], [0, 1]);
        assert!(build_contact_edges(&topo, &state, 0.4, &[]).unwrap().is_empty());
    }

    #[test]
    fn mesh_edges_never_become_contact_edges() {
        let (topo, state) = two_node_topology([[0.0, 0.0], [0.3, 0.0]], [0, 0]);
        let mesh_edges = vec![(0, 1), (1, 0)];
        assert!(build_contact_edges(&topo, &state, 0.4, &mesh_edges).unwrap().is_empty());
    }

    #[test]
    fn nonpositive_radius_is_config_error() {
        let (topo, state) = two_node_topology([[0.0, 0.0], [0.3, 0.0]], [0, 1]);
        assert!(matches!(
            build_contact_edges(&topo, &state, 0.0, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coincident_nodes_have_zero_mesh_feature() {
        let (topo, state) = two_node_topology([[1.0, 2.0], [1.0, 2.0]], [0, 0]);
        assert_eq!(mesh_edge_feature(&topo, &state, 0, 1), [0.0; 6]);
    }

    #[test]
    fn contact_feature_is_offset_and_norm() {
        let (topo, mut state) = two_node_topology([[0.0, 0.0], [0.0, 0.0]], [0, 1]);
        let _ = topo;
        state.world_coords = vec![[3.0, 4.0], [0.0, 0.0]];
        assert_eq!(contact_edge_feature(&state, 0, 1), [3.0, 4.0, 5.0]);
    }

    #[test]
    fn swapping_endpoints_negates_offsets_keeps_norms() {
        let topo = grid_topology(3, 2);
        let state = SystemState {
            world_coords: topo.mesh_coords.iter().map(|p| [p[0] * 1.1, p[1] - 0.2]).collect(),
            prev_world_coords: topo.mesh_coords.clone(),
            stress: vec![0.0; topo.num_nodes()],
        };
        let f = mesh_edge_feature(&topo, &state, 0, 4);
        let g = mesh_edge_feature(&topo, &state, 4, 0);
        assert_eq!([f[0], f[1], f[3], f[4]], [-g[0], -g[1], -g[3], -g[4]]);
        assert_eq!([f[2], f[5]], [g[2], g[5]]);
    }

    #[test]
    fn node_feature_layout() {
        let topo = grid_topology(2, 2);
        let mut state = SystemState {
            world_coords: topo.mesh_coords.clone(),
            prev_world_coords: topo.mesh_coords.clone(),
            stress: vec![0.0; 4],
        };
        state.world_coords[1] = [1.5, 0.25];
        let f = compute_node_features(&topo, &state);
        assert_eq!(f[1], [1.0, 0.0, 0.0, 0.5, 0.25, 1.0, 1.0]);
        assert_eq!(f.len(), topo.num_nodes());
        assert_eq!(f[0].len(), NODE_FEATURE_DIM);
    }

    fn tiny_trajectory() -> Trajectory {
        let mut topo = grid_topology(3, 2);
        topo.kinds[0] = NodeKind::PlateFixed;
        let make = |shift: f64, prev: f64| SystemState {
            world_coords: topo.mesh_coords.iter().map(|p| [p[0] + shift, p[1]]).collect(),
            prev_world_coords: topo.mesh_coords.iter().map(|p| [p[0] + prev, p[1]]).collect(),
            stress: vec![0.0; 6],
        };
        Trajectory {
            states: vec![make(0.0, 0.0), make(0.1, 0.0), make(0.2, 0.1)],
            topology: topo,
            dt: 0.01,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let traj = tiny_trajectory();
        let mut rng = crate::rng_from_seed(7);
        let noised = add_randomwalk_noise(&traj, 0.0, &mut rng).unwrap();
        for (t, state) in traj.states.iter().enumerate() {
            assert_eq!(noised.positions[t], state.world_coords);
        }
        assert_eq!(noised.prev0, traj.states[0].prev_world_coords);
    }

    #[test]
    fn fixed_nodes_receive_no_noise() {
        let traj = tiny_trajectory();
        let mut rng = crate::rng_from_seed(7);
        let noised = add_randomwalk_noise(&traj, 0.01, &mut rng).unwrap();
        for (t, state) in traj.states.iter().enumerate() {
            assert_eq!(noised.positions[t][0], state.world_coords[0]);
            assert_ne!(noised.positions[t][1], state.world_coords[1]);
        }
    }

    #[test]
    fn negative_noise_std_is_config_error() {
        let traj = tiny_trajectory();
        let mut rng = crate::rng_from_seed(7);
        assert!(matches!(
            add_randomwalk_noise(&traj, -0.1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trajectory_chain_invariant_is_checked() {
        let mut traj = tiny_trajectory();
        traj.states[2].prev_world_coords[3][0] += 1.0;
        assert!(traj.validate().is_err());
    }

    fn brute_force_contacts(
        state: &SystemState,
        radius: f64,
        mesh_edges: &[(usize, usize)],
    ) -> Vec<(usize, usize)> {
        let set: HashSet<_> = mesh_edges.iter().copied().collect();
        let n = state.world_coords.len();
        let mut out = Vec::new();
        for i in 0..n {
            for q in 0..n {
                if i == q || set.contains(&(i, q)) {
                    continue;
                }
                if norm(sub(state.world_coords[i], state.world_coords[q])) < radius {
                    out.push((i, q));
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn spatial_hash_matches_brute_force(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..200),
            radius in 0.05f64..2.0,
        ) {
            let n = pts.len();
            let coords: Vec<[f64;2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let topo = MeshTopology {
                cells: vec![],
                mesh_coords: coords.clone(),
                object_id: (0..n as u32).collect(),
                kinds: vec![NodeKind::PlateFree; n],
                density: vec![1.0; n],
                youngs_modulus: vec![1.0; n],
            };
            let state = SystemState {
                world_coords: coords,
                prev_world_coords: topo.mesh_coords.clone(),
                stress: vec![0.0; n],
            };
            let got = build_contact_edges(&topo, &state, radius, &[]).unwrap();
            let want = brute_force_contacts(&state, radius, &[]);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn sample_invariants_on_random_grids(cols in 2usize..7, rows in 2usize..5, scale in 0.2f64..3.0) {
            let mut topo = grid_topology(cols, rows);
            for p in &mut topo.mesh_coords {
                p[0] *= scale;
                p[1] *= scale;
            }
            let state = SystemState {
                world_coords: topo.mesh_coords.clone(),
                prev_world_coords: topo.mesh_coords.clone(),
                stress: vec![0.0; topo.num_nodes()],
            };
            let sample = build_sample(&topo, &state, 1.7 * scale).unwrap();

            let mesh: HashSet<_> = sample.mesh_edges.iter().copied().collect();
            let contact: HashSet<_> = sample.contact_edges.iter().copied().collect();
            for &(i, j) in &sample.mesh_edges {
                prop_assert!(mesh.contains(&(j, i)));
            }
            for &(i, q) in &sample.contact_edges {
                prop_assert!(contact.contains(&(q, i)));
                prop_assert!(!mesh.contains(&(i, q)));
            }
            for (f, &(i, j)) in sample.mesh_edge_features.iter().zip(&sample.mesh_edges) {
                let d = norm(sub(state.world_coords[i], state.world_coords[j]));
                prop_assert!((f[5] - d).abs() <= 1e-6 * d.max(1.0));
            }
        }
    }

    #[test]
    fn brute_force_agreement_at_scale_500() {
        let mut rng = crate::rng_from_seed(11);
        let n = 500;
        let coords: Vec<[f64; 2]> =
            (0..n).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]).collect();
        let topo = MeshTopology {
            cells: vec![],
            mesh_coords: coords.clone(),
            object_id: (0..n as u32).collect(),
            kinds: vec![NodeKind::PlateFree; n],
            density: vec![1.0; n],
            youngs_modulus: vec![1.0; n],
        };
        let state = SystemState {
            world_coords: coords,
            prev_world_coords: topo.mesh_coords.clone(),
            stress: vec![0.0; n],
        };
        let got = build_contact_edges(&topo, &state, 0.45, &[]).unwrap();
        let want = brute_force_contacts(&state, 0.45, &[]);
        assert_eq!(got, want);
        assert!(!got.is_empty());
    }
}
