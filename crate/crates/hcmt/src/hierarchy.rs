//! Graph coarsening: BFS bi-stride node selection, per-object Delaunay
//! remeshing, and the level-graph container used by the hierarchical
//! attention blocks.
//!
//! The hierarchy topology is built once per trajectory from mesh-space
//! coordinates (which never change), while per-level raw edge features are
//! recomputed from the current world positions via
//! [`Hierarchy::refresh_edge_features`].

use crate::delaunay::{delaunay_remesh, mesh_quality, MeshQuality};
use crate::mesh::{mesh_edge_feature, GraphSample, MeshTopology, SystemState};
use crate::{Error, Result};

/// One pooled level. `node_ids` indexes into level-0 nodes and is sorted
/// ascending; `mesh_edges`, `cells`, and `parent_map` use level-local indices.
#[derive(Debug, Clone)]
pub struct LevelGraph {
    pub level: usize,
    pub node_ids: Vec<usize>,
    pub mesh_edges: Vec<(usize, usize)>,
    pub cells: Vec<[usize; 3]>,
    pub parent_map: Vec<usize>,
    pub raw_edge_features: Vec<[f64; 6]>,
}

impl LevelGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<LevelGraph>,
}

impl Hierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Recomputes every level's raw mesh-edge features from the current
    /// state. The hierarchy structure itself is static per topology.
    pub fn refresh_edge_features(&mut self, topology: &MeshTopology, state: &SystemState) {
        for level in &mut self.levels {
            level.raw_edge_features = level
                .mesh_edges
                .iter()
                .map(|&(i, j)| {
                    mesh_edge_feature(topology, state, level.node_ids[i], level.node_ids[j])
                })
                .collect();
        }
    }

    /// Per-level mesh quality, for reporting.
    pub fn quality(&self, topology: &MeshTopology) -> Vec<MeshQuality> {
        self.levels
            .iter()
            .map(|lv| {
                let coords: Vec<[f64; 2]> =
                    lv.node_ids.iter().map(|&g| topology.mesh_coords[g]).collect();
                mesh_quality(&lv.cells, &coords)
            })
            .collect()
    }
}

/// Bi-stride node selection: per object, BFS from the lowest-index node,
/// keeping nodes at even depth; disconnected leftovers restart BFS at their
/// lowest-index node. An object with ≤ 3 nodes is kept whole, and selection
/// is topped up to 3 nodes per object so a triangle always exists.
///
/// `edges` must be sorted; returned local indices are sorted ascending.
pub fn bfs_pool(num_nodes: usize, edges: &[(usize, usize)], object_of: &[u32]) -> Vec<usize> {
    let offsets = crate::mesh::receiver_offsets(num_nodes, edges);
    let mut depth = vec![usize::MAX; num_nodes];
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..num_nodes {
        if depth[seed] != usize::MAX {
            continue;
        }
        depth[seed] = 0;
        queue.push_back(seed);
        while let Some(u) = queue.pop_front() {
            for &(_, v) in &edges[offsets[u]..offsets[u + 1]] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }

    let mut selected = vec![false; num_nodes];
    for i in 0..num_nodes {
        selected[i] = depth[i] % 2 == 0;
    }

    // Per-object floor: keep tiny objects whole, and never drop an object
    // below min(3, |V|).
    let mut object_sizes: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
    for i in 0..num_nodes {
        let e = object_sizes.entry(object_of[i]).or_insert((0, 0));
        e.0 += 1;
        if selected[i] {
            e.1 += 1;
        }
    }
    for (&obj, &(size, kept)) in &object_sizes {
        if size <= 3 {
            for i in 0..num_nodes {
                if object_of[i] == obj {
                    selected[i] = true;
                }
            }
        } else if kept < 3 {
            let mut need = 3 - kept;
            for i in 0..num_nodes {
                if need == 0 {
                    break;
                }
                if object_of[i] == obj && !selected[i] {
                    selected[i] = true;
                    need -= 1;
                }
            }
        }
    }
    (0..num_nodes).filter(|&i| selected[i]).collect()
}

/// Edges for one object's selected points: Delaunay triangles when possible,
/// otherwise a lexicographic path (collinear fallback) or a single edge.
fn remesh_object(points: &[[f64; 2]], locals: &[usize]) -> Result<(Vec<(usize, usize)>, Vec<[usize; 3]>)> {
    let mut edges = Vec::new();
    let mut cells = Vec::new();
    match points.len() {
        0 | 1 => {}
        2 => {
            edges.push((locals[0], locals[1]));
            edges.push((locals[1], locals[0]));
        }
        _ => match delaunay_remesh(points) {
            Ok(tris) => {
                for t in tris {
                    let m = [locals[t[0]], locals[t[1]], locals[t[2]]];
                    cells.push(m);
                    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                        edges.push((m[a], m[b]));
                        edges.push((m[b], m[a]));
                    }
                }
            }
            Err(Error::Degenerate(_)) => {
                let mut order: Vec<usize> = (0..points.len()).collect();
                order.sort_by(|&p, &q| points[p].partial_cmp(&points[q]).expect("finite"));
                for w in order.windows(2) {
                    edges.push((locals[w[0]], locals[w[1]]));
                    edges.push((locals[w[1]], locals[w[0]]));
                }
            }
            Err(e) => return Err(e),
        },
    }
    Ok((edges, cells))
}

/// Builds λ pooled levels above the level-0 graph, remeshing each object's
/// selected nodes in mesh space and recomputing raw edge features from the
/// given state.
pub fn build_hierarchy(
    sample: &GraphSample,
    topology: &MeshTopology,
    state: &SystemState,
    lambda: usize,
) -> Result<Hierarchy> {
    let n = topology.num_nodes();
    if sample.num_nodes() != n {
        return Err(Error::Topology(format!(
            "sample has {} nodes, topology has {n}",
            sample.num_nodes()
        )));
    }
    let mut levels = vec![LevelGraph {
        level: 0,
        node_ids: (0..n).collect(),
        mesh_edges: sample.mesh_edges.clone(),
        cells: topology.cells.clone(),
        parent_map: (0..n).collect(),
        raw_edge_features: sample.mesh_edge_features.clone(),
    }];

    for level in 1..=lambda {
        let prev = levels.last().unwrap();
        let object_of: Vec<u32> =
            prev.node_ids.iter().map(|&g| topology.object_id[g]).collect();
        let selected = bfs_pool(prev.num_nodes(), &prev.mesh_edges, &object_of);
        let node_ids: Vec<usize> = selected.iter().map(|&l| prev.node_ids[l]).collect();
        let parent_map = selected;

        // Remesh each object independently; pooled levels never gain
        // cross-object edges.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut cells: Vec<[usize; 3]> = Vec::new();
        let mut objects: Vec<u32> = node_ids.iter().map(|&g| topology.object_id[g]).collect();
        objects.sort_unstable();
        objects.dedup();
        for obj in objects {
            let locals: Vec<usize> = (0..node_ids.len())
                .filter(|&l| topology.object_id[node_ids[l]] == obj)
                .collect();
            let points: Vec<[f64; 2]> =
                locals.iter().map(|&l| topology.mesh_coords[node_ids[l]]).collect();
            let (e, c) = remesh_object(&points, &locals)?;
            edges.extend(e);
            cells.extend(c);
        }
        edges.sort_unstable();
        edges.dedup();

        let raw_edge_features = edges
            .iter()
            .map(|&(i, j)| mesh_edge_feature(topology, state, node_ids[i], node_ids[j]))
            .collect();
        levels.push(LevelGraph {
            level,
            node_ids,
            mesh_edges: edges,
            cells,
            parent_map,
            raw_edge_features,
        });
    }
    Ok(Hierarchy { levels })
}
