//! Learned simulator for 2D flexible-body collision dynamics.
//!
//! The crate is organized around an encoder / contact-attention /
//! hierarchical-attention / decoder model over triangle meshes:
//!
//! - [`mesh`]: mesh and state containers, graph construction, node/edge
//!   features, contact search, training noise.
//! - [`delaunay`]: robust 2D Delaunay triangulation and mesh quality metrics.
//! - [`hierarchy`]: BFS node pooling and per-level remeshed graphs.
//! - [`nn`]: the differentiable kernel (linear maps, MLPs, layer norm,
//!   normalizers, Adam) that everything above the mesh layer is built on.
//! - [`cmt`] / [`hmt`]: the dual-branch contact blocks and the V-cycle
//!   hierarchical blocks.
//! - [`model`]: the end-to-end simulator, training loop, rollout and metrics.
//! - [`datagen`]: a mass-spring impact scene generator that doubles as the
//!   physical oracle for the learned model.
//! - [`dataset`]: on-disk trajectory format (`meta.json` + `traj_<k>.bin`).

pub mod attention;
pub mod cmt;
pub mod datagen;
pub mod dataset;
pub mod delaunay;
pub mod hierarchy;
pub mod hmt;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod plot;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: usage/config problems exit 2,
    /// runtime failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Seeded RNG used everywhere randomness is needed. All entropy is explicit;
/// there is no global RNG state in the crate.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent RNG stream for a sub-task (e.g. one trajectory).
pub fn rng_stream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16] = 0x9e;
    key[17] = 0x37;
    rand_chacha::ChaCha8Rng::from_seed(key)
}
