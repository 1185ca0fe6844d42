//! Hierarchical layer: mesh-only attention blocks scheduled over a
//! descend / bottom / ascend V-cycle across the pooled levels.
//!
//! State pooling restricts node hiddens to the surviving subset (no
//! aggregation); unpooling adds the coarse result back onto the saved fine
//! states (additive skip), leaving dropped nodes with their saved values.
//! Contact edges never participate. A block at level `v` reads the level-`v`
//! encoded edge features; the ascending half therefore reuses the descending
//! levels' features in mirrored order.

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;

use crate::attention::{AttnBlock, BlockCtx, EdgeTopology};
use crate::nn::{join, ParamSet, Tensor};
use crate::{Error, Result};

/// Per-block level assignment: `[1..λ] + [λ]*(L_H − 2λ) + [λ−1..0]`.
/// Requires `L_H ≥ 2λ + 1` so the cycle can reach the bottom and return.
pub fn make_schedule(l_h: usize, lambda: usize) -> Result<Vec<usize>> {
    if l_h < 2 * lambda + 1 {
        return Err(Error::Config(format!(
            "block count {l_h} violates the V-cycle constraint L_H ≥ 2λ+1 = {}",
            2 * lambda + 1
        )));
    }
    let mut levels = Vec::with_capacity(l_h);
    levels.extend(1..=lambda);
    levels.extend(std::iter::repeat(lambda).take(l_h - 2 * lambda));
    levels.extend((0..lambda).rev());
    debug_assert_eq!(levels.len(), l_h);
    Ok(levels)
}

/// Restriction of fine node states to the next level's surviving subset.
pub fn pool_states(fine: &Array2<f64>, parent_map: &[usize]) -> Array2<f64> {
    let mut coarse = Array2::zeros((parent_map.len(), fine.ncols()));
    for (r, &p) in parent_map.iter().enumerate() {
        coarse.row_mut(r).assign(&fine.row(p));
    }
    coarse
}

/// Additive-skip prolongation: surviving nodes get `coarse + saved`, dropped
/// nodes keep their saved fine state.
pub fn unpool_states(
    coarse: &Array2<f64>,
    saved_fine: &Array2<f64>,
    parent_map: &[usize],
) -> Array2<f64> {
    let mut fine = saved_fine.clone();
    for (r, &p) in parent_map.iter().enumerate() {
        let mut row = fine.row_mut(p);
        row += &coarse.row(r);
    }
    fine
}

#[derive(Debug, Clone)]
pub struct HmtLayer {
    pub blocks: Vec<AttnBlock>,
    pub schedule: Vec<usize>,
}

#[derive(Debug)]
enum Step {
    /// Transition from `level` to `level+1`; the fine state was saved.
    Pool { level: usize },
    /// Transition from `level+1` back to `level`.
    Unpool { level: usize },
    Block { index: usize, level: usize, ctx: BlockCtx },
}

#[derive(Debug)]
pub struct HmtCtx {
    steps: Vec<Step>,
}

impl HmtLayer {
    pub fn new(
        l_h: usize,
        lambda: usize,
        dim: usize,
        heads: usize,
        clip_range: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let schedule = make_schedule(l_h, lambda)?;
        let blocks =
            (0..l_h).map(|_| AttnBlock::new(dim, heads, clip_range, false, true, rng)).collect();
        Ok(HmtLayer { blocks, schedule })
    }

    fn check(&self, num_levels: usize) -> Result<()> {
        let max_level = self.schedule.iter().copied().max().unwrap_or(0);
        if max_level >= num_levels {
            return Err(Error::Config(format!(
                "schedule reaches level {max_level} but hierarchy has {num_levels} levels"
            )));
        }
        Ok(())
    }

    /// Walks the V-cycle. `parent_maps`, `mesh_topos`, and `e_hiddens` hold
    /// one entry per hierarchy level (`parent_maps[0]` is unused); edge
    /// hiddens come from the shared mesh-edge encoder.
    pub fn forward(
        &self,
        h0: Array2<f64>,
        parent_maps: &[Vec<usize>],
        mesh_topos: &[EdgeTopology],
        e_hiddens: &[Array2<f64>],
    ) -> Result<(Array2<f64>, HmtCtx)> {
        self.check(parent_maps.len().min(mesh_topos.len()).min(e_hiddens.len()))?;
        let mut steps = Vec::new();
        let mut saved: Vec<Array2<f64>> = Vec::new();
        let mut level = 0usize;
        let mut h = h0;
        for (index, &target) in self.schedule.iter().enumerate() {
            while level < target {
                let parent_map = &parent_maps[level + 1];
                let coarse = pool_states(&h, parent_map);
                saved.push(std::mem::replace(&mut h, coarse));
                steps.push(Step::Pool { level });
                level += 1;
            }
            while level > target {
                let parent_map = &parent_maps[level];
                let fine = saved.pop().expect("saved state for unpool");
                h = unpool_states(&h, &fine, parent_map);
                steps.push(Step::Unpool { level: level - 1 });
                level -= 1;
            }
            let (next, ctx) =
                self.blocks[index].forward(&h, &mesh_topos[level], &e_hiddens[level], None);
            steps.push(Step::Block { index, level, ctx });
            h = next;
        }
        while level > 0 {
            let parent_map = &parent_maps[level];
            let fine = saved.pop().expect("saved state for unpool");
            h = unpool_states(&h, &fine, parent_map);
            steps.push(Step::Unpool { level: level - 1 });
            level -= 1;
        }
        Ok((h, HmtCtx { steps }))
    }

    /// Backward over the recorded walk, accumulating per-level encoded-edge
    /// gradients into `de_levels`.
    pub fn backward(
        &mut self,
        ctx: &HmtCtx,
        parent_maps: &[Vec<usize>],
        mesh_topos: &[EdgeTopology],
        dh_out: Array2<f64>,
        de_levels: &mut [ArrayViewMut2<f64>],
    ) -> Array2<f64> {
        let mut dh = dh_out;
        // Gradients of saved fine states, pushed by unpool reversal and
        // popped by the matching pool reversal.
        let mut dsaved: Vec<Array2<f64>> = Vec::new();
        for step in ctx.steps.iter().rev() {
            match step {
                Step::Block { index, level, ctx } => {
                    dh = self.blocks[*index].backward(
                        ctx,
                        &mesh_topos[*level],
                        None,
                        &dh,
                        &mut de_levels[*level],
                        None,
                    );
                }
                Step::Unpool { level } => {
                    // fine' = saved + scatter(coarse): the saved-state path
                    // gets all of dh, the coarse path its gathered rows.
                    let parent_map = &parent_maps[level + 1];
                    let mut dcoarse = Array2::zeros((parent_map.len(), dh.ncols()));
                    for (r, &p) in parent_map.iter().enumerate() {
                        dcoarse.row_mut(r).assign(&dh.row(p));
                    }
                    dsaved.push(std::mem::replace(&mut dh, dcoarse));
                }
                Step::Pool { level } => {
                    let parent_map = &parent_maps[level + 1];
                    let mut dfine =
                        dsaved.pop().expect("saved gradient for pool reversal");
                    for (r, &p) in parent_map.iter().enumerate() {
                        let mut row = dfine.row_mut(p);
                        row += &dh.row(r);
                    }
                    dh = dfine;
                }
            }
        }
        debug_assert!(dsaved.is_empty());
        dh
    }
}

impl ParamSet for HmtLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{k}")), f);
        }
    }
}
