//! Contact layer: a stack of dual-branch attention blocks mixing mesh-edge
//! and contact-edge messages at level 0. With the single-branch ablation the
//! blocks drop the contact branch entirely and the output projection maps
//! `d → d` instead of `2d → d`.

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;

use crate::attention::{AttnBlock, BlockCtx, EdgeTopology};
use crate::nn::{join, ParamSet, Tensor};

#[derive(Debug, Clone)]
pub struct CmtLayer {
    pub blocks: Vec<AttnBlock>,
}

#[derive(Debug)]
pub struct CmtCtx {
    pub blocks: Vec<BlockCtx>,
}

impl CmtLayer {
    pub fn new(
        num_blocks: usize,
        dim: usize,
        heads: usize,
        clip_range: (f64, f64),
        single_branch: bool,
        share_branch_params: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..num_blocks)
            .map(|_| {
                AttnBlock::new(dim, heads, clip_range, !single_branch, share_branch_params, rng)
            })
            .collect();
        CmtLayer { blocks }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Sequential block application; zero blocks pass the hiddens through.
    pub fn forward(
        &self,
        z: Array2<f64>,
        mesh: &EdgeTopology,
        e_hidden: &Array2<f64>,
        contact: &EdgeTopology,
        s_hidden: &Array2<f64>,
    ) -> (Array2<f64>, CmtCtx) {
        let mut cur = z;
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let contact_inputs = block.is_dual().then_some((contact, s_hidden));
            let (next, ctx) = block.forward(&cur, mesh, e_hidden, contact_inputs);
            ctxs.push(ctx);
            cur = next;
        }
        (cur, CmtCtx { blocks: ctxs })
    }

    /// Accumulates encoded-edge gradients into `de`/`ds` and returns the
    /// gradient w.r.t. the layer input.
    pub fn backward(
        &mut self,
        ctx: &CmtCtx,
        mesh: &EdgeTopology,
        contact: &EdgeTopology,
        dz_out: Array2<f64>,
        de: &mut ArrayViewMut2<f64>,
        ds: &mut ArrayViewMut2<f64>,
    ) -> Array2<f64> {
        let mut grad = dz_out;
        for (block, bctx) in self.blocks.iter_mut().zip(&ctx.blocks).rev() {
            let dual = block.is_dual();
            grad = block.backward(
                bctx,
                mesh,
                dual.then_some(contact),
                &grad,
                de,
                dual.then_some(ds),
            );
        }
        grad
    }
}

impl ParamSet for CmtLayer {
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
