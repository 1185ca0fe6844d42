//! Edge-aware multi-head vector attention shared by the contact blocks and
//! the hierarchical mesh blocks.
//!
//! For a directed edge `(i, j)` (receiver `i`, sender `j`), head `k`:
//! the clipped scaled dot product of the receiver query and sender key is
//! broadcast-added to the per-head edge-logit projection, softmax-normalized
//! over the receiver's neighbor set independently per dimension, multiplied
//! elementwise by the edge-gate projection, and used to weight the sender
//! value vectors. Head outputs are concatenated. The attention coefficients
//! are therefore `d_head`-dimensional vectors, not scalars.
//!
//! Edge hidden vectors are read, never written: blocks update only node
//! states, and gradients accumulate into the shared edge encodings.

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;

use crate::nn::{clip, join, LayerNorm, LayerNormCtx, Linear, ParamSet, Tensor};

/// Directed edges sorted lexicographically, with the contiguous run of each
/// receiver precomputed.
#[derive(Debug, Clone)]
pub struct EdgeTopology {
    pub edges: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
    pub num_nodes: usize,
}

impl EdgeTopology {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        debug_assert!(edges.windows(2).all(|w| w[0] <= w[1]), "edges must be sorted");
        let offsets = crate::mesh::receiver_offsets(num_nodes, &edges);
        EdgeTopology { edges, offsets, num_nodes }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Per-branch trainable maps. Heads are contiguous column blocks of each
/// projection output; `query/key/value` read node hiddens, `edge_logit` (the
/// additive term) and `edge_gate` (the multiplicative term) read edge hiddens.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub edge_logit: Linear,
    pub edge_gate: Linear,
}

impl AttnProjections {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        AttnProjections {
            query: Linear::new(dim, dim, false, rng),
            key: Linear::new(dim, dim, false, rng),
            value: Linear::new(dim, dim, false, rng),
            edge_logit: Linear::new(dim, dim, false, rng),
            edge_gate: Linear::new(dim, dim, false, rng),
        }
    }
}

impl ParamSet for AttnProjections {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.edge_logit.visit(&join(prefix, "edge_logit"), f);
        self.edge_gate.visit(&join(prefix, "edge_gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.edge_logit.visit_mut(&join(prefix, "edge_logit"), f);
        self.edge_gate.visit_mut(&join(prefix, "edge_gate"), f);
    }
}

/// Saved branch activations for the backward pass.
#[derive(Debug)]
pub struct BranchCtx {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    wp: Array2<f64>,
    clip_mask: Array2<f64>,
    /// Pre-modulation attention weights: softmax over each receiver's
    /// neighbor set, per dimension. Rows sum to one over each run.
    pub alpha: Array2<f64>,
    /// Branch message per node (head concatenation), before the output
    /// projection.
    pub messages: Array2<f64>,
}

pub fn branch_forward(
    proj: &AttnProjections,
    zn: &Array2<f64>,
    en: &Array2<f64>,
    topo: &EdgeTopology,
    heads: usize,
    clip_range: (f64, f64),
) -> BranchCtx {
    let n = zn.nrows();
    let d = zn.ncols();
    debug_assert_eq!(d % heads, 0);
    let d_head = d / heads;
    let ne = topo.num_edges();
    let scale = 1.0 / (d as f64).sqrt();

    let q = proj.query.forward(zn.view());
    let k = proj.key.forward(zn.view());
    let v = proj.value.forward(zn.view());
    let ep = proj.edge_logit.forward(en.view());
    let wp = proj.edge_gate.forward(en.view());

    // Per-edge clipped scaled dot products, one scalar per head.
    let mut dot = Array2::<f64>::zeros((ne, heads));
    let mut clip_mask = Array2::<f64>::zeros((ne, heads));
    for (e, &(i, j)) in topo.edges.iter().enumerate() {
        let qi = q.row(i);
        let kj = k.row(j);
        for h in 0..heads {
            let lo = h * d_head;
            let mut s = 0.0;
            for c in lo..lo + d_head {
                s += qi[c] * kj[c];
            }
            let (val, mask) = clip(s * scale, clip_range.0, clip_range.1);
            dot[[e, h]] = val;
            clip_mask[[e, h]] = mask;
        }
    }

    // Softmax over each receiver run, independently per dimension.
    let mut alpha = Array2::<f64>::zeros((ne, d));
    let mut messages = Array2::<f64>::zeros((n, d));
    let mut maxes = vec![0.0f64; d];
    let mut sums = vec![0.0f64; d];
    for i in 0..n {
        let (lo, hi) = (topo.offsets[i], topo.offsets[i + 1]);
        if lo == hi {
            continue;
        }
        maxes.fill(f64::NEG_INFINITY);
        for e in lo..hi {
            let epr = ep.row(e);
            for c in 0..d {
                let l = dot[[e, c / d_head]] + epr[c];
                if l > maxes[c] {
                    maxes[c] = l;
                }
            }
        }
        sums.fill(0.0);
        for e in lo..hi {
            let epr = ep.row(e);
            let mut ar = alpha.row_mut(e);
            for c in 0..d {
                let x = (dot[[e, c / d_head]] + epr[c] - maxes[c]).exp();
                ar[c] = x;
                sums[c] += x;
            }
        }
        let mut msg = messages.row_mut(i);
        for e in lo..hi {
            let j = topo.edges[e].1;
            let vr = v.row(j);
            let wr = wp.row(e);
            let mut ar = alpha.row_mut(e);
            for c in 0..d {
                ar[c] /= sums[c];
                msg[c] += ar[c] * wr[c] * vr[c];
            }
        }
    }

    BranchCtx { q, k, v, wp, clip_mask, alpha, messages }
}

/// Backward through one branch. Accumulates into `dzn` (gradient of the
/// layer-normed node hiddens) and `den` (gradient of the layer-normed edge
/// hiddens), and into the projection parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn branch_backward(
    proj: &mut AttnProjections,
    ctx: &BranchCtx,
    zn: &Array2<f64>,
    en: &Array2<f64>,
    topo: &EdgeTopology,
    heads: usize,
    dmsg: &Array2<f64>,
    dzn: &mut ArrayViewMut2<f64>,
    den: &mut ArrayViewMut2<f64>,
) {
    let n = zn.nrows();
    let d = zn.ncols();
    let d_head = d / heads;
    let ne = topo.num_edges();
    let scale = 1.0 / (d as f64).sqrt();

    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    let mut dep = Array2::<f64>::zeros((ne, d));
    let mut dwp = Array2::<f64>::zeros((ne, d));

    let mut dalpha = vec![0.0f64; d];
    let mut inner = vec![0.0f64; d];
    for i in 0..n {
        let (lo, hi) = (topo.offsets[i], topo.offsets[i + 1]);
        if lo == hi {
            continue;
        }
        let dm = dmsg.row(i);
        // Σ_e alpha ⊙ dalpha per dimension, for the softmax Jacobian.
        inner.fill(0.0);
        for e in lo..hi {
            let j = topo.edges[e].1;
            let (ar, wr, vr) = (ctx.alpha.row(e), ctx.wp.row(e), ctx.v.row(j));
            for c in 0..d {
                inner[c] += ar[c] * dm[c] * wr[c] * vr[c];
            }
        }
        for e in lo..hi {
            let j = topo.edges[e].1;
            let (ar, wr, vr) = (ctx.alpha.row(e), ctx.wp.row(e), ctx.v.row(j));
            {
                let mut dwr = dwp.row_mut(e);
                let mut dvr = dv.row_mut(j);
                for c in 0..d {
                    let awd = ar[c] * dm[c];
                    dwr[c] += awd * vr[c];
                    dvr[c] += awd * wr[c];
                    dalpha[c] = dm[c] * wr[c] * vr[c];
                }
            }
            // dl = alpha ⊙ (dalpha − inner); the edge-logit part takes dl
            // directly, the dot part sums dl over each head block.
            let qi = ctx.q.row(i);
            let kj = ctx.k.row(j);
            let mut depr = dep.row_mut(e);
            for h in 0..heads {
                let base = h * d_head;
                let mut ddot = 0.0;
                for c in base..base + d_head {
                    let dl = ar[c] * (dalpha[c] - inner[c]);
                    depr[c] += dl;
                    ddot += dl;
                }
                ddot *= ctx.clip_mask[[e, h]] * scale;
                if ddot != 0.0 {
                    let mut dqi = dq.row_mut(i);
                    for c in base..base + d_head {
                        dqi[c] += ddot * kj[c];
                    }
                    let mut dkj = dk.row_mut(j);
                    for c in base..base + d_head {
                        dkj[c] += ddot * qi[c];
                    }
                }
            }
        }
    }

    proj.query.backward(zn.view(), dq.view(), Some(dzn));
    proj.key.backward(zn.view(), dk.view(), Some(dzn));
    proj.value.backward(zn.view(), dv.view(), Some(dzn));
    proj.edge_logit.backward(en.view(), dep.view(), Some(den));
    proj.edge_gate.backward(en.view(), dwp.view(), Some(den));
}

/// One residual attention block: node/edge layer norms, one or two attention
/// branches, output projection, and a three-linear / two-ReLU feed-forward
/// network. With a contact branch the block is dual (message width `2d`),
/// otherwise single-branch (width `d`).
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub heads: usize,
    pub clip_range: (f64, f64),
    pub node_norm: LayerNorm,
    pub edge_norm: LayerNorm,
    pub mesh: AttnProjections,
    pub contact: Option<ContactBranch>,
    pub output: Linear,
    pub ffn: Ffn,
    pub ffn_norm: LayerNorm,
}

/// Contact-branch extras of a dual block. `projections: None` shares the
/// mesh-branch maps, matching the shared symbols in the block equations.
#[derive(Debug, Clone)]
pub struct ContactBranch {
    pub edge_norm: LayerNorm,
    pub projections: Option<AttnProjections>,
}

#[derive(Debug, Clone)]
pub struct Ffn {
    pub layers: [Linear; 3],
}

impl Ffn {
    fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Ffn {
            layers: [
                Linear::new(dim, dim, true, rng),
                Linear::new(dim, dim, true, rng),
                Linear::new(dim, dim, true, rng),
            ],
        }
    }
}

impl ParamSet for Ffn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{k}")), f);
        }
    }
}

#[derive(Debug)]
pub struct BlockCtx {
    zn: Array2<f64>,
    zn_ctx: LayerNormCtx,
    en: Array2<f64>,
    en_ctx: LayerNormCtx,
    sn: Option<(Array2<f64>, LayerNormCtx)>,
    pub mesh_branch: BranchCtx,
    pub contact_branch: Option<BranchCtx>,
    zbar: Array2<f64>,
    rn: Array2<f64>,
    rn_ctx: LayerNormCtx,
    f1: Array2<f64>,
    f2: Array2<f64>,
}

impl AttnBlock {
    /// `dual`: attend over contact edges in a second branch whose output is
    /// concatenated with the mesh branch. `share_branch_params`: reuse the
    /// mesh projections for the contact branch.
    pub fn new(
        dim: usize,
        heads: usize,
        clip_range: (f64, f64),
        dual: bool,
        share_branch_params: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim % heads == 0, "hidden dim must be divisible by head count");
        let contact = dual.then(|| ContactBranch {
            edge_norm: LayerNorm::new(dim, rng),
            projections: (!share_branch_params).then(|| AttnProjections::new(dim, rng)),
        });
        let width = if dual { 2 * dim } else { dim };
        AttnBlock {
            heads,
            clip_range,
            node_norm: LayerNorm::new(dim, rng),
            edge_norm: LayerNorm::new(dim, rng),
            mesh: AttnProjections::new(dim, rng),
            contact,
            output: Linear::new(width, dim, false, rng),
            ffn: Ffn::new(dim, rng),
            ffn_norm: LayerNorm::new(dim, rng),
        }
    }

    pub fn is_dual(&self) -> bool {
        self.contact.is_some()
    }

    /// `contact`: edge topology plus encoded contact-edge hiddens; required
    /// iff the block is dual (an empty topology is fine).
    pub fn forward(
        &self,
        z: &Array2<f64>,
        mesh_topo: &EdgeTopology,
        e_hidden: &Array2<f64>,
        contact: Option<(&EdgeTopology, &Array2<f64>)>,
    ) -> (Array2<f64>, BlockCtx) {
        let (zn, zn_ctx) = self.node_norm.forward(z.view());
        let (en, en_ctx) = self.edge_norm.forward(e_hidden.view());
        let mesh_branch =
            branch_forward(&self.mesh, &zn, &en, mesh_topo, self.heads, self.clip_range);

        let (sn, contact_branch, zbar) = match (&self.contact, contact) {
            (Some(branch), Some((ctopo, s_hidden))) => {
                let (sn, sn_ctx) = branch.edge_norm.forward(s_hidden.view());
                let proj = branch.projections.as_ref().unwrap_or(&self.mesh);
                let cctx = branch_forward(proj, &zn, &sn, ctopo, self.heads, self.clip_range);
                let mut zbar = Array2::zeros((z.nrows(), 2 * z.ncols()));
                zbar.slice_mut(ndarray::s![.., ..z.ncols()]).assign(&mesh_branch.messages);
                zbar.slice_mut(ndarray::s![.., z.ncols()..]).assign(&cctx.messages);
                (Some((sn, sn_ctx)), Some(cctx), zbar)
            }
            (None, _) => (None, None, mesh_branch.messages.clone()),
            (Some(_), None) => panic!("dual block needs contact inputs"),
        };

        let u = self.output.forward(zbar.view());
        let r = z + &u;
        let (rn, rn_ctx) = self.ffn_norm.forward(r.view());
        let mut f1 = self.ffn.layers[0].forward(rn.view());
        crate::nn::relu(&mut f1);
        let mut f2 = self.ffn.layers[1].forward(f1.view());
        crate::nn::relu(&mut f2);
        let f3 = self.ffn.layers[2].forward(f2.view());
        let out = &r + &f3;

        (
            out,
            BlockCtx {
                zn,
                zn_ctx,
                en,
                en_ctx,
                sn,
                mesh_branch,
                contact_branch,
                zbar,
                rn,
                rn_ctx,
                f1,
                f2,
            },
        )
    }

    /// Backward through the block. Returns the node-hidden gradient and
    /// accumulates edge-hidden gradients into `de` / `ds` (the encoded edge
    /// hiddens are shared by every block of a layer).
    pub fn backward(
        &mut self,
        ctx: &BlockCtx,
        mesh_topo: &EdgeTopology,
        contact_topo: Option<&EdgeTopology>,
        dz_out: &Array2<f64>,
        de: &mut ArrayViewMut2<f64>,
        ds: Option<&mut ArrayViewMut2<f64>>,
    ) -> Array2<f64> {
        let n = dz_out.nrows();
        let d = dz_out.ncols();

        // FFN chain: out = r + ffn(LN(r)).
        let mut df2 = Array2::zeros((n, d));
        self.ffn.layers[2].backward(ctx.f2.view(), dz_out.view(), Some(&mut df2.view_mut()));
        crate::nn::relu_backward(&ctx.f2, &mut df2);
        let mut df1 = Array2::zeros((n, d));
        self.ffn.layers[1].backward(ctx.f1.view(), df2.view(), Some(&mut df1.view_mut()));
        crate::nn::relu_backward(&ctx.f1, &mut df1);
        let mut drn = Array2::zeros((n, d));
        self.ffn.layers[0].backward(ctx.rn.view(), df1.view(), Some(&mut drn.view_mut()));
        let mut dr = dz_out.clone();
        self.ffn_norm.backward(&ctx.rn_ctx, drn.view(), &mut dr.view_mut());

        // r = z + output(zbar)
        let mut dzbar = Array2::zeros(ctx.zbar.raw_dim());
        self.output.backward(ctx.zbar.view(), dr.view(), Some(&mut dzbar.view_mut()));

        let mut dzn = Array2::<f64>::zeros((n, d));
        if let (Some(branch), Some(cctx), Some((sn, sn_ctx)), Some(ctopo), Some(ds)) = (
            self.contact.as_mut(),
            ctx.contact_branch.as_ref(),
            ctx.sn.as_ref(),
            contact_topo,
            ds,
        ) {
            let dmsg_contact = dzbar.slice(ndarray::s![.., d..]).to_owned();
            let mut dsn = Array2::zeros(sn.raw_dim());
            let proj = branch.projections.as_mut().unwrap_or(&mut self.mesh);
            branch_backward(
                proj,
                cctx,
                &ctx.zn,
                sn,
                ctopo,
                self.heads,
                &dmsg_contact,
                &mut dzn.view_mut(),
                &mut dsn.view_mut(),
            );
            branch.edge_norm.backward(sn_ctx, dsn.view(), ds);
        }
        let dmsg_mesh = dzbar.slice(ndarray::s![.., ..d]).to_owned();
        let mut den = Array2::zeros(ctx.en.raw_dim());
        branch_backward(
            &mut self.mesh,
            &ctx.mesh_branch,
            &ctx.zn,
            &ctx.en,
            mesh_topo,
            self.heads,
            &dmsg_mesh,
            &mut dzn.view_mut(),
            &mut den.view_mut(),
        );
        self.edge_norm.backward(&ctx.en_ctx, den.view(), de);

        // dz = residual path + node-norm path.
        let mut dz = dr;
        self.node_norm.backward(&ctx.zn_ctx, dzn.view(), &mut dz.view_mut());
        dz
    }
}

impl ParamSet for AttnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.node_norm.visit(&join(prefix, "node_norm"), f);
        self.edge_norm.visit(&join(prefix, "edge_norm"), f);
        self.mesh.visit(&join(prefix, "mesh"), f);
        if let Some(c) = &self.contact {
            c.edge_norm.visit(&join(prefix, "contact_norm"), f);
            if let Some(p) = &c.projections {
                p.visit(&join(prefix, "contact"), f);
            }
        }
        self.output.visit(&join(prefix, "output"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.node_norm.visit_mut(&join(prefix, "node_norm"), f);
        self.edge_norm.visit_mut(&join(prefix, "edge_norm"), f);
        self.mesh.visit_mut(&join(prefix, "mesh"), f);
        if let Some(c) = &mut self.contact {
            c.edge_norm.visit_mut(&join(prefix, "contact_norm"), f);
            if let Some(p) = &mut c.projections {
                p.visit_mut(&join(prefix, "contact"), f);
            }
        }
        self.output.visit_mut(&join(prefix, "output"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, zero_grads};
    use ndarray::Array2;
    use rand::Rng;

    fn line_topology(n: usize) -> EdgeTopology {
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            edges.push((i, i + 1));
            edges.push((i + 1, i));
        }
        edges.sort_unstable();
        EdgeTopology::new(n, edges)
    }

    fn random_inputs(n: usize, ne: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = crate::rng_from_seed(seed);
        let z = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((ne, d), |_| rng.gen_range(-1.0..1.0));
        (z, e)
    }

    #[test]
    fn softmax_weights_sum_to_one_per_dimension() {
        let topo = line_topology(6);
        let d = 8;
        let (z, e) = random_inputs(6, topo.num_edges(), d, 1);
        let mut rng = crate::rng_from_seed(2);
        let proj = AttnProjections::new(d, &mut rng);
        let ctx = branch_forward(&proj, &z, &e, &topo, 2, (-2.0, 2.0));
        for i in 0..6 {
            let (lo, hi) = (topo.offsets[i], topo.offsets[i + 1]);
            for c in 0..d {
                let s: f64 = (lo..hi).map(|e| ctx.alpha[[e, c]]).sum();
                assert!((s - 1.0).abs() < 1e-10, "node {i} dim {c}: sum {s}");
            }
        }
    }

    #[test]
    fn two_equal_neighbors_split_half_half() {
        // Node 1 has neighbors 0 and 2 with identical hiddens and identical
        // edge features: pre-modulation weights must be exactly 0.5 each.
        let topo = line_topology(3);
        let d = 4;
        let z = Array2::from_shape_fn((3, d), |(i, c)| if i == 1 { 0.3 * c as f64 } else { 0.7 });
        let e = Array2::from_elem((topo.num_edges(), d), 0.25);
        let mut rng = crate::rng_from_seed(3);
        let proj = AttnProjections::new(d, &mut rng);
        let ctx = branch_forward(&proj, &z, &e, &topo, 2, (-2.0, 2.0));
        let lo = topo.offsets[1];
        assert_eq!(topo.offsets[2] - lo, 2);
        for c in 0..d {
            assert!((ctx.alpha[[lo, c]] - 0.5).abs() < 1e-12);
            assert!((ctx.alpha[[lo + 1, c]] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_neighbor_set_gives_zero_message() {
        let topo = EdgeTopology::new(3, vec![(0, 1), (1, 0)]);
        let d = 4;
        let (z, e) = random_inputs(3, 2, d, 4);
        let mut rng = crate::rng_from_seed(5);
        let proj = AttnProjections::new(d, &mut rng);
        let ctx = branch_forward(&proj, &z, &e, &topo, 2, (-2.0, 2.0));
        assert!(ctx.messages.row(2).iter().all(|&v| v == 0.0));
        assert!(ctx.messages.row(0).iter().all(|&v| v.is_finite()));
    }

    #[test]
    fn zero_params_give_identity_block() {
        let topo = line_topology(5);
        let d = 8;
        let (z, e) = random_inputs(5, topo.num_edges(), d, 6);
        let mut rng = crate::rng_from_seed(7);
        let mut block = AttnBlock::new(d, 2, (-2.0, 2.0), false, true, &mut rng);
        block.output.weight.values_mut().fill(0.0);
        for l in &mut block.ffn.layers {
            l.weight.values_mut().fill(0.0);
            l.bias.as_mut().unwrap().values_mut().fill(0.0);
        }
        let (out, _) = block.forward(&z, &topo, &e, None);
        assert!(out.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn block_gradients_match_central_differences() {
        let topo = line_topology(5);
        let d = 8;
        let heads = 2;
        let (z, e) = random_inputs(5, topo.num_edges(), d, 8);
        let mut rng = crate::rng_from_seed(9);
        let mut block = AttnBlock::new(d, heads, (-2.0, 2.0), false, true, &mut rng);
        // Weighted quadratic loss keeps every output involved.
        let w = Array2::from_shape_fn((5, d), |_| rng.gen_range(0.5..1.5));

        let loss = |b: &AttnBlock| {
            let (out, _) = b.forward(&z, &topo, &e, None);
            0.5 * (&out * &out * &w).sum()
        };
        zero_grads(&mut block);
        let (out, ctx) = block.forward(&z, &topo, &e, None);
        let dz_out = &out * &w;
        let mut de = Array2::zeros(e.raw_dim());
        let _dz = block.backward(&ctx, &topo, None, &dz_out, &mut de.view_mut(), None);

        nn::tests::assert_grads_match(
            &mut block,
            loss,
            |b, name, k| nn::read_grad(b, name, k),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn dual_block_gradients_match_central_differences() {
        let n = 5;
        let d = 8;
        let mesh = line_topology(n);
        let ctopo = EdgeTopology::new(n, vec![(0, 4), (1, 3), (3, 1), (4, 0)]);
        let (z, e) = random_inputs(n, mesh.num_edges(), d, 10);
        let mut rng = crate::rng_from_seed(11);
        let s = Array2::from_shape_fn((ctopo.num_edges(), d), |_| rng.gen_range(-1.0..1.0));
        let mut block = AttnBlock::new(d, 2, (-2.0, 2.0), true, false, &mut rng);
        let w = Array2::from_shape_fn((n, d), |_| rng.gen_range(0.5..1.5));

        let loss = |b: &AttnBlock| {
            let (out, _) = b.forward(&z, &mesh, &e, Some((&ctopo, &s)));
            0.5 * (&out * &out * &w).sum()
        };
        zero_grads(&mut block);
        let (out, ctx) = block.forward(&z, &mesh, &e, Some((&ctopo, &s)));
        let dz_out = &out * &w;
        let mut de = Array2::zeros(e.raw_dim());
        let mut ds = Array2::zeros(s.raw_dim());
        block.backward(&ctx, &mesh, Some(&ctopo), &dz_out, &mut de.view_mut(), Some(&mut ds.view_mut()));

        nn::tests::assert_grads_match(
            &mut block,
            loss,
            |b, name, k| nn::read_grad(b, name, k),
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn empty_contact_half_is_zero_and_mesh_half_matches_single_branch() {
        let n = 5;
        let d = 8;
        let mesh = line_topology(n);
        let ctopo = EdgeTopology::new(n, vec![]);
        let s = Array2::zeros((0, d));
        let (z, e) = random_inputs(n, mesh.num_edges(), d, 12);
        let mut rng = crate::rng_from_seed(13);
        let dual = AttnBlock::new(d, 2, (-2.0, 2.0), true, true, &mut rng);

        let (_, ctx) = dual.forward(&z, &mesh, &e, Some((&ctopo, &s)));
        let contact_msgs = &ctx.contact_branch.as_ref().unwrap().messages;
        assert!(contact_msgs.iter().all(|&v| v == 0.0));

        // A single-branch block sharing the same mesh parameters computes the
        // same branch messages.
        let mut single =
            AttnBlock::new(d, 2, (-2.0, 2.0), false, true, &mut crate::rng_from_seed(13));
        single.node_norm = dual.node_norm.clone();
        single.edge_norm = dual.edge_norm.clone();
        single.mesh = dual.mesh.clone();
        let (_, sctx) = single.forward(&z, &mesh, &e, None);
        assert_eq!(ctx.mesh_branch.messages, sctx.mesh_branch.messages);
    }

    #[test]
    fn one_block_output_depends_only_on_one_hop_neighborhood() {
        let topo = line_topology(7);
        let d = 8;
        let (z, e) = random_inputs(7, topo.num_edges(), d, 14);
        let mut rng = crate::rng_from_seed(15);
        let block = AttnBlock::new(d, 2, (-2.0, 2.0), false, true, &mut rng);
        let (out, _) = block.forward(&z, &topo, &e, None);

        // Perturb node 6 (four hops from probe node 2): row 2 must not move.
        let mut z2 = z.clone();
        z2[[6, 0]] += 10.0;
        let (out2, _) = block.forward(&z2, &topo, &e, None);
        assert_eq!(out.row(2), out2.row(2));
        // Perturbing the direct neighbor does move it.
        let mut z3 = z.clone();
        z3[[3, 0]] += 1.0;
        let (out3, _) = block.forward(&z3, &topo, &e, None);
        assert_ne!(out.row(2), out3.row(2));
    }
}
