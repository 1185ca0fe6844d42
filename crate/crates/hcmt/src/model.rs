//! End-to-end simulator model: feature encoders, contact and hierarchical
//! attention layers, decoder, updater, training loop, rollout, and metrics.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::attention::EdgeTopology;
use crate::cmt::{CmtCtx, CmtLayer};
use crate::dataset::Dataset;
use crate::hierarchy::{build_hierarchy, Hierarchy};
use crate::hmt::{HmtCtx, HmtLayer};
use crate::mesh::{
    add_randomwalk_noise, build_sample, GraphSample, MeshTopology, NodeKind, SystemState,
    Trajectory, CONTACT_EDGE_FEATURE_DIM, MESH_EDGE_FEATURE_DIM, NODE_FEATURE_DIM,
};
use crate::nn::{
    join, AdamConfig, AdamState, Block, Mlp, MlpCtx, MlpSpec, Normalizer, ParamSet, Tensor,
};
use crate::{Error, Result};

pub const OUTPUT_DIM: usize = 3; // velocity x, velocity y, next stress

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    LateContact,
    OnlyCmt,
    OnlyHmt,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LateContact => "late_contact",
            Variant::OnlyCmt => "only_cmt",
            Variant::OnlyHmt => "only_hmt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "late_contact" => Ok(Variant::LateContact),
            "only_cmt" => Ok(Variant::OnlyCmt),
            "only_hmt" => Ok(Variant::OnlyHmt),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchParams {
    Shared,
    Separate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub l_c: usize,
    pub l_h: usize,
    pub lambda: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    pub noise_std: f64,
    /// Contact radius; `None` falls back to the dataset's `gamma`.
    pub radius: Option<f64>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub train_steps: u64,
    pub seed: u64,
    pub variant: Variant,
    pub single_branch: bool,
    pub branch_params: BranchParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            heads: 4,
            l_c: 2,
            l_h: 13,
            lambda: 6,
            clip_min: -2.0,
            clip_max: 2.0,
            noise_std: 0.003,
            radius: None,
            lr_start: 1e-4,
            lr_end: 1e-6,
            train_steps: 20_000,
            seed: 0,
            variant: Variant::Full,
            single_branch: false,
            branch_params: BranchParams::Shared,
        }
    }
}

impl ModelConfig {
    pub fn total_blocks(&self) -> usize {
        self.l_c + self.l_h
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.heads == 0 {
            return cfg("hidden and heads must be ≥ 1".into());
        }
        if self.hidden % self.heads != 0 {
            return cfg(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.clip_min >= self.clip_max {
            return cfg(format!("clip range [{}, {}] is empty", self.clip_min, self.clip_max));
        }
        if self.noise_std < 0.0 {
            return cfg(format!("noise std must be ≥ 0, got {}", self.noise_std));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return cfg(format!("contact radius must be > 0, got {r}"));
            }
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return cfg(format!(
                "learning rates must satisfy 0 < lr_end ≤ lr_start, got {} → {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.train_steps == 0 {
            return cfg("train_steps must be ≥ 1".into());
        }
        match self.variant {
            Variant::OnlyCmt if self.l_h != 0 => {
                return cfg(format!("variant only_cmt requires l_h = 0, got {}", self.l_h));
            }
            Variant::OnlyHmt if self.l_c != 0 => {
                return cfg(format!("variant only_hmt requires l_c = 0, got {}", self.l_c));
            }
            _ => {}
        }
        if self.l_h > 0 {
            crate::hmt::make_schedule(self.l_h, self.lambda)?;
        }
        Ok(())
    }

    /// Flat `key = value` serialization, a line per key.
    pub fn to_text(&self) -> String {
        let radius = match self.radius {
            Some(r) => format!("{r}"),
            None => "auto".into(),
        };
        format!(
            "l_c = {}\nl_h = {}\nlambda = {}\nheads = {}\nhidden = {}\nclip_min = {}\n\
             clip_max = {}\nnoise_std = {}\nradius = {}\nlr_start = {}\nlr_end = {}\n\
             train_steps = {}\nseed = {}\nvariant = {}\nsingle_branch = {}\nbranch_params = {}\n",
            self.l_c,
            self.l_h,
            self.lambda,
            self.heads,
            self.hidden,
            self.clip_min,
            self.clip_max,
            self.noise_std,
            radius,
            self.lr_start,
            self.lr_end,
            self.train_steps,
            self.seed,
            self.variant.as_str(),
            self.single_branch,
            match self.branch_params {
                BranchParams::Shared => "shared",
                BranchParams::Separate => "separate",
            },
        )
    }

    /// Parses the flat `key = value` format. Unlisted keys keep defaults;
    /// unknown keys are config errors. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: String| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| bad(format!("{e}")))?
                };
            }
            match key {
                "l_c" => out.l_c = num!(),
                "l_h" => out.l_h = num!(),
                "lambda" => out.lambda = num!(),
                "heads" => out.heads = num!(),
                "hidden" => out.hidden = num!(),
                "clip_min" => out.clip_min = num!(),
                "clip_max" => out.clip_max = num!(),
                "noise_std" => out.noise_std = num!(),
                "radius" => {
                    out.radius = if value == "auto" { None } else { Some(num!()) };
                }
                "lr_start" => out.lr_start = num!(),
                "lr_end" => out.lr_end = num!(),
                "train_steps" => out.train_steps = num!(),
                "seed" => out.seed = num!(),
                "variant" => out.variant = Variant::parse(value)?,
                "single_branch" => out.single_branch = num!(),
                "branch_params" => {
                    out.branch_params = match value {
                        "shared" => BranchParams::Shared,
                        "separate" => BranchParams::Separate,
                        other => {
                            return Err(bad(format!("expected shared|separate, got '{other}'")))
                        }
                    };
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub node_encoder: Mlp,
    /// Shared across hierarchy levels.
    pub mesh_encoder: Mlp,
    pub contact_encoder: Mlp,
    pub cmt: CmtLayer,
    pub hmt: Option<HmtLayer>,
    pub decoder: Mlp,
    pub node_norm: Normalizer,
    pub mesh_norm: Normalizer,
    pub contact_norm: Normalizer,
    pub target_norm: Normalizer,
}

impl ParamSet for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.node_encoder.visit(&join(prefix, "encoder.node"), f);
        self.mesh_encoder.visit(&join(prefix, "encoder.mesh"), f);
        self.contact_encoder.visit(&join(prefix, "encoder.contact"), f);
        self.cmt.visit(&join(prefix, "cmt"), f);
        if let Some(h) = &self.hmt {
            h.visit(&join(prefix, "hmt"), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.node_encoder.visit_mut(&join(prefix, "encoder.node"), f);
        self.mesh_encoder.visit_mut(&join(prefix, "encoder.mesh"), f);
        self.contact_encoder.visit_mut(&join(prefix, "encoder.contact"), f);
        self.cmt.visit_mut(&join(prefix, "cmt"), f);
        if let Some(h) = &mut self.hmt {
            h.visit_mut(&join(prefix, "hmt"), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Per-sample packed inputs: raw feature matrices plus edge topologies for
/// every hierarchy level and the contact set.
#[derive(Debug)]
pub struct Prepared {
    pub node_feats: Array2<f64>,
    pub mesh_topos: Vec<EdgeTopology>,
    pub mesh_feats: Vec<Array2<f64>>,
    pub parent_maps: Vec<Vec<usize>>,
    pub contact_topo: EdgeTopology,
    pub contact_feats: Array2<f64>,
}

pub fn prepare(sample: &GraphSample, hierarchy: &Hierarchy) -> Prepared {
    let n = sample.num_nodes();
    let node_feats = Array2::from_shape_fn((n, NODE_FEATURE_DIM), |(i, c)| {
        sample.node_features[i][c]
    });
    let mesh_topos: Vec<EdgeTopology> = hierarchy
        .levels
        .iter()
        .map(|lv| EdgeTopology::new(lv.num_nodes(), lv.mesh_edges.clone()))
        .collect();
    let mesh_feats: Vec<Array2<f64>> = hierarchy
        .levels
        .iter()
        .map(|lv| {
            Array2::from_shape_fn((lv.mesh_edges.len(), MESH_EDGE_FEATURE_DIM), |(e, c)| {
                lv.raw_edge_features[e][c]
            })
        })
        .collect();
    let parent_maps = hierarchy.levels.iter().map(|lv| lv.parent_map.clone()).collect();
    let contact_topo = EdgeTopology::new(n, sample.contact_edges.clone());
    let contact_feats =
        Array2::from_shape_fn((sample.contact_edges.len(), CONTACT_EDGE_FEATURE_DIM), |(e, c)| {
            sample.contact_edge_features[e][c]
        });
    Prepared { node_feats, mesh_topos, mesh_feats, parent_maps, contact_topo, contact_feats }
}

#[derive(Debug)]
enum StageCtx {
    Cmt(CmtCtx),
    Hmt(HmtCtx),
}

#[derive(Debug)]
pub struct ForwardCtx {
    node_ctx: MlpCtx,
    mesh_ctxs: Vec<MlpCtx>,
    contact_ctx: MlpCtx,
    e_hiddens: Vec<Array2<f64>>,
    s_hidden: Array2<f64>,
    stages: Vec<StageCtx>,
    decoder_ctx: MlpCtx,
    /// Decoder output in normalized target space, `[N, 3]`.
    pub normalized_out: Array2<f64>,
}

/// Unnormalized model outputs: per-node velocity (displacement per step) and
/// next stress.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub velocity: Vec<[f64; 2]>,
    pub stress: Vec<f64>,
}

fn check_finite(stage: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values after {stage}")))
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_from_seed(config.seed);
        let d = config.hidden;
        let clip = (config.clip_min, config.clip_max);
        let node_encoder = Mlp::new(MlpSpec::encoder(NODE_FEATURE_DIM, d), &mut rng);
        let mesh_encoder = Mlp::new(MlpSpec::encoder(MESH_EDGE_FEATURE_DIM, d), &mut rng);
        let contact_encoder = Mlp::new(MlpSpec::encoder(CONTACT_EDGE_FEATURE_DIM, d), &mut rng);
        let cmt = CmtLayer::new(
            config.l_c,
            d,
            config.heads,
            clip,
            config.single_branch,
            config.branch_params == BranchParams::Shared,
            &mut rng,
        );
        let hmt = if config.l_h > 0 {
            Some(HmtLayer::new(config.l_h, config.lambda, d, config.heads, clip, &mut rng)?)
        } else {
            None
        };
        let decoder = Mlp::new(MlpSpec::decoder(d, OUTPUT_DIM), &mut rng);
        Ok(Model {
            config,
            node_encoder,
            mesh_encoder,
            contact_encoder,
            cmt,
            hmt,
            decoder,
            node_norm: Normalizer::new(NODE_FEATURE_DIM),
            mesh_norm: Normalizer::new(MESH_EDGE_FEATURE_DIM),
            contact_norm: Normalizer::new(CONTACT_EDGE_FEATURE_DIM),
            target_norm: Normalizer::new(OUTPUT_DIM),
        })
    }

    pub fn accumulate_normalizers(&mut self, prep: &Prepared, targets: &Array2<f64>, mask: &[bool]) {
        self.node_norm.accumulate_rows(prep.node_feats.view());
        for feats in &prep.mesh_feats {
            self.mesh_norm.accumulate_rows(feats.view());
        }
        self.contact_norm.accumulate_rows(prep.contact_feats.view());
        let masked: Vec<f64> = targets
            .rows()
            .into_iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .flat_map(|(r, _)| r.to_vec())
            .collect();
        if !masked.is_empty() {
            let rows = Array2::from_shape_vec((masked.len() / OUTPUT_DIM, OUTPUT_DIM), masked)
                .expect("target rows");
            self.target_norm.accumulate_rows(rows.view());
        }
    }

    pub fn freeze_normalizers(&mut self) {
        self.node_norm.freeze();
        self.mesh_norm.freeze();
        self.contact_norm.freeze();
        self.target_norm.freeze();
    }

    /// Full forward pass. Hierarchy edge features must already reflect the
    /// same state the sample was built from.
    pub fn forward(&self, prep: &Prepared) -> Result<(Prediction, ForwardCtx)> {
        let levels_needed = if self.config.l_h > 0 { self.config.lambda + 1 } else { 1 };
        if prep.mesh_topos.len() < levels_needed {
            return Err(Error::Config(format!(
                "hierarchy has {} levels but the schedule needs {levels_needed}",
                prep.mesh_topos.len()
            )));
        }

        let node_in = self.node_norm.normalize_rows(prep.node_feats.view());
        let (z0, node_ctx) = self.node_encoder.forward(node_in.view())?;
        check_finite("node encoder", &z0)?;

        let mut e_hiddens = Vec::with_capacity(prep.mesh_feats.len());
        let mut mesh_ctxs = Vec::with_capacity(prep.mesh_feats.len());
        for feats in &prep.mesh_feats {
            let rows = self.mesh_norm.normalize_rows(feats.view());
            let (h, ctx) = self.mesh_encoder.forward(rows.view())?;
            check_finite("mesh-edge encoder", &h)?;
            e_hiddens.push(h);
            mesh_ctxs.push(ctx);
        }
        let contact_in = self.contact_norm.normalize_rows(prep.contact_feats.view());
        let (s_hidden, contact_ctx) = self.contact_encoder.forward(contact_in.view())?;
        check_finite("contact-edge encoder", &s_hidden)?;

        let mut stages = Vec::new();
        let mut z = z0;
        for stage in self.stage_order() {
            match stage {
                Stage::Cmt => {
                    let (next, ctx) = self.cmt.forward(
                        z,
                        &prep.mesh_topos[0],
                        &e_hiddens[0],
                        &prep.contact_topo,
                        &s_hidden,
                    );
                    check_finite("contact layer", &next)?;
                    stages.push(StageCtx::Cmt(ctx));
                    z = next;
                }
                Stage::Hmt => {
                    let hmt = self.hmt.as_ref().expect("hmt layer");
                    let (next, ctx) =
                        hmt.forward(z, &prep.parent_maps, &prep.mesh_topos, &e_hiddens)?;
                    check_finite("hierarchical layer", &next)?;
                    stages.push(StageCtx::Hmt(ctx));
                    z = next;
                }
            }
        }

        let (normalized_out, decoder_ctx) = self.decoder.forward(z.view())?;
        check_finite("decoder", &normalized_out)?;

        let n = normalized_out.nrows();
        let mut velocity = Vec::with_capacity(n);
        let mut stress = Vec::with_capacity(n);
        for i in 0..n {
            velocity.push([
                self.target_norm.unnormalize_value(0, normalized_out[[i, 0]]),
                self.target_norm.unnormalize_value(1, normalized_out[[i, 1]]),
            ]);
            stress.push(self.target_norm.unnormalize_value(2, normalized_out[[i, 2]]));
        }

        Ok((
            Prediction { velocity, stress },
            ForwardCtx {
                node_ctx,
                mesh_ctxs,
                contact_ctx,
                e_hiddens,
                s_hidden,
                stages,
                decoder_ctx,
                normalized_out,
            },
        ))
    }

    fn stage_order(&self) -> Vec<Stage> {
        let cmt = (self.config.l_c > 0).then_some(Stage::Cmt);
        let hmt = self.hmt.is_some().then_some(Stage::Hmt);
        match self.config.variant {
            Variant::Full | Variant::OnlyCmt | Variant::OnlyHmt => {
                cmt.into_iter().chain(hmt).collect()
            }
            Variant::LateContact => hmt.into_iter().chain(cmt).collect(),
        }
    }

    /// Backward from the normalized-output gradient through every stage into
    /// parameter gradient slots.
    pub fn backward(&mut self, prep: &Prepared, ctx: &ForwardCtx, d_normalized: &Array2<f64>) {
        let n = d_normalized.nrows();
        let d = self.config.hidden;
        let mut dz = Array2::zeros((n, d));
        self.decoder.backward(&ctx.decoder_ctx, d_normalized.view(), Some(&mut dz.view_mut()));

        let mut de: Vec<Array2<f64>> =
            ctx.e_hiddens.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
        let mut ds = Array2::zeros(ctx.s_hidden.raw_dim());

        for stage in ctx.stages.iter().rev() {
            match stage {
                StageCtx::Cmt(cctx) => {
                    dz = self.cmt.backward(
                        cctx,
                        &prep.mesh_topos[0],
                        &prep.contact_topo,
                        dz,
                        &mut de[0].view_mut(),
                        &mut ds.view_mut(),
                    );
                }
                StageCtx::Hmt(hctx) => {
                    let hmt = self.hmt.as_mut().expect("hmt layer");
                    let mut views: Vec<_> = de.iter_mut().map(|a| a.view_mut()).collect();
                    dz = hmt.backward(hctx, &prep.parent_maps, &prep.mesh_topos, dz, &mut views);
                }
            }
        }

        self.node_encoder.backward(&ctx.node_ctx, dz.view(), None);
        for (mctx, grad) in ctx.mesh_ctxs.iter().zip(&de) {
            self.mesh_encoder.backward(mctx, grad.view(), None);
        }
        self.contact_encoder.backward(&ctx.contact_ctx, ds.view(), None);
    }

    /// Normalized training targets for transition `t → t+1` of a (possibly
    /// noised) input state: target velocity runs from the input positions to
    /// the clean next positions; target stress is the clean next stress.
    pub fn normalized_targets(
        &self,
        input_state: &SystemState,
        next_state: &SystemState,
    ) -> Array2<f64> {
        let n = input_state.world_coords.len();
        let mut t = Array2::zeros((n, OUTPUT_DIM));
        for i in 0..n {
            t[[i, 0]] = next_state.world_coords[i][0] - input_state.world_coords[i][0];
            t[[i, 1]] = next_state.world_coords[i][1] - input_state.world_coords[i][1];
            t[[i, 2]] = next_state.stress[i];
        }
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blocks = Vec::new();
        self.visit("", &mut |name, tensor| {
            blocks.push(Block {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                data: tensor.values().to_vec(),
            });
        });
        for (name, norm) in [
            ("norm.node", &self.node_norm),
            ("norm.mesh", &self.mesh_norm),
            ("norm.contact", &self.contact_norm),
            ("norm.target", &self.target_norm),
        ] {
            let raw = norm.to_raw();
            blocks.push(Block { name: name.into(), shape: vec![raw.len()], data: raw });
        }
        crate::nn::write_blocks(path, &self.config.to_text(), &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config_text, blocks) = crate::nn::read_blocks(path)?;
        let config = ModelConfig::parse(&config_text)?;
        let mut model = Model::new(config)?;
        let mut by_name: std::collections::HashMap<String, Block> =
            blocks.into_iter().map(|b| (b.name.clone(), b)).collect();
        let mut missing = Vec::new();
        model.visit_mut("", &mut |name, tensor| match by_name.remove(name) {
            Some(b) if b.shape == tensor.shape() => {
                tensor.values_mut().copy_from_slice(&b.data);
            }
            Some(b) => missing.push(format!("{name}: shape {:?} vs {:?}", b.shape, tensor.shape())),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "{}: parameter blocks do not match config: {}",
                path.display(),
                missing.join("; ")
            )));
        }
        for (name, slot, dim) in [
            ("norm.node", &mut model.node_norm, NODE_FEATURE_DIM),
            ("norm.mesh", &mut model.mesh_norm, MESH_EDGE_FEATURE_DIM),
            ("norm.contact", &mut model.contact_norm, CONTACT_EDGE_FEATURE_DIM),
            ("norm.target", &mut model.target_norm, OUTPUT_DIM),
        ] {
            let b = by_name
                .remove(name)
                .ok_or_else(|| Error::Dataset(format!("{}: missing {name}", path.display())))?;
            *slot = Normalizer::from_raw(dim, &b.data)?;
        }
        Ok(model)
    }
}

enum Stage {
    Cmt,
    Hmt,
}

// ---------------------------------------------------------------------------
// Loss.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub position: f64,
    pub stress: f64,
}

/// One-step training objective in normalized target space: mean over
/// loss-eligible nodes of the squared position-residual norm, plus the mean
/// squared stress residual. Returns the gradient w.r.t. the predictions.
pub fn loss_and_grad(
    predicted: &Array2<f64>,
    target: &Array2<f64>,
    mask: &[bool],
) -> (LossBreakdown, Array2<f64>) {
    assert_eq!(predicted.raw_dim(), target.raw_dim());
    let m = mask.iter().filter(|&&b| b).count().max(1) as f64;
    let mut grad = Array2::zeros(predicted.raw_dim());
    let mut pos = 0.0;
    let mut stress = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for c in 0..OUTPUT_DIM {
            let r = predicted[[i, c]] - target[[i, c]];
            if c < 2 {
                pos += r * r;
            } else {
                stress += r * r;
            }
            grad[[i, c]] = 2.0 * r / m;
        }
    }
    pos /= m;
    stress /= m;
    (LossBreakdown { total: pos + stress, position: pos, stress }, grad)
}

pub fn loss_mask(kinds: &[NodeKind]) -> Vec<bool> {
    kinds.iter().map(|k| !k.is_fixed()).collect()
}

// ---------------------------------------------------------------------------
// Updater and rollout.
// ---------------------------------------------------------------------------

/// First-order update: free nodes move by the predicted velocity, boundary
/// nodes stay at their prescribed positions.
pub fn update_positions(
    state: &SystemState,
    kinds: &[NodeKind],
    velocity: &[[f64; 2]],
) -> Vec<[f64; 2]> {
    state
        .world_coords
        .iter()
        .zip(kinds)
        .zip(velocity)
        .map(|((x, k), v)| if k.is_fixed() { *x } else { [x[0] + v[0], x[1] + v[1]] })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Aligned with the ground-truth states: entries `0..=start` are copied
    /// from the trajectory, later entries are closed-loop predictions.
    pub states: Vec<SystemState>,
    pub diverged: bool,
}

fn divergence_bound(traj: &Trajectory) -> f64 {
    let mut m: f64 = 1.0;
    for p in &traj.states[0].world_coords {
        m = m.max(p[0].abs()).max(p[1].abs());
    }
    100.0 * m
}

/// Closed-loop autoregressive prediction: each step rebuilds node features
/// and contact edges from the current predicted state, keeping boundary
/// nodes pinned. On divergence the remaining steps repeat the last state and
/// the flag is set.
pub fn rollout(
    model: &Model,
    trajectory: &Trajectory,
    radius: f64,
    start: usize,
) -> Result<Rollout> {
    let topo = &trajectory.topology;
    let kinds = &topo.kinds;
    let bound = divergence_bound(trajectory);
    let mut states: Vec<SystemState> = trajectory.states[..=start].to_vec();
    let mut hierarchy = hierarchy_for(model, trajectory, radius)?;
    let mut diverged = false;

    for _t in start..trajectory.num_steps() {
        let state = states.last().unwrap();
        if diverged {
            states.push(state.clone());
            continue;
        }
        let sample = build_sample(topo, state, radius)?;
        hierarchy.refresh_edge_features(topo, state);
        let prep = prepare(&sample, &hierarchy);
        let (pred, _) = model.forward(&prep)?;
        let next_pos = update_positions(state, kinds, &pred.velocity);
        let next_stress: Vec<f64> = pred
            .stress
            .iter()
            .zip(kinds)
            .zip(&state.stress)
            .map(|((s, k), prev)| if k.is_fixed() { *prev } else { *s })
            .collect();
        if next_pos.iter().any(|p| !p[0].is_finite() || !p[1].is_finite() || p[0].abs() > bound || p[1].abs() > bound)
        {
            diverged = true;
            states.push(state.clone());
            continue;
        }
        states.push(SystemState {
            prev_world_coords: state.world_coords.clone(),
            world_coords: next_pos,
            stress: next_stress,
        });
    }
    Ok(Rollout { states, diverged })
}

/// Reference competitor: constant-velocity extrapolation with carried stress.
pub fn constant_velocity_rollout(trajectory: &Trajectory, start: usize) -> Rollout {
    let kinds = &trajectory.topology.kinds;
    let mut states: Vec<SystemState> = trajectory.states[..=start].to_vec();
    for _ in start..trajectory.num_steps() {
        let state = states.last().unwrap();
        let vel: Vec<[f64; 2]> = (0..kinds.len()).map(|i| state.velocity(i)).collect();
        let next_pos = update_positions(state, kinds, &vel);
        states.push(SystemState {
            prev_world_coords: state.world_coords.clone(),
            world_coords: next_pos,
            stress: state.stress.clone(),
        });
    }
    Rollout { states, diverged: false }
}

/// Builds (or rebuilds) the static hierarchy for a trajectory at its initial
/// state; callers refresh edge features per step.
pub fn hierarchy_for(model: &Model, trajectory: &Trajectory, radius: f64) -> Result<Hierarchy> {
    let lambda = if model.config.l_h > 0 { model.config.lambda } else { 0 };
    let sample = build_sample(&trajectory.topology, &trajectory.states[0], radius)?;
    build_hierarchy(&sample, &trajectory.topology, &trajectory.states[0], lambda)
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

/// RMSE-1 / RMSE-all for position and stress, ×10³, computed per scalar
/// component over loss-eligible nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutMetrics {
    pub rmse1_position: f64,
    pub rmse1_stress: f64,
    pub rmse_all_position: f64,
    pub rmse_all_stress: f64,
}

pub fn evaluate(
    predicted: &[SystemState],
    truth: &[SystemState],
    kinds: &[NodeKind],
    start: usize,
) -> Result<RolloutMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "rollout has {} states, ground truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() <= start + 1 {
        return Err(Error::Shape("rollout too short to evaluate".into()));
    }
    let mut pos_sq = 0.0;
    let mut pos_n = 0usize;
    let mut stress_sq = 0.0;
    let mut stress_n = 0usize;
    let mut first = RolloutMetrics::default();
    for t in start + 1..predicted.len() {
        for i in 0..kinds.len() {
            if kinds[i].is_fixed() {
                continue;
            }
            let dp = [
                predicted[t].world_coords[i][0] - truth[t].world_coords[i][0],
                predicted[t].world_coords[i][1] - truth[t].world_coords[i][1],
            ];
            pos_sq += dp[0] * dp[0] + dp[1] * dp[1];
            pos_n += 2;
            let dsigma = predicted[t].stress[i] - truth[t].stress[i];
            stress_sq += dsigma * dsigma;
            stress_n += 1;
        }
        if t == start + 1 {
            first.rmse1_position = 1e3 * (pos_sq / pos_n.max(1) as f64).sqrt();
            first.rmse1_stress = 1e3 * (stress_sq / stress_n.max(1) as f64).sqrt();
        }
    }
    Ok(RolloutMetrics {
        rmse1_position: first.rmse1_position,
        rmse1_stress: first.rmse1_stress,
        rmse_all_position: 1e3 * (pos_sq / pos_n.max(1) as f64).sqrt(),
        rmse_all_stress: 1e3 * (stress_sq / stress_n.max(1) as f64).sqrt(),
    })
}

/// Open-loop one-step error over all transitions of the given trajectories
/// (raw units, not scaled), used for training-progress checks.
pub fn one_step_rmse(model: &Model, trajectories: &[Trajectory], radius: f64) -> Result<f64> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for traj in trajectories {
        let mut hierarchy = hierarchy_for(model, traj, radius)?;
        for t in 0..traj.num_steps() {
            let state = &traj.states[t];
            let sample = build_sample(&traj.topology, state, radius)?;
            hierarchy.refresh_edge_features(&traj.topology, state);
            let prep = prepare(&sample, &hierarchy);
            let (pred, _) = model.forward(&prep)?;
            let next = &traj.states[t + 1];
            for i in 0..traj.topology.num_nodes() {
                if traj.topology.kinds[i].is_fixed() {
                    continue;
                }
                let px = state.world_coords[i][0] + pred.velocity[i][0];
                let py = state.world_coords[i][1] + pred.velocity[i][1];
                let dx = px - next.world_coords[i][0];
                let dy = py - next.world_coords[i][1];
                sq += dx * dx + dy * dy;
                n += 2;
            }
        }
    }
    Ok((sq / n.max(1) as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { log_every: 500, checkpoint_every: 5000 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Losses of the first 100 steps, for determinism checks.
    pub first_losses: Vec<f64>,
    pub final_loss_window: f64,
    pub steps: u64,
}

/// Trains a fresh model on the dataset's train split: samples a random
/// (trajectory, step) pair per iteration, applies random-walk input noise,
/// accumulates normalizer statistics over a warm-up window, and runs Adam
/// with exponential learning-rate decay. Checkpoints land at `out` every
/// `checkpoint_every` steps and at the end; a non-finite loss aborts with the
/// last checkpoint retained on disk.
pub fn train(
    config: &ModelConfig,
    dataset: &Dataset,
    out: &Path,
    opts: &TrainOptions,
    mut log: impl FnMut(&str),
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let radius = config.radius.unwrap_or_else(|| dataset.contact_radius());
    let train_idx = dataset.split_indices("train");
    if train_idx.is_empty() {
        return Err(Error::Dataset("dataset has no train trajectories".into()));
    }
    let mut trajectories = Vec::with_capacity(train_idx.len());
    for &k in &train_idx {
        trajectories.push(dataset.load(k)?);
    }
    let kappa = trajectories[0].num_steps();
    if kappa == 0 {
        return Err(Error::Dataset("trajectories have no transitions".into()));
    }

    let mut model = Model::new(config.clone())?;
    let mut hierarchies: Vec<Option<Hierarchy>> = vec![None; trajectories.len()];
    let mut rng = crate::rng_from_seed(config.seed ^ 0x7261696e);
    let adam_cfg = AdamConfig {
        lr_start: config.lr_start,
        lr_end: config.lr_end,
        total_steps: config.train_steps,
        ..Default::default()
    };
    let mut adam = AdamState::new();
    let warmup = (config.train_steps / 20).clamp(1, 1000);

    let mut report = TrainReport::default();
    let mut window_sum = 0.0;
    let mut window_n = 0u64;
    for step in 0..config.train_steps {
        let ti = rng.gen_range(0..trajectories.len());
        let t = rng.gen_range(0..kappa);
        let traj = &trajectories[ti];
        let noised = add_randomwalk_noise(traj, config.noise_std, &mut rng)?;
        let input_state = noised.input_state(traj, t);
        let sample = build_sample(&traj.topology, &input_state, radius)?;
        if hierarchies[ti].is_none() {
            hierarchies[ti] = Some(hierarchy_for(&model, traj, radius)?);
        }
        let hierarchy = hierarchies[ti].as_mut().unwrap();
        hierarchy.refresh_edge_features(&traj.topology, &input_state);
        let prep = prepare(&sample, hierarchy);

        let targets_raw = model.normalized_targets(&input_state, &traj.states[t + 1]);
        let mask = loss_mask(&traj.topology.kinds);
        if step < warmup {
            model.accumulate_normalizers(&prep, &targets_raw, &mask);
            if step + 1 == warmup {
                model.freeze_normalizers();
            }
        }
        let targets = model.target_norm.normalize_rows(targets_raw.view());

        crate::nn::zero_grads(&mut model);
        let (_, ctx) = model.forward(&prep)?;
        let (loss, dout) = loss_and_grad(&ctx.normalized_out, &targets, &mask);
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step}; last checkpoint retained at {}",
                out.display()
            )));
        }
        model.backward(&prep, &ctx, &dout);
        adam.step(&adam_cfg, &mut model)?;

        if report.first_losses.len() < 100 {
            report.first_losses.push(loss.total);
        }
        window_sum += loss.total;
        window_n += 1;
        if (step + 1) % opts.log_every == 0 || step + 1 == config.train_steps {
            log(&format!(
                "step {:>7}  lr {:.3e}  loss {:.6e}  (pos {:.3e} stress {:.3e})",
                step + 1,
                adam_cfg.lr(step),
                window_sum / window_n as f64,
                loss.position,
                loss.stress
            ));
            report.final_loss_window = window_sum / window_n as f64;
            window_sum = 0.0;
            window_n = 0;
        }
        if (step + 1) % opts.checkpoint_every == 0 {
            model.save(out)?;
        }
    }
    model.save(out)?;
    report.steps = config.train_steps;
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Gradient-check harness (also backs the `gradcheck` CLI subcommand).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub seconds: f64,
}

/// Two-object 30-node instance for end-to-end gradient verification.
pub fn gradcheck_instance(seed: u64) -> (MeshTopology, SystemState) {
    let mut coords = Vec::new();
    let mut cells = Vec::new();
    let mut object_id = Vec::new();
    let mut kinds = Vec::new();
    // Plate: 6×3 grid, spacing 0.5, top row at y = 0.
    let (cols, rows, h) = (6usize, 3usize, 0.5f64);
    for r in 0..rows {
        for c in 0..cols {
            coords.push([c as f64 * h, -(r as f64) * h]);
            object_id.push(0);
            kinds.push(if c == 0 || c == cols - 1 {
                NodeKind::PlateFixed
            } else {
                NodeKind::PlateFree
            });
        }
    }
    let idx = |c: usize, r: usize| r * cols + c;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            cells.push([idx(c, r), idx(c + 1, r), idx(c, r + 1)]);
            cells.push([idx(c + 1, r), idx(c + 1, r + 1), idx(c, r + 1)]);
        }
    }
    // Ball: 4×3 block hovering 0.3 above the plate, within contact range.
    let base = coords.len();
    let (bcols, brows) = (4usize, 3usize);
    for r in 0..brows {
        for c in 0..bcols {
            coords.push([0.75 + c as f64 * h, 0.3 + r as f64 * h]);
            object_id.push(1);
            kinds.push(NodeKind::Ball);
        }
    }
    let bidx = |c: usize, r: usize| base + r * bcols + c;
    for r in 0..brows - 1 {
        for c in 0..bcols - 1 {
            cells.push([bidx(c, r), bidx(c + 1, r), bidx(c, r + 1)]);
            cells.push([bidx(c + 1, r), bidx(c + 1, r + 1), bidx(c, r + 1)]);
        }
    }
    let n = coords.len();
    let topo = MeshTopology {
        cells,
        mesh_coords: coords.clone(),
        object_id,
        kinds,
        density: (0..n).map(|i| 1.0 + 0.1 * (i % 3) as f64).collect(),
        youngs_modulus: (0..n).map(|i| 2.0 + 0.2 * (i % 5) as f64).collect(),
    };
    let mut rng = crate::rng_from_seed(seed);
    let state = SystemState {
        world_coords: coords
            .iter()
            .map(|p| [p[0] + rng.gen_range(-0.02..0.02), p[1] + rng.gen_range(-0.02..0.02)])
            .collect(),
        prev_world_coords: coords.clone(),
        stress: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    (topo, state)
}

/// Central-difference check of the full training-loss gradient (h = 1e-4) on
/// the 30-node instance with a d=8, H=2, L_C=1, L_H=3, λ=1 model.
pub fn gradcheck(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        hidden: 8,
        heads: 2,
        l_c: 1,
        l_h: 3,
        lambda: 1,
        seed,
        ..Default::default()
    };
    gradcheck_configured(config, seed)
}

/// Same check with an explicit model configuration.
pub fn gradcheck_configured(mut config: ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let started = std::time::Instant::now();
    config.seed = seed;
    let (topo, state) = gradcheck_instance(seed ^ 0x5eed);
    let radius = 0.6;
    let sample = build_sample(&topo, &state, radius)?;
    assert!(
        !sample.contact_edges.is_empty(),
        "gradcheck instance must exercise contact edges"
    );
    let hierarchy = build_hierarchy(&sample, &topo, &state, config.lambda)?;
    let prep = prepare(&sample, &hierarchy);

    let mut model = Model::new(config)?;
    let mut rng = crate::rng_from_seed(seed ^ 0x7a67);
    let targets = Array2::from_shape_fn((topo.num_nodes(), OUTPUT_DIM), |_| {
        rng.gen_range(-1.0..1.0)
    });
    let mask = loss_mask(&topo.kinds);
    model.accumulate_normalizers(&prep, &targets, &mask);
    model.freeze_normalizers();

    crate::nn::zero_grads(&mut model);
    let (_, ctx) = model.forward(&prep)?;
    let (_, dout) = loss_and_grad(&ctx.normalized_out, &targets, &mask);
    model.backward(&prep, &ctx, &dout);

    let mut analytic = std::collections::HashMap::new();
    model.visit("", &mut |name, t| {
        analytic.insert(name.to_string(), t.grad().to_vec());
    });

    let h = 1e-4;
    let catalog = crate::nn::param_catalog(&model);
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    for (name, len) in &catalog {
        for k in 0..*len {
            let orig = crate::nn::read_param(&model, name, k);
            crate::nn::write_param(&mut model, name, k, orig + h);
            let (_, ctx) = model.forward(&prep)?;
            let (lp, _) = loss_and_grad(&ctx.normalized_out, &targets, &mask);
            crate::nn::write_param(&mut model, name, k, orig - h);
            let (_, ctx) = model.forward(&prep)?;
            let (lm, _) = loss_and_grad(&ctx.normalized_out, &targets, &mask);
            crate::nn::write_param(&mut model, name, k, orig);
            let fd = (lp.total - lm.total) / (2.0 * h);
            let err = crate::nn::max_rel_err(analytic[name][k], fd);
            if err > worst {
                worst = err;
                worst_param = format!("{name}[{k}]");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_param,
        params_checked: checked,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ModelConfig::default();
        cfg.l_c = 3;
        cfg.l_h = 12;
        cfg.lambda = 4;
        cfg.radius = Some(0.35);
        cfg.variant = Variant::LateContact;
        cfg.single_branch = true;
        cfg.branch_params = BranchParams::Separate;
        let parsed = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);

        let auto = ModelConfig::default();
        assert_eq!(ModelConfig::parse(&auto.to_text()).unwrap().radius, None);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_variants() {
        assert!(matches!(ModelConfig::parse("bogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::parse("variant = nope\n"), Err(Error::Config(_))));
        // only_cmt demands l_h = 0
        assert!(matches!(
            ModelConfig::parse("variant = only_cmt\n"),
            Err(Error::Config(_))
        ));
        assert!(ModelConfig::parse("variant = only_cmt\nl_h = 0\nl_c = 15\n").is_ok());
        // V-cycle constraint
        assert!(matches!(ModelConfig::parse("l_h = 5\nlambda = 3\n"), Err(Error::Config(_))));
        // comments and blanks are fine
        assert!(ModelConfig::parse("# comment\n\nseed = 3 # trailing\n").is_ok());
    }

    #[test]
    fn updater_moves_free_nodes_and_pins_fixed() {
        let kinds = vec![NodeKind::PlateFree, NodeKind::PlateFixed];
        let state = SystemState {
            world_coords: vec![[1.0, 2.0], [3.0, 4.0]],
            prev_world_coords: vec![[1.0, 2.0], [3.0, 4.0]],
            stress: vec![0.0; 2],
        };
        let v = vec![[0.1, -0.2], [9.0, 9.0]];
        let next = update_positions(&state, &kinds, &v);
        assert_eq!(next[0], [1.1, 1.8]);
        assert_eq!(next[1], [3.0, 4.0], "fixed node ignores predicted velocity");

        let still = update_positions(&state, &kinds, &[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(still, state.world_coords);
    }

    #[test]
    fn loss_examples() {
        let target = Array2::zeros((4, OUTPUT_DIM));
        let mask = vec![true; 4];

        let (zero, grad) = loss_and_grad(&target, &target, &mask);
        assert_eq!(zero.total, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        // Position error of exactly 1 per node per axis, stress exact:
        // the position term sums the two axes, so the loss is 2.
        let mut pred = Array2::zeros((4, OUTPUT_DIM));
        for i in 0..4 {
            pred[[i, 0]] = 1.0;
            pred[[i, 1]] = 1.0;
        }
        let (unit, _) = loss_and_grad(&pred, &target, &mask);
        assert!((unit.total - 2.0).abs() < 1e-15, "loss {unit:?}");

        let (quad, _) = loss_and_grad(&pred.mapv(|v| 2.0 * v), &target, &mask);
        assert!((quad.total - 8.0).abs() < 1e-14, "doubling residuals quadruples the loss");

        // Symmetry.
        let a = Array2::from_shape_fn((4, OUTPUT_DIM), |(i, c)| (i * 3 + c) as f64 * 0.1);
        let b = Array2::from_shape_fn((4, OUTPUT_DIM), |(i, c)| ((i + c) % 5) as f64 * 0.2);
        let (ab, _) = loss_and_grad(&a, &b, &mask);
        let (ba, _) = loss_and_grad(&b, &a, &mask);
        assert_eq!(ab.total, ba.total);

        // Fixed nodes are excluded.
        let masked = vec![true, false, true, false];
        let (half, _) = loss_and_grad(&pred, &target, &masked);
        assert!((half.total - 2.0).abs() < 1e-15, "mean over eligible nodes only");
    }

    #[test]
    fn evaluate_constant_error_matches_component_convention() {
        let kinds = vec![NodeKind::PlateFree; 3];
        let mk = |offset: f64| SystemState {
            world_coords: vec![[offset, offset]; 3],
            prev_world_coords: vec![[0.0, 0.0]; 3],
            stress: vec![0.0; 3],
        };
        let truth = vec![mk(0.0), mk(0.0), mk(0.0)];
        let e = 0.25;
        let pred = vec![mk(0.0), mk(e), mk(e)];
        let m = evaluate(&pred, &truth, &kinds, 0).unwrap();
        // Constant per-axis error e → RMSE over scalar components = e.
        assert!((m.rmse_all_position - 1e3 * e).abs() < 1e-9, "{m:?}");
        assert!((m.rmse1_position - 1e3 * e).abs() < 1e-9);

        // One-step rollout: RMSE-1 equals RMSE-all.
        let one = evaluate(&pred[..2], &truth[..2], &kinds, 0).unwrap();
        assert_eq!(one.rmse1_position, one.rmse_all_position);

        let perfect = evaluate(&truth, &truth, &kinds, 0).unwrap();
        assert_eq!(perfect.rmse_all_position, 0.0);
        assert_eq!(perfect.rmse_all_stress, 0.0);
    }

    #[test]
    fn zero_final_decoder_layer_predicts_target_mean() {
        let config = ModelConfig {
            hidden: 8,
            heads: 2,
            l_c: 1,
            l_h: 3,
            lambda: 1,
            ..Default::default()
        };
        let (topo, state) = gradcheck_instance(5);
        let sample = build_sample(&topo, &state, 0.6).unwrap();
        let hierarchy = build_hierarchy(&sample, &topo, &state, 1).unwrap();
        let prep = prepare(&sample, &hierarchy);
        let mut model = Model::new(config).unwrap();
        // Accumulate target stats with a known mean.
        let mut targets = Array2::zeros((topo.num_nodes(), OUTPUT_DIM));
        for i in 0..topo.num_nodes() {
            targets[[i, 0]] = 0.5 + 0.1 * (i % 3) as f64;
            targets[[i, 1]] = -0.25;
            targets[[i, 2]] = 2.0;
        }
        let mask = vec![true; topo.num_nodes()];
        model.accumulate_normalizers(&prep, &targets, &mask);
        model.freeze_normalizers();
        let last = model.decoder.layers.len() - 1;
        model.decoder.layers[last].weight.values_mut().fill(0.0);
        model.decoder.layers[last].bias.as_mut().unwrap().values_mut().fill(0.0);

        let (pred, ctx) = model.forward(&prep).unwrap();
        assert!(ctx.normalized_out.iter().all(|&v| v == 0.0));
        let mean_vx = targets.column(0).mean().unwrap();
        for v in &pred.velocity {
            assert!((v[0] - mean_vx).abs() < 1e-12);
            assert!((v[1] + 0.25).abs() < 1e-12);
        }
        assert!(pred.stress.iter().all(|&s| (s - 2.0).abs() < 1e-12));
    }

    #[test]
    fn variant_stage_order() {
        let mk = |variant, l_c: usize, l_h: usize| {
            let config = ModelConfig {
                hidden: 8,
                heads: 2,
                l_c,
                l_h,
                lambda: if l_h > 0 { 1 } else { 0 },
                variant,
                ..Default::default()
            };
            Model::new(config).unwrap()
        };
        assert_eq!(mk(Variant::Full, 1, 3).stage_order().len(), 2);
        assert_eq!(mk(Variant::Full, 1, 0).stage_order().len(), 1);
        assert_eq!(mk(Variant::OnlyCmt, 2, 0).stage_order().len(), 1);
        assert_eq!(mk(Variant::OnlyHmt, 0, 3).stage_order().len(), 1);
        let lc = mk(Variant::LateContact, 1, 3);
        assert!(matches!(lc.stage_order()[0], Stage::Hmt));
        assert!(matches!(lc.stage_order()[1], Stage::Cmt));
    }
}
