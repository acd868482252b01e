//! The multimodal posture classifier: a residual image backbone plus a
//! landmark embedding branch, joined by cross-attention and a fusion head.
//!
//! The image path tokenizes a square frame into `token_count` vectors of
//! width `token_dim`, then refines them with a self-attention stack. The
//! pose path embeds the 33 landmark coordinates and passes them through one
//! lightweight transformer block. The fusion module projects both into a
//! shared width, attends image queries over pose keys/values, pools, and
//! produces a joint embedding that a linear head turns into class logits.
//!
//! Everything is expressed as [`autodiff`](crate::autodiff) graph ops, so
//! the same builders serve training (tracked parameters) and inference
//! (constant parameters).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ffn, mha, Activation, AttnParams, FfnParams, Graph, Var};
use crate::error::{Error, Result};
use crate::pose::{Skeleton, LANDMARK_COUNT};
use crate::tensor::{ErgRng, ParamMap, Scalar, Tensor};

/// Epsilon used by every layer norm in the network.
pub const LN_EPS: f64 = 1e-5;

/// One backbone stage: output channel count and the stride applied by the
/// stage's first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(channels: usize, stride: usize) -> Self {
        StageSpec { channels, stride }
    }
}

/// Hyperparameters of the network. `default()` is the full-scale layout;
/// the smaller presets keep every structural invariant while shrinking the
/// widths for CPU-bound training and gradient checking.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViskGatConfig {
    /// Input frames are `[3, image_size, image_size]`.
    pub image_size: usize,
    /// Number of image tokens; must be a perfect square.
    pub token_count: usize,
    /// Width of each image/pose token.
    pub token_dim: usize,
    /// Number of landmark rows in the pose matrix.
    pub pose_points: usize,
    /// Heads of every attention layer that runs at `token_dim` width.
    pub fgam_heads: usize,
    /// Hidden width of the image-branch feed-forward layers.
    pub fgam_ffn_hidden: usize,
    /// Lightweight transformer blocks stacked inside the image branch.
    pub fgam_lt_blocks: usize,
    /// Shared width of the fusion module.
    pub mgcm_dim: usize,
    /// Heads of the cross-attention and fusion transformer layers.
    pub mgcm_heads: usize,
    /// Transformer layers applied to the pooled fusion token.
    pub mgcm_layers: usize,
    /// Hidden width of the fusion transformer feed-forward layers.
    pub mgcm_ffn_hidden: usize,
    /// Width of the joint embedding produced by the fusion head.
    pub fusion_dim: usize,
    pub num_classes: usize,
    /// Dropout applied after attention inside lightweight blocks (train
    /// mode only).
    pub dropout_rate: f64,
    /// Residual stages, two blocks each; the last stage's channel count
    /// must equal `token_dim`.
    pub backbone_stages: Vec<StageSpec>,
}

impl Default for ViskGatConfig {
    fn default() -> Self {
        ViskGatConfig {
            image_size: 224,
            token_count: 256,
            token_dim: 128,
            pose_points: LANDMARK_COUNT,
            fgam_heads: 8,
            fgam_ffn_hidden: 512,
            fgam_lt_blocks: 2,
            mgcm_dim: 256,
            mgcm_heads: 4,
            mgcm_layers: 2,
            mgcm_ffn_hidden: 1024,
            fusion_dim: 512,
            num_classes: 8,
            dropout_rate: 0.1,
            backbone_stages: vec![
                StageSpec::new(32, 2),
                StageSpec::new(64, 2),
                StageSpec::new(128, 2),
                StageSpec::new(128, 1),
            ],
        }
    }
}

impl ViskGatConfig {
    /// Desk-scale layout: 64x64 frames, full token width. Same token
    /// geometry as `default()` but an 8x8 grid, so shapes stay easy to
    /// reason about while each pass is ~30x cheaper.
    pub fn desk() -> Self {
        ViskGatConfig {
            image_size: 64,
            token_count: 64,
            token_dim: 128,
            fgam_ffn_hidden: 256,
            mgcm_dim: 128,
            mgcm_ffn_hidden: 512,
            fusion_dim: 256,
            backbone_stages: vec![
                StageSpec::new(16, 2),
                StageSpec::new(32, 2),
                StageSpec::new(64, 2),
                StageSpec::new(128, 1),
            ],
            ..Self::default()
        }
    }

    /// Micro layout for end-to-end CPU training demos: 64x64 frames,
    /// narrow tokens, no dropout.
    pub fn micro() -> Self {
        ViskGatConfig {
            image_size: 64,
            token_count: 64,
            token_dim: 32,
            fgam_heads: 4,
            fgam_ffn_hidden: 128,
            mgcm_dim: 64,
            mgcm_ffn_hidden: 256,
            fusion_dim: 128,
            dropout_rate: 0.0,
            backbone_stages: vec![
                StageSpec::new(4, 2),
                StageSpec::new(8, 2),
                StageSpec::new(16, 2),
                StageSpec::new(32, 1),
            ],
            ..Self::default()
        }
    }

    /// Smallest structurally-complete layout, for finite-difference
    /// gradient checks: 16x16 frames, token width 8, fusion width 16.
    pub fn tiny() -> Self {
        ViskGatConfig {
            image_size: 16,
            token_count: 16,
            token_dim: 8,
            fgam_heads: 2,
            fgam_ffn_hidden: 16,
            fgam_lt_blocks: 1,
            mgcm_dim: 16,
            mgcm_heads: 2,
            mgcm_layers: 1,
            mgcm_ffn_hidden: 32,
            fusion_dim: 32,
            dropout_rate: 0.0,
            backbone_stages: vec![StageSpec::new(4, 2), StageSpec::new(8, 2)],
            ..Self::default()
        }
    }

    /// Read a config from a JSON file and validate it.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ViskGatConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Side length of the token grid (`sqrt(token_count)`).
    pub fn grid(&self) -> usize {
        (self.token_count as f64).sqrt().round() as usize
    }

    /// Spatial side length of the backbone's final feature map, from the
    /// 3x3/pad-1 convolution arithmetic of each stage's leading stride.
    pub fn final_spatial(&self) -> usize {
        let mut s = self.image_size;
        for stage in &self.backbone_stages {
            s = (s - 1) / stage.stride + 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size < 4 {
            return fail(format!("image_size {} too small", self.image_size));
        }
        if self.pose_points == 0 {
            return fail("pose_points must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        let g = self.grid();
        if g * g != self.token_count {
            return fail(format!("token_count {} is not a perfect square", self.token_count));
        }
        if self.fgam_heads == 0 || self.token_dim % self.fgam_heads != 0 {
            return fail(format!(
                "token_dim {} not divisible by fgam_heads {}",
                self.token_dim, self.fgam_heads
            ));
        }
        if self.mgcm_heads == 0 || self.mgcm_dim % self.mgcm_heads != 0 {
            return fail(format!(
                "mgcm_dim {} not divisible by mgcm_heads {}",
                self.mgcm_dim, self.mgcm_heads
            ));
        }
        if self.mgcm_dim % 2 != 0 {
            return fail(format!("mgcm_dim {} must be even", self.mgcm_dim));
        }
        if self.backbone_stages.is_empty() {
            return fail("backbone_stages must not be empty".into());
        }
        if self.backbone_stages.iter().any(|s| s.stride == 0 || s.channels == 0) {
            return fail("backbone stages need nonzero channels and stride".into());
        }
        let last = self.backbone_stages.last().unwrap();
        if last.channels != self.token_dim {
            return fail(format!(
                "final stage channels {} must equal token_dim {}",
                last.channels, self.token_dim
            ));
        }
        if self.final_spatial() < g {
            return fail(format!(
                "backbone map {}x{} cannot pool onto a {g}x{g} token grid",
                self.final_spatial(),
                self.final_spatial()
            ));
        }
        Ok(())
    }
}

// ---- parameter initialization ----

struct Init<'r> {
    rng: &'r mut ErgRng,
}

impl Init<'_> {
    fn uniform<S: Scalar>(&mut self, params: &mut ParamMap<S>, name: &str, shape: Vec<usize>, fan_in: usize) {
        // He-uniform: keeps activation variance roughly constant through
        // ReLU-family layers, so input signal survives the deep stack at
        // initialization instead of being drowned out by the biases.
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        self.rng.fill_uniform(&mut t, -bound, bound);
        params.insert(name.to_string(), t);
    }

    fn zeros<S: Scalar>(&mut self, params: &mut ParamMap<S>, name: &str, shape: Vec<usize>) {
        params.insert(name.to_string(), Tensor::zeros(shape));
    }

    fn ones<S: Scalar>(&mut self, params: &mut ParamMap<S>, name: &str, shape: Vec<usize>) {
        params.insert(name.to_string(), Tensor::full(shape, S::ONE));
    }

    fn norm<S: Scalar>(&mut self, params: &mut ParamMap<S>, prefix: &str, width: usize) {
        self.ones(params, &format!("{prefix}.gamma"), vec![width]);
        self.zeros(params, &format!("{prefix}.beta"), vec![width]);
    }

    fn conv<S: Scalar>(&mut self, params: &mut ParamMap<S>, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.uniform(params, &format!("{prefix}.w"), vec![c_out, c_in, k, k], c_in * k * k);
        self.zeros(params, &format!("{prefix}.b"), vec![c_out]);
    }

    fn attn<S: Scalar>(&mut self, params: &mut ParamMap<S>, prefix: &str, d: usize) {
        for proj in ["wq", "wk", "wv", "wo"] {
            self.uniform(params, &format!("{prefix}.{proj}"), vec![d, d], d);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            self.zeros(params, &format!("{prefix}.{bias}"), vec![d]);
        }
    }

    fn ffn<S: Scalar>(&mut self, params: &mut ParamMap<S>, prefix: &str, d: usize, hidden: usize) {
        self.uniform(params, &format!("{prefix}.w1"), vec![d, hidden], d);
        self.zeros(params, &format!("{prefix}.b1"), vec![hidden]);
        self.uniform(params, &format!("{prefix}.w2"), vec![hidden, d], hidden);
        self.zeros(params, &format!("{prefix}.b2"), vec![d]);
    }

    /// One lightweight transformer block: attention + norm + FFN + norm.
    fn lt_block<S: Scalar>(&mut self, params: &mut ParamMap<S>, prefix: &str, d: usize, hidden: usize) {
        self.attn(params, &format!("{prefix}.attn"), d);
        self.norm(params, &format!("{prefix}.ln1"), d);
        self.ffn(params, &format!("{prefix}.ffn"), d, hidden);
        self.norm(params, &format!("{prefix}.ln2"), d);
    }
}

/// Draw a fresh parameter set for `cfg`: fan-in-scaled uniform weights,
/// zero biases, identity norm affines. Deterministic given the rng state.
pub fn init_params<S: Scalar>(cfg: &ViskGatConfig, rng: &mut ErgRng) -> Result<ParamMap<S>> {
    cfg.validate()?;
    let mut params = ParamMap::new();
    let mut init = Init { rng };
    let p = &mut params;

    let mut c_in = 3;
    for (si, stage) in cfg.backbone_stages.iter().enumerate() {
        for bi in 0..2 {
            let prefix = format!("backbone.s{si}.b{bi}");
            let stride = if bi == 0 { stage.stride } else { 1 };
            init.norm(p, &format!("{prefix}.ln1"), c_in);
            init.conv(p, &format!("{prefix}.conv1"), stage.channels, c_in, 3);
            init.norm(p, &format!("{prefix}.ln2"), stage.channels);
            init.conv(p, &format!("{prefix}.conv2"), stage.channels, stage.channels, 3);
            if stride != 1 || c_in != stage.channels {
                init.conv(p, &format!("{prefix}.proj"), stage.channels, c_in, 1);
            }
            c_in = stage.channels;
        }
    }

    init.uniform(p, "embed.we", vec![2, cfg.token_dim], 2);
    init.zeros(p, "embed.be", vec![cfg.token_dim]);
    init.lt_block(p, "pose_tf", cfg.token_dim, cfg.fgam_ffn_hidden);

    init.attn(p, "fgam.attn0", cfg.token_dim);
    init.norm(p, "fgam.ln0", cfg.token_dim);
    for li in 0..cfg.fgam_lt_blocks {
        init.lt_block(p, &format!("fgam.lt{li}"), cfg.token_dim, cfg.fgam_ffn_hidden);
    }
    init.ffn(p, "fgam.ffn", cfg.token_dim, cfg.fgam_ffn_hidden);
    init.norm(p, "fgam.lnf", cfg.token_dim);

    let d = cfg.mgcm_dim;
    init.uniform(p, "mgcm.imgproj.w", vec![cfg.token_dim, d], cfg.token_dim);
    init.zeros(p, "mgcm.imgproj.b", vec![d]);
    init.norm(p, "mgcm.imgln", d);
    init.uniform(p, "mgcm.poseproj.w1", vec![cfg.token_dim, d / 2], cfg.token_dim);
    init.zeros(p, "mgcm.poseproj.b1", vec![d / 2]);
    init.uniform(p, "mgcm.poseproj.w2", vec![d / 2, d], d / 2);
    init.zeros(p, "mgcm.poseproj.b2", vec![d]);
    init.attn(p, "mgcm.cross", d);
    for li in 0..cfg.mgcm_layers {
        init.lt_block(p, &format!("mgcm.tf{li}"), 2 * d, cfg.mgcm_ffn_hidden);
    }
    init.uniform(p, "mgcm.fusion.w", vec![2 * d, cfg.fusion_dim], 2 * d);
    init.zeros(p, "mgcm.fusion.b", vec![cfg.fusion_dim]);
    init.norm(p, "mgcm.fusionln", cfg.fusion_dim);

    init.uniform(p, "head.w", vec![cfg.fusion_dim, cfg.num_classes], cfg.fusion_dim);
    init.zeros(p, "head.b", vec![cfg.num_classes]);
    Ok(params)
}

/// Zero the value projection (weights and bias) of the fusion module's
/// cross-attention. With it zeroed, the pose branch cannot influence the
/// joint embedding, which isolates the contribution of pose conditioning.
pub fn zero_value_projection<S: Scalar>(params: &mut ParamMap<S>) -> Result<()> {
    for name in ["mgcm.cross.wv", "mgcm.cross.bv"] {
        let t = params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        for v in t.data_mut() {
            *v = S::ZERO;
        }
    }
    Ok(())
}

// ---- graph builders ----

/// Parameter bindings by name inside one graph.
pub type VarMap<'g, S> = BTreeMap<String, Var<'g, S>>;

/// Bind every parameter into `g`, tracked (`trainable`) or constant.
pub fn bind<'g, S: Scalar>(g: &'g Graph<S>, params: &ParamMap<S>, trainable: bool) -> VarMap<'g, S> {
    params
        .iter()
        .map(|(k, t)| {
            let var = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            (k.clone(), var)
        })
        .collect()
}

fn pv<'g, S: Scalar>(vars: &VarMap<'g, S>, name: &str) -> Result<Var<'g, S>> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
}

fn attn_params<'g, S: Scalar>(vars: &VarMap<'g, S>, prefix: &str) -> Result<AttnParams<'g, S>> {
    Ok(AttnParams {
        wq: pv(vars, &format!("{prefix}.wq"))?,
        bq: pv(vars, &format!("{prefix}.bq"))?,
        wk: pv(vars, &format!("{prefix}.wk"))?,
        bk: pv(vars, &format!("{prefix}.bk"))?,
        wv: pv(vars, &format!("{prefix}.wv"))?,
        bv: pv(vars, &format!("{prefix}.bv"))?,
        wo: pv(vars, &format!("{prefix}.wo"))?,
        bo: pv(vars, &format!("{prefix}.bo"))?,
    })
}

fn ffn_params<'g, S: Scalar>(vars: &VarMap<'g, S>, prefix: &str) -> Result<FfnParams<'g, S>> {
    Ok(FfnParams {
        w1: pv(vars, &format!("{prefix}.w1"))?,
        b1: pv(vars, &format!("{prefix}.b1"))?,
        w2: pv(vars, &format!("{prefix}.w2"))?,
        b2: pv(vars, &format!("{prefix}.b2"))?,
    })
}

fn norm_pair<'g, S: Scalar>(vars: &VarMap<'g, S>, prefix: &str) -> Result<(Var<'g, S>, Var<'g, S>)> {
    Ok((pv(vars, &format!("{prefix}.gamma"))?, pv(vars, &format!("{prefix}.beta"))?))
}

/// Whether dropout masks are sampled during the pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Pre-activation residual block: `x + conv2(relu(ln2(conv1(relu(ln1(x))))))`,
/// with a 1x1 projection shortcut when shape or stride changes. Zeroing the
/// transform weights therefore leaves a projection-free block exactly equal
/// to the identity.
fn residual_block<'g, S: Scalar>(
    x: Var<'g, S>,
    vars: &VarMap<'g, S>,
    prefix: &str,
    stride: usize,
) -> Result<Var<'g, S>> {
    let (g1, b1) = norm_pair(vars, &format!("{prefix}.ln1"))?;
    let (g2, b2) = norm_pair(vars, &format!("{prefix}.ln2"))?;
    let t = x.layer_norm_channels(g1, b1, LN_EPS).relu();
    let t = t
        .conv2d(pv(vars, &format!("{prefix}.conv1.w"))?, stride, 1)
        .add_chan_bias(pv(vars, &format!("{prefix}.conv1.b"))?);
    let t = t.layer_norm_channels(g2, b2, LN_EPS).relu();
    let t = t
        .conv2d(pv(vars, &format!("{prefix}.conv2.w"))?, 1, 1)
        .add_chan_bias(pv(vars, &format!("{prefix}.conv2.b"))?);
    let shortcut = if vars.contains_key(&format!("{prefix}.proj.w")) {
        x.conv2d(pv(vars, &format!("{prefix}.proj.w"))?, stride, 0)
            .add_chan_bias(pv(vars, &format!("{prefix}.proj.b"))?)
    } else {
        x
    };
    Ok(shortcut.add(t))
}

/// Residual encoder: `[3,H,W]` frame to `[token_count, token_dim]` tokens.
/// The final map is average-pooled onto the token grid and flattened
/// row-major, so each token is one spatial cell.
pub fn image_backbone<'g, S: Scalar>(
    img: Var<'g, S>,
    vars: &VarMap<'g, S>,
    cfg: &ViskGatConfig,
) -> Result<Var<'g, S>> {
    let shape = img.shape();
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured [3,{},{}]",
            shape, cfg.image_size, cfg.image_size
        )));
    }
    let mut x = img;
    for si in 0..cfg.backbone_stages.len() {
        for bi in 0..2 {
            let stride = if bi == 0 { cfg.backbone_stages[si].stride } else { 1 };
            x = residual_block(x, vars, &format!("backbone.s{si}.b{bi}"), stride)?;
        }
    }
    let g = cfg.grid();
    let pooled = x.adaptive_avg_pool(g, g);
    Ok(pooled.reshape(&[cfg.token_dim, g * g]).transpose())
}

/// Affine landmark embedding: each `(x, y)` row maps to a token.
pub fn embed_pose<'g, S: Scalar>(pose: Var<'g, S>, vars: &VarMap<'g, S>) -> Result<Var<'g, S>> {
    Ok(pose.matmul(pv(vars, "embed.we")?).add_bias_row(pv(vars, "embed.be")?))
}

/// One lightweight transformer block (post-norm): attention with dropout
/// and residual, then FFN with residual; layer norm after each residual.
fn lt_block<'g, S: Scalar>(
    x: Var<'g, S>,
    vars: &VarMap<'g, S>,
    prefix: &str,
    heads: usize,
    cfg: &ViskGatConfig,
    mode: Mode,
    rng: &mut ErgRng,
    probs: &mut Vec<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    let attn = attn_params(vars, &format!("{prefix}.attn"))?;
    let (a, trace) = mha(x, x, x, heads, &attn)?;
    probs.extend(trace.probs);
    let a = a.dropout(cfg.dropout_rate, mode.is_train(), rng);
    let (g1, b1) = norm_pair(vars, &format!("{prefix}.ln1"))?;
    let x1 = x.add(a).layer_norm(g1, b1, LN_EPS);
    let f = ffn(x1, &ffn_params(vars, &format!("{prefix}.ffn"))?, Activation::Gelu);
    let (g2, b2) = norm_pair(vars, &format!("{prefix}.ln2"))?;
    Ok(x1.add(f).layer_norm(g2, b2, LN_EPS))
}

/// Refine pose tokens with a single lightweight transformer block.
pub fn pose_transformer<'g, S: Scalar>(
    e_pose: Var<'g, S>,
    vars: &VarMap<'g, S>,
    cfg: &ViskGatConfig,
    mode: Mode,
    rng: &mut ErgRng,
    probs: &mut Vec<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    lt_block(e_pose, vars, "pose_tf", cfg.fgam_heads, cfg, mode, rng, probs)
}

/// Image-token refinement stack: multi-head self-attention with residual
/// norm, two lightweight blocks, and a position-wise FFN with residual
/// norm.
pub fn fgam<'g, S: Scalar>(
    f_img: Var<'g, S>,
    vars: &VarMap<'g, S>,
    cfg: &ViskGatConfig,
    mode: Mode,
    rng: &mut ErgRng,
    probs: &mut Vec<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    let attn = attn_params(vars, "fgam.attn0")?;
    let (a, trace) = mha(f_img, f_img, f_img, cfg.fgam_heads, &attn)?;
    probs.extend(trace.probs);
    let (g0, b0) = norm_pair(vars, "fgam.ln0")?;
    let mut x = f_img.add(a).layer_norm(g0, b0, LN_EPS);
    for li in 0..cfg.fgam_lt_blocks {
        x = lt_block(x, vars, &format!("fgam.lt{li}"), cfg.fgam_heads, cfg, mode, rng, probs)?;
    }
    let f = ffn(x, &ffn_params(vars, "fgam.ffn")?, Activation::Gelu);
    let (gf, bf) = norm_pair(vars, "fgam.lnf")?;
    Ok(x.add(f).layer_norm(gf, bf, LN_EPS))
}

/// Intermediate products of the fusion module, exposed for invariant and
/// ablation tests.
pub struct MgcmOut<'g, S: Scalar> {
    /// Projected image tokens, `[token_count, mgcm_dim]`.
    pub fp_img: Var<'g, S>,
    /// Projected pose tokens, `[pose_points, mgcm_dim]`.
    pub fp_pose: Var<'g, S>,
    /// Cross-attention output, `[token_count, mgcm_dim]`.
    pub f_attn: Var<'g, S>,
    /// Pooled fusion token, `[1, 2*mgcm_dim]`.
    pub f_fused: Var<'g, S>,
    /// Joint embedding row, `[1, fusion_dim]`.
    pub f_corr_row: Var<'g, S>,
}

/// Fusion module: project both token sets to a shared width, attend image
/// queries over pose keys/values, concatenate and mean-pool to a single
/// token, refine it, and emit the joint embedding.
pub fn mgcm<'g, S: Scalar>(
    fhat_img: Var<'g, S>,
    f_pose: Var<'g, S>,
    vars: &VarMap<'g, S>,
    cfg: &ViskGatConfig,
    mode: Mode,
    rng: &mut ErgRng,
    probs: &mut Vec<Var<'g, S>>,
) -> Result<MgcmOut<'g, S>> {
    let (gi, bi) = norm_pair(vars, "mgcm.imgln")?;
    let fp_img = fhat_img
        .matmul(pv(vars, "mgcm.imgproj.w")?)
        .add_bias_row(pv(vars, "mgcm.imgproj.b")?)
        .layer_norm(gi, bi, LN_EPS)
        .gelu();
    let fp_pose = f_pose
        .matmul(pv(vars, "mgcm.poseproj.w1")?)
        .add_bias_row(pv(vars, "mgcm.poseproj.b1")?)
        .gelu()
        .matmul(pv(vars, "mgcm.poseproj.w2")?)
        .add_bias_row(pv(vars, "mgcm.poseproj.b2")?);
    let cross = attn_params(vars, "mgcm.cross")?;
    let (f_attn, trace) = mha(fp_img, fp_pose, fp_pose, cfg.mgcm_heads, &cross)?;
    probs.extend(trace.probs);
    let f_fused = fp_img.concat_cols(f_attn).mean_rows();
    let mut t = f_fused;
    for li in 0..cfg.mgcm_layers {
        t = lt_block(t, vars, &format!("mgcm.tf{li}"), cfg.mgcm_heads, cfg, mode, rng, probs)?;
    }
    let (gf, bf) = norm_pair(vars, "mgcm.fusionln")?;
    let f_corr_row = t
        .matmul(pv(vars, "mgcm.fusion.w")?)
        .add_bias_row(pv(vars, "mgcm.fusion.b")?)
        .layer_norm(gf, bf, LN_EPS)
        .gelu();
    Ok(MgcmOut { fp_img, fp_pose, f_attn, f_fused, f_corr_row })
}

/// Linear head over the joint embedding row: `[1, fusion_dim] -> [1, classes]`.
pub fn classify<'g, S: Scalar>(f_corr_row: Var<'g, S>, vars: &VarMap<'g, S>) -> Result<Var<'g, S>> {
    Ok(f_corr_row.matmul(pv(vars, "head.w")?).add_bias_row(pv(vars, "head.b")?))
}

/// Everything a full forward pass produces, kept as graph handles so both
/// values and gradients are reachable.
pub struct Forward<'g, S: Scalar> {
    /// Backbone tokens, `[token_count, token_dim]`.
    pub f_img: Var<'g, S>,
    /// Embedded pose tokens, `[pose_points, token_dim]`.
    pub e_pose: Var<'g, S>,
    /// Refined pose tokens, `[pose_points, token_dim]`.
    pub f_pose: Var<'g, S>,
    /// Refined image tokens, `[token_count, token_dim]`.
    pub fhat_img: Var<'g, S>,
    /// Fusion-module intermediates.
    pub mgcm: MgcmOut<'g, S>,
    /// Joint embedding, `[fusion_dim]`.
    pub f_corr: Var<'g, S>,
    /// Logits as a row, `[1, num_classes]` (used for loss terms).
    pub logits_row: Var<'g, S>,
    /// Logits, `[num_classes]`.
    pub logits: Var<'g, S>,
    /// Softmax probabilities, `[num_classes]`.
    pub probs: Var<'g, S>,
    /// Every attention probability matrix in the pass, one per head per
    /// attention layer; each is row-stochastic.
    pub attn_probs: Vec<Var<'g, S>>,
}

/// Run the full network on one sample. `img` is `[3,H,W]` with values in
/// `[0,1]`; `pose` is `[pose_points, 2]` normalized coordinates. `rng` is
/// consumed only by train-mode dropout.
pub fn forward<'g, S: Scalar>(
    g: &'g Graph<S>,
    img: &Tensor<S>,
    pose: &Tensor<S>,
    vars: &VarMap<'g, S>,
    cfg: &ViskGatConfig,
    mode: Mode,
    rng: &mut ErgRng,
) -> Result<Forward<'g, S>> {
    if pose.shape() != [cfg.pose_points, 2] {
        return Err(Error::Config(format!(
            "pose shape {:?} does not match configured [{},2]",
            pose.shape(),
            cfg.pose_points
        )));
    }
    if pose.data().iter().any(|v| {
        let x = v.to_f64();
        !(0.0..=1.0).contains(&x)
    }) {
        return Err(Error::Value("pose coordinates must lie in [0,1]".into()));
    }
    let img_var = g.constant(img.clone());
    let pose_var = g.constant(pose.clone());
    let mut probs_acc = Vec::new();

    let f_img = image_backbone(img_var, vars, cfg)?;
    let fhat_img = fgam(f_img, vars, cfg, mode, rng, &mut probs_acc)?;
    let e_pose = embed_pose(pose_var, vars)?;
    let f_pose = pose_transformer(e_pose, vars, cfg, mode, rng, &mut probs_acc)?;
    let mg = mgcm(fhat_img, f_pose, vars, cfg, mode, rng, &mut probs_acc)?;
    let logits_row = classify(mg.f_corr_row, vars)?;
    let f_corr = mg.f_corr_row.reshape(&[cfg.fusion_dim]);
    let probs = logits_row.softmax_rows().reshape(&[cfg.num_classes]);
    let logits = logits_row.reshape(&[cfg.num_classes]);
    Ok(Forward {
        f_img,
        e_pose,
        f_pose,
        fhat_img,
        mgcm: mg,
        f_corr,
        logits_row,
        logits,
        probs,
        attn_probs: probs_acc,
    })
}

/// Inference convenience: eval-mode forward with constant parameters.
/// Returns `(logits, probabilities)`.
pub fn predict<S: Scalar>(
    img: &Tensor<S>,
    pose: &Tensor<S>,
    params: &ParamMap<S>,
    cfg: &ViskGatConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let g = Graph::new();
    let vars = bind(&g, params, false);
    let mut rng = ErgRng::seed(0);
    let out = forward(&g, img, pose, &vars, cfg, Mode::Eval, &mut rng)?;
    Ok((out.logits.value(), out.probs.value()))
}

/// Pose matrix from a skeleton: row `i` holds landmark `i`'s `(x, y)`;
/// absent landmarks contribute `(0, 0)`.
pub fn pose_input<S: Scalar>(s: &Skeleton) -> Tensor<S> {
    let mut data = Vec::with_capacity(LANDMARK_COUNT * 2);
    for i in 0..LANDMARK_COUNT {
        match s.get(i) {
            Some(lm) => {
                data.push(S::from_f64(lm.x));
                data.push(S::from_f64(lm.y));
            }
            None => {
                data.push(S::ZERO);
                data.push(S::ZERO);
            }
        }
    }
    Tensor::new(vec![LANDMARK_COUNT, 2], data)
}

/// Image tensor from interleaved 8-bit RGB: planes scaled to `[0,1]`.
pub fn image_input<S: Scalar>(rgb: &[u8], width: usize, height: usize) -> Tensor<S> {
    assert_eq!(rgb.len(), 3 * width * height, "shape error: rgb buffer length");
    let mut data = vec![S::ZERO; 3 * width * height];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(c * height + y) * width + x] =
                    S::from_f64(rgb[(y * width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Finite-difference validation of the whole network at `cfg`: draws a
/// seeded random sample, computes analytic gradients of a one-hot
/// cross-entropy in 64-bit, and compares up to `max_coords` coordinates
/// per parameter tensor against central differences with step `h`.
pub fn grad_check_model(
    cfg: &ViskGatConfig,
    max_coords: usize,
    h: f64,
    seed: u64,
) -> Result<crate::autodiff::GradCheckReport> {
    use crate::autodiff::{eval_with_grads, finite_diff_check, loss_builder};
    cfg.validate()?;
    let mut rng = ErgRng::seed(seed);
    let params: ParamMap<f64> = init_params(cfg, &mut rng)?;
    let mut img = Tensor::<f64>::zeros(vec![3, cfg.image_size, cfg.image_size]);
    rng.fill_uniform(&mut img, 0.0, 1.0);
    let mut pose = Tensor::<f64>::zeros(vec![cfg.pose_points, 2]);
    rng.fill_uniform(&mut pose, 0.0, 1.0);
    let target = 3 % cfg.num_classes;

    let build = loss_builder(|g, vars| {
        let mut fwd_rng = ErgRng::seed(0);
        let out = forward(g, &img, &pose, vars, cfg, Mode::Eval, &mut fwd_rng)
            .expect("forward on self-generated inputs");
        let mut onehot = Tensor::zeros(vec![1, cfg.num_classes]);
        onehot.data_mut()[target] = 1.0;
        out.logits_row
            .log_softmax_rows()
            .hadamard(g.constant(onehot))
            .sum()
            .scale(-1.0)
    });
    let (loss, grads) = eval_with_grads(&params, build)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} during gradient check")));
    }
    let mut check_rng = ErgRng::seed(seed ^ 0x5EED_CAFE);
    Ok(finite_diff_check(
        &params,
        &grads,
        &mut |p| eval_with_grads(p, build).expect("re-evaluation with nudged parameters").0,
        h,
        max_coords,
        &mut check_rng,
    ))
}
