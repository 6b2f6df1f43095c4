//! Vision-transformer backbones.
//!
//! [`ChannelVit`] tokenizes every band independently with one shared,
//! bias-free patch projection and adds positional and channel embeddings, so a
//! sequence holds `C·N_p + 1` tokens. [`FixedChannelVit`] is the conventional
//! baseline whose patch embedding concatenates a fixed number of channels.
//! Both sit behind the [`Backbone`] trait and are created by name through a
//! [`BackboneRegistry`].
//!
//! Token matrices are `N×D` with the CLS token in row 0, followed by one block
//! of `N_p` rows per channel (raster order within each block).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bands::{BandId, ChannelStack};
use crate::error::{shape_err, Error, Result};
use crate::numeric::bundle::{load_bundle, save_bundle};
use crate::numeric::{Bound, ParamSet, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Input channels of the fixed-channel baseline; ignored by the channel ViT.
    pub in_channels: usize,
    /// One patch projection for every band (channel ViT); false gives one per band.
    pub shared_projection: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            in_channels: 3,
            shared_projection: true,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::Parameter("ViT sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Parameter(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    /// Patches per side of the positional-embedding grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Four layer indices (into the `depth + 1` representation sets) used by
    /// dense heads, evenly spaced and ending at the last block.
    pub fn default_feature_layers(&self) -> Result<[usize; 4]> {
        let l = self.depth;
        if l < 3 {
            return Err(Error::Parameter(format!(
                "dense heads need 4 distinct layers; depth {l} gives only {}",
                l + 1
            )));
        }
        let pick = |k: usize| (k * l + 2) / 4;
        let idx = if l >= 4 {
            [pick(1), pick(2), pick(3), l]
        } else {
            [0, 1, 2, 3]
        };
        Ok(idx)
    }
}

/// What a token of an encoded sequence stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMeta {
    Cls,
    /// `band` is `None` for tokens that mix all channels (fixed-channel ViT).
    Patch { band: Option<BandId>, spatial: usize },
}

/// A tokenized input: `tokens` has one row per entry of `meta`.
pub struct TokenSequence {
    pub tokens: Var,
    pub meta: Vec<TokenMeta>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeOptions {
    /// Top-left offset (in patches) of the positional-embedding window; local
    /// crops use the window under their location.
    pub pos_offset: (usize, usize),
    /// Spatial patches whose patch embedding is replaced by the mask token
    /// (for every channel at that location).
    pub mask: Option<Vec<bool>>,
}

/// Every layer's token representations for one input.
pub struct Encoded {
    /// `depth + 1` matrices of shape `N×D`: the embedded tokens, then each block's output.
    pub layers: Vec<Var>,
    /// Final-normed last layer.
    pub output: Var,
    /// Band of each channel block; a single `None` block for fixed-channel models.
    pub blocks: Vec<Option<BandId>>,
    pub grid: (usize, usize),
}

impl Encoded {
    pub fn num_spatial(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.blocks.len() * self.num_spatial()
    }

    /// Row of token `(block, spatial)` in the token matrices.
    pub fn row(&self, block: usize, spatial: usize) -> usize {
        1 + block * self.num_spatial() + spatial
    }
}

/// Final-layer CLS token (1×D).
pub fn cls_representation(tape: &mut Tape, enc: &Encoded) -> Result<Var> {
    tape.slice_rows(enc.output, 0, 1)
}

/// Final-layer patch tokens (`blocks·N_p` × D).
pub fn patch_representations(tape: &mut Tape, enc: &Encoded) -> Result<Var> {
    let n = enc.num_tokens() - 1;
    tape.slice_rows(enc.output, 1, n)
}

/// For each requested layer, the patch tokens averaged over channel blocks:
/// an `N_p × D` matrix whose rows are spatial patches in raster order.
pub fn spatial_feature_maps(tape: &mut Tape, enc: &Encoded, layers: &[usize]) -> Result<Vec<Var>> {
    if layers.len() != 4 {
        return Err(Error::Parameter(format!("expected 4 layer indices, got {}", layers.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &l in layers {
        if l >= enc.layers.len() || !seen.insert(l) {
            return Err(Error::Parameter(format!(
                "layer index {l} invalid or repeated (valid 0..{})",
                enc.layers.len() - 1
            )));
        }
    }
    let groups: Vec<Vec<usize>> = (0..enc.num_spatial())
        .map(|j| (0..enc.blocks.len()).map(|b| enc.row(b, j)).collect())
        .collect();
    layers
        .iter()
        .map(|&l| tape.group_mean_rows(enc.layers[l], groups.clone()))
        .collect()
}

/// A backbone architecture: parameters plus a forward pass recorded on a tape.
pub trait Backbone: Send + Sync {
    /// Registry name of the architecture.
    fn kind(&self) -> &'static str;
    fn config(&self) -> &VitConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Forward pass; `bound` must come from `self.params().bind(..)`.
    fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stack: &ChannelStack,
        opts: &EncodeOptions,
    ) -> Result<Encoded>;

    /// A copy that accepts `bands` as training input.
    fn for_training(&self, bands: &[BandId]) -> Result<Box<dyn Backbone>>;

    /// A copy of a model fine-tuned on `train` that accepts `test` at inference.
    fn for_testing(&self, train: &[BandId], test: &[BandId]) -> Result<Box<dyn Backbone>>;

    fn clone_box(&self) -> Box<dyn Backbone>;

    /// Architecture-specific fields stored in checkpoint metadata.
    fn extra_meta(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

// ---------------------------------------------------------------------------
// Shared transformer pieces

fn init_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let std = (1.0 / fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn init_norm(p: &mut ParamSet, name: &str, dim: usize) {
    p.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

fn init_encoder(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &VitConfig) {
    let d = cfg.dim;
    for i in 0..cfg.depth {
        init_norm(p, &format!("blk{i}.ln1"), d);
        init_linear(p, rng, &format!("blk{i}.qkv"), d, 3 * d);
        init_linear(p, rng, &format!("blk{i}.proj"), d, d);
        init_norm(p, &format!("blk{i}.ln2"), d);
        init_linear(p, rng, &format!("blk{i}.fc1"), d, cfg.mlp_ratio * d);
        init_linear(p, rng, &format!("blk{i}.fc2"), cfg.mlp_ratio * d, d);
    }
    init_norm(p, "norm", d);
}

pub fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn norm(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = bound.get(&format!("{name}.g"))?;
    let b = bound.get(&format!("{name}.b"))?;
    let n = tape.layer_norm(x, LN_EPS)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

fn attention(tape: &mut Tape, bound: &Bound, cfg: &VitConfig, i: usize, x: Var) -> Result<Var> {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let qkv = linear(tape, bound, &format!("blk{i}.qkv"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1.0)?;
        heads.push(tape.matmul(a, v)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, bound, &format!("blk{i}.proj"), o)
}

/// Pre-norm transformer; returns the input and every block output, plus the final norm.
fn run_encoder(tape: &mut Tape, bound: &Bound, cfg: &VitConfig, x0: Var) -> Result<(Vec<Var>, Var)> {
    let mut layers = Vec::with_capacity(cfg.depth + 1);
    layers.push(x0);
    let mut x = x0;
    for i in 0..cfg.depth {
        let h = norm(tape, bound, &format!("blk{i}.ln1"), x)?;
        let a = attention(tape, bound, cfg, i, h)?;
        x = tape.add(x, a)?;
        let h = norm(tape, bound, &format!("blk{i}.ln2"), x)?;
        let h = linear(tape, bound, &format!("blk{i}.fc1"), h)?;
        let h = tape.gelu(h);
        let h = linear(tape, bound, &format!("blk{i}.fc2"), h)?;
        x = tape.add(x, h)?;
        layers.push(x);
    }
    let out = norm(tape, bound, "norm", x)?;
    Ok((layers, out))
}

/// Checks divisibility and the positional window; returns `(gh, gw)`.
fn patch_grid(cfg: &VitConfig, stack: &ChannelStack, opts: &EncodeOptions) -> Result<(usize, usize)> {
    let p = cfg.patch;
    if stack.height % p != 0 || stack.width % p != 0 {
        return shape_err(format!(
            "image {}x{} not divisible by patch size {p}",
            stack.height, stack.width
        ));
    }
    let (gh, gw) = (stack.height / p, stack.width / p);
    let g = cfg.grid();
    if opts.pos_offset.0 + gh > g || opts.pos_offset.1 + gw > g {
        return shape_err(format!(
            "{gh}x{gw} patches at offset {:?} exceed the {g}x{g} positional grid",
            opts.pos_offset
        ));
    }
    if let Some(m) = &opts.mask {
        if m.len() != gh * gw {
            return shape_err(format!("mask has {} entries for {} patches", m.len(), gh * gw));
        }
    }
    Ok((gh, gw))
}

fn pos_ids(cfg: &VitConfig, grid: (usize, usize), offset: (usize, usize)) -> Vec<usize> {
    let g = cfg.grid();
    let mut ids = Vec::with_capacity(grid.0 * grid.1);
    for y in 0..grid.0 {
        for x in 0..grid.1 {
            ids.push((offset.0 + y) * g + offset.1 + x);
        }
    }
    ids
}

/// Flattened `P×P` patch `(py, px)` of a plane.
fn extract_patch(plane: &[f64], width: usize, p: usize, py: usize, px: usize, out: &mut Vec<f64>) {
    for r in 0..p {
        let start = (py * p + r) * width + px * p;
        out.extend_from_slice(&plane[start..start + p]);
    }
}

// ---------------------------------------------------------------------------
// Channel ViT

#[derive(Clone, Debug)]
pub struct ChannelVit {
    config: VitConfig,
    params: ParamSet,
}

impl ChannelVit {
    pub const KIND: &'static str = "chivit";

    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, pp) = (config.dim, config.patch * config.patch);
        let mut p = ParamSet::new();
        let rows = if config.shared_projection { pp } else { pp * BandId::ALL.len() };
        p.insert("tok.proj", Tensor::randn(&[rows, d], (1.0 / pp as f64).sqrt(), &mut rng));
        p.insert("tok.pos", Tensor::randn(&[config.num_patches(), d], 0.02, &mut rng));
        p.insert("tok.chn", Tensor::randn(&[BandId::ALL.len(), d], 0.02, &mut rng));
        p.insert("tok.cls", Tensor::randn(&[1, d], 0.02, &mut rng));
        p.insert("tok.mask", Tensor::randn(&[1, d], 0.02, &mut rng));
        init_encoder(&mut p, &mut rng, &config);
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: VitConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        check_param_shapes(&reference.params, &params)?;
        Ok(Self { config, params })
    }

    /// Token sequence before the encoder: `W·x_{c,j} + e^pos_j + e^chn_c`, CLS first.
    pub fn tokenize(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stack: &ChannelStack,
        opts: &EncodeOptions,
    ) -> Result<TokenSequence> {
        let cfg = &self.config;
        let (gh, gw) = patch_grid(cfg, stack, opts)?;
        let np = gh * gw;
        let p = cfg.patch;
        let c = stack.channels();
        let mut x = Vec::with_capacity(c * np * p * p);
        for plane in &stack.planes {
            for py in 0..gh {
                for px in 0..gw {
                    extract_patch(plane, stack.width, p, py, px, &mut x);
                }
            }
        }
        let x = tape.constant(Tensor::new(vec![c * np, p * p], x)?);
        let proj = bound.get("tok.proj")?;
        let mut emb = if cfg.shared_projection {
            tape.matmul(x, proj)?
        } else {
            let mut parts = Vec::with_capacity(c);
            for (i, b) in stack.bands.iter().enumerate() {
                let xc = tape.slice_rows(x, i * np, np)?;
                let wc = tape.slice_rows(proj, b.index() * p * p, p * p)?;
                parts.push(tape.matmul(xc, wc)?);
            }
            tape.concat_rows(&parts)?
        };
        if let Some(m) = &opts.mask {
            let slots: Vec<bool> = (0..c).flat_map(|_| m.iter().copied()).collect();
            if slots.iter().any(|&b| b) {
                emb = tape.replace_rows(emb, bound.get("tok.mask")?, &slots)?;
            }
        }
        let grid_ids = pos_ids(cfg, (gh, gw), opts.pos_offset);
        let pos_rows: Vec<usize> = (0..c).flat_map(|_| grid_ids.iter().copied()).collect();
        let pos = tape.gather_rows(bound.get("tok.pos")?, &pos_rows)?;
        let chn_rows: Vec<usize> = stack
            .bands
            .iter()
            .flat_map(|b| std::iter::repeat(b.index()).take(np))
            .collect();
        let chn = tape.gather_rows(bound.get("tok.chn")?, &chn_rows)?;
        let t = tape.add(emb, pos)?;
        let t = tape.add(t, chn)?;
        let tokens = tape.concat_rows(&[bound.get("tok.cls")?, t])?;
        let mut meta = vec![TokenMeta::Cls];
        for &b in &stack.bands {
            meta.extend((0..np).map(|j| TokenMeta::Patch {
                band: Some(b),
                spatial: j,
            }));
        }
        Ok(TokenSequence { tokens, meta })
    }
}

impl Backbone for ChannelVit {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn config(&self) -> &VitConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stack: &ChannelStack,
        opts: &EncodeOptions,
    ) -> Result<Encoded> {
        let grid = patch_grid(&self.config, stack, opts)?;
        let seq = self.tokenize(tape, bound, stack, opts)?;
        let (layers, output) = run_encoder(tape, bound, &self.config, seq.tokens)?;
        Ok(Encoded {
            layers,
            output,
            blocks: stack.bands.iter().map(|&b| Some(b)).collect(),
            grid,
        })
    }

    fn for_training(&self, _bands: &[BandId]) -> Result<Box<dyn Backbone>> {
        Ok(self.clone_box())
    }

    fn for_testing(&self, _train: &[BandId], _test: &[BandId]) -> Result<Box<dyn Backbone>> {
        Ok(self.clone_box())
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// Fixed-channel ViT

/// Per-channel view of a concatenated patch-embedding weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedChannelPatchEmbed {
    pub patch: usize,
    /// One `(P²)×D` block per input channel.
    pub blocks: Vec<Tensor>,
    pub bias: Option<Tensor>,
}

impl FixedChannelPatchEmbed {
    pub fn channels(&self) -> usize {
        self.blocks.len()
    }

    /// Embedding of one spatial patch given `channels()` flattened patches.
    pub fn apply(&self, patches: &[Vec<f64>]) -> Result<Vec<f64>> {
        if patches.len() != self.blocks.len() {
            return shape_err(format!(
                "{} channel patches for {} blocks",
                patches.len(),
                self.blocks.len()
            ));
        }
        let d = self.blocks[0].shape()[1];
        let mut out = match &self.bias {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; d],
        };
        for (x, w) in patches.iter().zip(&self.blocks) {
            let x = Tensor::new(vec![1, x.len()], x.clone())?;
            let y = x.matmul(w)?;
            out.iter_mut().zip(y.data()).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct FixedChannelVit {
    config: VitConfig,
    params: ParamSet,
    /// When false, a test channel count different from training is rejected.
    pub adapt_at_test: bool,
}

impl FixedChannelVit {
    pub const KIND: &'static str = "fixed-vit";

    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.in_channels == 0 {
            return Err(Error::Parameter("fixed-channel ViT needs in_channels >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, pp) = (config.dim, config.patch * config.patch);
        let fan_in = pp * config.in_channels;
        let mut p = ParamSet::new();
        p.insert("patch.w", Tensor::randn(&[fan_in, d], (1.0 / fan_in as f64).sqrt(), &mut rng));
        p.insert("patch.b", Tensor::zeros(&[d]));
        p.insert("tok.pos", Tensor::randn(&[config.num_patches(), d], 0.02, &mut rng));
        p.insert("tok.cls", Tensor::randn(&[1, d], 0.02, &mut rng));
        p.insert("tok.mask", Tensor::randn(&[1, d], 0.02, &mut rng));
        init_encoder(&mut p, &mut rng, &config);
        Ok(Self {
            config,
            params: p,
            adapt_at_test: true,
        })
    }

    pub fn from_params(config: VitConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        check_param_shapes(&reference.params, &params)?;
        Ok(Self {
            config,
            params,
            adapt_at_test: true,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn patch_embed(&self) -> FixedChannelPatchEmbed {
        let w = self.params.get("patch.w").expect("patch weight");
        let pp = self.config.patch * self.config.patch;
        let d = self.config.dim;
        let blocks = w
            .data()
            .chunks(pp * d)
            .map(|c| Tensor::new(vec![pp, d], c.to_vec()).expect("block shape"))
            .collect();
        FixedChannelPatchEmbed {
            patch: self.config.patch,
            blocks,
            bias: self.params.get("patch.b").ok().cloned(),
        }
    }

    /// Replaces the patch embedding (and so the input channel count).
    pub fn with_patch_embed(&self, embed: &FixedChannelPatchEmbed) -> Result<Self> {
        let pp = self.config.patch * self.config.patch;
        if embed.patch != self.config.patch
            || embed.blocks.iter().any(|b| b.shape() != [pp, self.config.dim])
            || embed.blocks.is_empty()
        {
            return shape_err("patch embedding does not match the model");
        }
        let mut out = self.clone();
        let data: Vec<f64> = embed.blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
        out.params
            .insert("patch.w", Tensor::new(vec![embed.channels() * pp, self.config.dim], data)?);
        if let Some(b) = &embed.bias {
            out.params.insert("patch.b", b.clone());
        }
        out.config.in_channels = embed.channels();
        Ok(out)
    }

    /// The model with its first layer adapted to `channels` inputs: the
    /// three-to-four case appends a mean block, every other change
    /// averages and replicates.
    pub fn adapted_to(&self, channels: usize) -> Result<Self> {
        let c = self.in_channels();
        if channels == c {
            return Ok(self.clone());
        }
        let embed = self.patch_embed();
        let new = if c == 3 && channels == 4 {
            crate::adapt::adapt_rgbn_fourth_mean(&embed)?
        } else {
            crate::adapt::adapt_average_replicate(&embed, channels)?
        };
        self.with_patch_embed(&new)
    }
}

impl Backbone for FixedChannelVit {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn config(&self) -> &VitConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stack: &ChannelStack,
        opts: &EncodeOptions,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        if stack.channels() != cfg.in_channels {
            return Err(Error::Contract(format!(
                "fixed-channel ViT expects {} channels, got {}",
                cfg.in_channels,
                stack.channels()
            )));
        }
        let (gh, gw) = patch_grid(cfg, stack, opts)?;
        let p = cfg.patch;
        let mut x = Vec::with_capacity(gh * gw * p * p * stack.channels());
        for py in 0..gh {
            for px in 0..gw {
                for plane in &stack.planes {
                    extract_patch(plane, stack.width, p, py, px, &mut x);
                }
            }
        }
        let x = tape.constant(Tensor::new(vec![gh * gw, p * p * stack.channels()], x)?);
        let mut emb = linear(tape, bound, "patch", x)?;
        if let Some(m) = &opts.mask {
            if m.iter().any(|&b| b) {
                emb = tape.replace_rows(emb, bound.get("tok.mask")?, m)?;
            }
        }
        let pos = tape.gather_rows(bound.get("tok.pos")?, &pos_ids(cfg, (gh, gw), opts.pos_offset))?;
        let t = tape.add(emb, pos)?;
        let tokens = tape.concat_rows(&[bound.get("tok.cls")?, t])?;
        let (layers, output) = run_encoder(tape, bound, cfg, tokens)?;
        Ok(Encoded {
            layers,
            output,
            blocks: vec![None],
            grid: (gh, gw),
        })
    }

    fn for_training(&self, bands: &[BandId]) -> Result<Box<dyn Backbone>> {
        Ok(Box::new(self.adapted_to(bands.len())?))
    }

    fn for_testing(&self, train: &[BandId], test: &[BandId]) -> Result<Box<dyn Backbone>> {
        if test.len() != self.in_channels() && !self.adapt_at_test {
            return Err(Error::UnsupportedCell(format!(
                "fixed-channel model trained on {} channels cannot take {} without adaptation",
                train.len(),
                test.len()
            )));
        }
        Ok(Box::new(self.adapted_to(test.len())?))
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }

    fn extra_meta(&self) -> serde_json::Value {
        json!({ "adapt_at_test": self.adapt_at_test })
    }
}

fn check_param_shapes(reference: &ParamSet, got: &ParamSet) -> Result<()> {
    for (name, t) in reference.iter() {
        let g = got.get(name).map_err(|_| Error::Format(format!("checkpoint lacks {name}")))?;
        if g.shape() != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint {name} has shape {:?}, expected {:?}",
                g.shape(),
                t.shape()
            )));
        }
    }
    if got.len() != reference.len() {
        return Err(Error::Format("checkpoint has unexpected tensors".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Registry and checkpoints

pub type BackboneCtor = fn(&VitConfig, u64) -> Result<Box<dyn Backbone>>;
pub type BackboneLoader = fn(VitConfig, ParamSet, &serde_json::Value) -> Result<Box<dyn Backbone>>;

struct BackboneEntry {
    create: BackboneCtor,
    load: BackboneLoader,
}

/// Backbone architectures by name.
pub struct BackboneRegistry {
    entries: BTreeMap<String, BackboneEntry>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(
            ChannelVit::KIND,
            |c, s| Ok(Box::new(ChannelVit::new(c.clone(), s)?)),
            |c, p, _| Ok(Box::new(ChannelVit::from_params(c, p)?)),
        );
        r.register(
            FixedChannelVit::KIND,
            |c, s| Ok(Box::new(FixedChannelVit::new(c.clone(), s)?)),
            |c, p, extra| {
                let mut m = FixedChannelVit::from_params(c, p)?;
                if let Some(a) = extra.get("adapt_at_test").and_then(|v| v.as_bool()) {
                    m.adapt_at_test = a;
                }
                Ok(Box::new(m))
            },
        );
        r
    }
}

impl BackboneRegistry {
    pub fn register(&mut self, name: &str, create: BackboneCtor, load: BackboneLoader) {
        self.entries.insert(name.to_string(), BackboneEntry { create, load });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn entry(&self, name: &str) -> Result<&BackboneEntry> {
        self.entries.get(name).ok_or_else(|| Error::UnknownName {
            kind: "backbone",
            name: name.to_string(),
        })
    }

    pub fn create(&self, name: &str, config: &VitConfig, seed: u64) -> Result<Box<dyn Backbone>> {
        (self.entry(name)?.create)(config, seed)
    }

    pub fn from_params(
        &self,
        name: &str,
        config: VitConfig,
        params: ParamSet,
        extra: &serde_json::Value,
    ) -> Result<Box<dyn Backbone>> {
        (self.entry(name)?.load)(config, params, extra)
    }

    pub fn load(&self, path: &Path) -> Result<Box<dyn Backbone>> {
        let (params, meta) = load_bundle(path)?;
        let kind = meta
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::Format("checkpoint meta lacks \"kind\"".into()))?;
        let config: VitConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint meta lacks \"config\"".into()))?,
        )?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        self.from_params(kind, config, params, &extra)
    }
}

pub fn backbone_meta(b: &dyn Backbone) -> serde_json::Value {
    json!({ "kind": b.kind(), "config": b.config(), "extra": b.extra_meta() })
}

pub fn save_backbone(path: &Path, b: &dyn Backbone) -> Result<()> {
    save_bundle(path, b.params(), backbone_meta(b))
}

/// Forward pass with parameters bound as constants; for evaluation.
pub fn encode_frozen(
    backbone: &dyn Backbone,
    stack: &ChannelStack,
    opts: &EncodeOptions,
) -> Result<(Tape, Encoded)> {
    let mut tape = Tape::new();
    let bound = backbone.params().bind(&mut tape, false);
    let enc = backbone.encode(&mut tape, &bound, stack, opts)?;
    Ok((tape, enc))
}

/// Final-layer CLS vector without recording gradients.
pub fn cls_vector(backbone: &dyn Backbone, stack: &ChannelStack) -> Result<Vec<f64>> {
    let (mut tape, enc) = encode_frozen(backbone, stack, &EncodeOptions::default())?;
    let cls = cls_representation(&mut tape, &enc)?;
    Ok(tape.value(cls).data().to_vec())
}
