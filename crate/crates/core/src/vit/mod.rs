//! Tiny DeiT-style vision transformer with a classification token.
//!
//! Weights are stored as plain buffers ([`Param`]) so a frozen model can be
//! shared freely; a forward pass first binds them as graph leaves
//! ([`ViTModel::bind`]) and then runs on the bound copy.

mod checkpoint;
mod train;

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{numel, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointContents};
pub use train::{cross_entropy, train_toy_model, TrainConfig, TrainReport};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.image_size,
            self.patch_size,
            self.in_channels,
            self.embed_dim,
            self.num_heads,
            self.num_blocks,
            self.mlp_ratio,
            self.num_classes,
        ];
        if fields.contains(&0) {
            return Err(Error::Invalid("ViT config fields must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Side of the square patch grid, `sqrt(N - 1)`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the classification token.
    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }
}

/// A stored weight buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(shape.to_vec(), vec![v; numel(shape)])
    }

    fn normal(shape: &[usize], std: f64, rng: &mut rng::Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self::new(shape.to_vec(), (0..numel(shape)).map(|_| dist.sample(rng)).collect())
    }
}

/// `y = x W + b`, with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    /// Fused query/key/value projection, `[D, 3D]`.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Every weight of the network, generic over storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
}

impl<T> Linear<T> {
    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<Linear<U>> {
        Ok(Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> Norm<T> {
    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<Norm<U>> {
        Ok(Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma)?,
            beta: f(&format!("{prefix}.beta"), &self.beta)?,
        })
    }
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

impl<T> Block<T> {
    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<Block<U>> {
        Ok(Block {
            norm1: self.norm1.try_map(&format!("{prefix}.norm1"), f)?,
            qkv: self.qkv.try_map(&format!("{prefix}.qkv"), f)?,
            proj: self.proj.try_map(&format!("{prefix}.proj"), f)?,
            norm2: self.norm2.try_map(&format!("{prefix}.norm2"), f)?,
            fc1: self.fc1.try_map(&format!("{prefix}.fc1"), f)?,
            fc2: self.fc2.try_map(&format!("{prefix}.fc2"), f)?,
        })
    }
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        self.qkv.visit(&format!("{prefix}.qkv"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.fc1.visit(&format!("{prefix}.fc1"), out);
        self.fc2.visit(&format!("{prefix}.fc2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), out);
        self.qkv.visit_mut(&format!("{prefix}.qkv"), out);
        self.proj.visit_mut(&format!("{prefix}.proj"), out);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), out);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), out);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), out);
    }
}

impl<T> Weights<T> {
    /// Maps every weight in canonical order, passing its dotted name.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Weights<U>> {
        Ok(Weights {
            patch_embed: self.patch_embed.try_map("patch_embed", &mut f)?,
            cls_token: f("cls_token", &self.cls_token)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
                .collect::<Result<_>>()?,
            norm: self.norm.try_map("norm", &mut f)?,
            head: self.head.try_map("head", &mut f)?,
        })
    }

    /// Named references in canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.patch_embed.visit("patch_embed", &mut out);
        out.push(("cls_token".to_string(), &self.cls_token));
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut out);
        }
        self.norm.visit("norm", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.patch_embed.visit_mut("patch_embed", &mut out);
        out.push(("cls_token".to_string(), &mut self.cls_token));
        out.push(("pos_embed".to_string(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), &mut out);
        }
        self.norm.visit_mut("norm", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }
}

/// Which reconstruction unit a parameter belongs to: the embedding is folded
/// into block 0, the final norm into the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Block(usize),
    Head,
}

impl Unit {
    pub fn of(name: &str) -> Unit {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            Unit::Block(idx)
        } else if name.starts_with("head") || name.starts_with("norm") {
            Unit::Head
        } else {
            Unit::Block(0)
        }
    }
}

/// Matrix multiplications with a learned weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    PatchEmbed,
    Qkv(usize),
    Proj(usize),
    Fc1(usize),
    Fc2(usize),
    Head,
}

/// A quantization point in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Weight(Layer),
    Input(Layer),
    /// Left operand of `Q K^T`.
    AttnQuery(usize),
    /// Right operand of `Q K^T`.
    AttnKey(usize),
    /// Post-softmax probabilities, left operand of `P V`.
    AttnProb(usize),
    /// Right operand of `P V`.
    AttnValue(usize),
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::PatchEmbed => write!(f, "patch_embed"),
            Layer::Qkv(l) => write!(f, "blocks.{l}.qkv"),
            Layer::Proj(l) => write!(f, "blocks.{l}.proj"),
            Layer::Fc1(l) => write!(f, "blocks.{l}.fc1"),
            Layer::Fc2(l) => write!(f, "blocks.{l}.fc2"),
            Layer::Head => write!(f, "head"),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Weight(l) => write!(f, "{l}.weight"),
            Site::Input(l) => write!(f, "{l}.input"),
            Site::AttnQuery(l) => write!(f, "blocks.{l}.attn.query"),
            Site::AttnKey(l) => write!(f, "blocks.{l}.attn.key"),
            Site::AttnProb(l) => write!(f, "blocks.{l}.attn.prob"),
            Site::AttnValue(l) => write!(f, "blocks.{l}.attn.value"),
        }
    }
}

impl Site {
    pub fn is_weight(&self) -> bool {
        matches!(self, Site::Weight(_))
    }

    /// All sites of a model with `num_blocks` blocks, in forward order.
    pub fn catalog(num_blocks: usize) -> Vec<Site> {
        let mut sites = vec![Site::Weight(Layer::PatchEmbed), Site::Input(Layer::PatchEmbed)];
        for l in 0..num_blocks {
            sites.extend([
                Site::Weight(Layer::Qkv(l)),
                Site::Input(Layer::Qkv(l)),
                Site::AttnQuery(l),
                Site::AttnKey(l),
                Site::AttnProb(l),
                Site::AttnValue(l),
                Site::Weight(Layer::Proj(l)),
                Site::Input(Layer::Proj(l)),
                Site::Weight(Layer::Fc1(l)),
                Site::Input(Layer::Fc1(l)),
                Site::Weight(Layer::Fc2(l)),
                Site::Input(Layer::Fc2(l)),
            ]);
        }
        sites.extend([Site::Weight(Layer::Head), Site::Input(Layer::Head)]);
        sites
    }
}

/// Intercepts tensors at quantization sites during a forward pass.
pub trait SiteHook {
    fn apply(&self, site: Site, x: &Tensor) -> Result<Tensor>;
}

/// No-op hook: the full-precision network.
pub struct FullPrecision;

impl SiteHook for FullPrecision {
    fn apply(&self, _site: Site, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Weights bound as graph leaves.
pub type Bound = Weights<Tensor>;

/// Per-block captures of one forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Post-softmax attention `[B, H, N, N]`.
    pub attention: Tensor,
    /// Output of the attention output projection `[B, N, D]`.
    pub mhsa: Tensor,
    /// Block output `[B, N, D]`.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[B, C]`
    pub logits: Tensor,
    /// Final-norm classification-token embedding `[B, D]`.
    pub feature: Tensor,
    /// Empty unless the trace was requested.
    pub blocks: Vec<BlockTrace>,
}

impl ForwardTrace {
    pub fn attention(&self, block: usize) -> Result<&Tensor> {
        self.blocks
            .get(block)
            .map(|b| &b.attention)
            .ok_or_else(|| Error::Index(format!("no trace for block {block}")))
    }
}

/// Classification-token attention over the patch tokens (self entry
/// dropped) for one image, block and head. Returns a length `N - 1` tensor.
pub fn extract_cls_attention(trace: &ForwardTrace, image: usize, block: usize, head: usize) -> Result<Tensor> {
    let a = trace.attention(block)?;
    let s = a.shape();
    if image >= s[0] || head >= s[1] {
        return Err(Error::Index(format!(
            "image {image} / head {head} outside attention of shape {s:?}"
        )));
    }
    let n = s[3];
    a.slice(0, image, image + 1)?
        .slice(1, head, head + 1)?
        .slice(2, 0, 1)?
        .slice(3, 1, n)?
        .reshape(&[n - 1])
}

/// Classification-token rows for every image and head, `[B, H, N - 1]`.
pub fn cls_attention_rows(attention: &Tensor) -> Result<Tensor> {
    let s = attention.shape().to_vec();
    attention
        .slice(2, 0, 1)?
        .slice(3, 1, s[3])?
        .reshape(&[s[0], s[1], s[3] - 1])
}

fn linear(x: &Tensor, w: &Linear<Tensor>, layer: Layer, hook: &dyn SiteHook) -> Result<Tensor> {
    let xin = hook.apply(Site::Input(layer), x)?;
    let wq = hook.apply(Site::Weight(layer), &w.weight)?;
    xin.matmul(&wq)?.add_b(&w.bias)
}

fn norm(x: &Tensor, n: &Norm<Tensor>) -> Result<Tensor> {
    let axis = x.shape().len() - 1;
    x.layer_norm_affine(&n.gamma, &n.beta, axis, LN_EPS)
}

/// Patch embedding plus classification token and positions, `[B, N, D]`.
pub fn embed(w: &Bound, cfg: &ViTConfig, images: &Tensor, hook: &dyn SiteHook) -> Result<Tensor> {
    let s = images.shape();
    let [c, hw, _] = cfg.image_shape();
    if s.len() != 4 || s[1..] != [c, hw, hw] {
        return Err(Error::shape("model_forward", format!("expected [B, {c}, {hw}, {hw}], got {s:?}")));
    }
    let b = s[0];
    let (g, p, d) = (cfg.grid_side(), cfg.patch_size, cfg.embed_dim);
    let patches = images
        .reshape(&[b, c, g, p, g, p])?
        .transpose(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, g * g, cfg.patch_dim()])?;
    let tokens = linear(&patches, &w.patch_embed, Layer::PatchEmbed, hook)?;
    let cls = w.cls_token.broadcast(&[b, 1, d])?;
    Tensor::concat(&[&cls, &tokens], 1)?.add_b(&w.pos_embed)
}

/// One pre-norm transformer block on `[B, N, D]` tokens.
pub fn block_forward(
    w: &Block<Tensor>,
    cfg: &ViTConfig,
    l: usize,
    x: &Tensor,
    hook: &dyn SiteHook,
) -> Result<BlockTrace> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let (h, dh, d) = (cfg.num_heads, cfg.head_dim(), cfg.embed_dim);
    let qkv = linear(&norm(x, &w.norm1)?, &w.qkv, Layer::Qkv(l), hook)?
        .reshape(&[b, n, 3, h, dh])?
        .transpose(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.slice(0, i, i + 1)?.reshape(&[b, h, n, dh]);
    let q = hook.apply(Site::AttnQuery(l), &part(0)?)?;
    let k = hook.apply(Site::AttnKey(l), &part(1)?)?;
    let v = hook.apply(Site::AttnValue(l), &part(2)?)?;
    let scores = q.matmul(&k.t()?)?.scale(1.0 / (dh as f64).sqrt())?;
    let attention = scores.softmax(3)?;
    let probs = hook.apply(Site::AttnProb(l), &attention)?;
    let ctx = probs.matmul(&v)?.transpose(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
    let mhsa = linear(&ctx, &w.proj, Layer::Proj(l), hook)?;
    let x1 = x.add(&mhsa)?;
    let hidden = linear(&norm(&x1, &w.norm2)?, &w.fc1, Layer::Fc1(l), hook)?.gelu()?;
    let output = x1.add(&linear(&hidden, &w.fc2, Layer::Fc2(l), hook)?)?;
    Ok(BlockTrace { attention, mhsa, output })
}

/// Final norm on the classification token and the classifier.
/// Returns `(logits, feature)`.
pub fn head_forward(w: &Bound, cfg: &ViTConfig, x: &Tensor, hook: &dyn SiteHook) -> Result<(Tensor, Tensor)> {
    let b = x.shape()[0];
    let cls = x.slice(1, 0, 1)?.reshape(&[b, cfg.embed_dim])?;
    let feature = norm(&cls, &w.norm)?;
    let logits = linear(&feature, &w.head, Layer::Head, hook)?;
    Ok((logits, feature))
}

/// Full forward over a batch `[B, C, S, S]`.
pub fn forward(w: &Bound, cfg: &ViTConfig, images: &Tensor, hook: &dyn SiteHook, trace: bool) -> Result<ForwardTrace> {
    let mut x = embed(w, cfg, images, hook)?;
    let mut blocks = Vec::new();
    for (l, bw) in w.blocks.iter().enumerate() {
        let bt = block_forward(bw, cfg, l, &x, hook)?;
        x = bt.output.clone();
        if trace {
            blocks.push(bt);
        }
    }
    let (logits, feature) = head_forward(w, cfg, &x, hook)?;
    Ok(ForwardTrace { logits, feature, blocks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub weights: Weights<Param>,
}

impl ViTModel {
    /// Random initialization: N(0, 0.02) matrices and embeddings, unit norms,
    /// zero biases.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let (d, hid) = (config.embed_dim, config.hidden_dim());
        let std = 0.02;
        let lin = |i: usize, o: usize, r: &mut rng::Rng| Linear {
            weight: Param::normal(&[i, o], std, r),
            bias: Param::filled(&[o], 0.0),
        };
        let norm = || Norm {
            gamma: Param::filled(&[d], 1.0),
            beta: Param::filled(&[d], 0.0),
        };
        let patch_embed = lin(config.patch_dim(), d, &mut r);
        let cls_token = Param::normal(&[1, d], std, &mut r);
        let pos_embed = Param::normal(&[config.num_tokens(), d], std, &mut r);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                norm1: norm(),
                qkv: lin(d, 3 * d, &mut r),
                proj: lin(d, d, &mut r),
                norm2: norm(),
                fc1: lin(d, hid, &mut r),
                fc2: lin(hid, d, &mut r),
            })
            .collect();
        let head = lin(d, config.num_classes, &mut r);
        Ok(Self {
            config,
            weights: Weights {
                patch_embed,
                cls_token,
                pos_embed,
                blocks,
                norm: norm(),
                head,
            },
        })
    }

    /// Expected `(name, shape)` layout for `config`.
    pub fn layout(config: &ViTConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let m = Self::init(*config, 0)?;
        Ok(m.weights.named().into_iter().map(|(n, p)| (n, p.shape.clone())).collect())
    }

    pub fn num_params(&self) -> usize {
        self.weights.named().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// Binds weights as graph leaves; `trainable(name)` selects which ones
    /// collect gradients.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        self.weights.try_map(|name, p| {
            if trainable(name) {
                Tensor::param(p.shape.clone(), p.data.clone())
            } else {
                Tensor::new(p.shape.clone(), p.data.clone())
            }
        })
    }

    pub fn bind_frozen(&self) -> Result<Bound> {
        self.bind(|_| false)
    }

    /// Forward over a batch with the full-precision network.
    pub fn forward_batch(&self, images: &Tensor, trace: bool) -> Result<ForwardTrace> {
        forward(&self.bind_frozen()?, &self.config, images, &FullPrecision, trace)
    }

    /// Forward for a single `[C, S, S]` image.
    pub fn forward_image(&self, image: &Tensor, trace: bool) -> Result<ForwardTrace> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        self.forward_batch(&image.reshape(&shape)?, trace)
    }
}
