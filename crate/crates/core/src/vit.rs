//! Pre-norm vision transformer with class-token readout.
//!
//! Tokens are rows: a sequence is a `T×d` matrix and every projection
//! `h = W x` is evaluated as `X·Wᵀ`. Attention projections carry no bias.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes_hint: Option<usize>,
}

impl ViTConfig {
    /// Desk-scale preset that is actually trained.
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes_hint: None,
        }
    }

    /// ViT-B/16 shape; used for parameter accounting only.
    pub fn b16_shape() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes_hint: None,
        }
    }

    /// ViT-L/14 shape; used for parameter accounting only.
    pub fn l14_shape() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            num_classes_hint: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "B16-shape" | "b16" => Ok(Self::b16_shape()),
            "L14-shape" | "l14" => Ok(Self::l14_shape()),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        ];
        if nonzero.contains(&0) {
            return Err(Error::config(format!("zero-valued field in {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Closed-form parameter count of every group.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_hidden();
        let embed = d * self.patch_dim() + d + d + self.num_tokens() * d;
        let block = 2 * d + 4 * d * d + 2 * d + (h * d + h) + (d * h + d);
        embed + self.depth * block + 2 * d
    }

    /// Parameters in the query/key/value/output matrices of all blocks.
    pub fn attention_projection_params(&self) -> usize {
        self.depth * 4 * self.dim * self.dim
    }

    /// Shapes of every parameter group, in checkpoint order.
    pub fn shapes(&self) -> ViTWeights<Vec<usize>> {
        let d = self.dim;
        let h = self.mlp_hidden();
        let block = BlockWeights {
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            query: vec![d, d],
            key: vec![d, d],
            value: vec![d, d],
            output: vec![d, d],
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            fc1_weight: vec![h, d],
            fc1_bias: vec![h],
            fc2_weight: vec![d, h],
            fc2_bias: vec![d],
        };
        ViTWeights {
            patch_weight: vec![d, self.patch_dim()],
            patch_bias: vec![d],
            cls_token: vec![1, d],
            pos_embed: vec![self.num_tokens(), d],
            blocks: vec![block; self.depth],
            norm_gain: vec![d],
            norm_bias: vec![d],
        }
    }

    /// Canonical key=value pairs, used in checkpoint footers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("vit.image_size".to_string(), self.image_size.to_string()),
            ("vit.patch_size".to_string(), self.patch_size.to_string()),
            ("vit.channels".to_string(), self.channels.to_string()),
            ("vit.dim".to_string(), self.dim.to_string()),
            ("vit.depth".to_string(), self.depth.to_string()),
            ("vit.heads".to_string(), self.heads.to_string()),
            ("vit.mlp_ratio".to_string(), self.mlp_ratio.to_string()),
        ];
        if let Some(c) = self.num_classes_hint {
            v.push(("vit.num_classes_hint".to_string(), c.to_string()));
        }
        v
    }

    pub fn from_kv(kv: &crate::kv::KvMap) -> Result<Self> {
        let cfg = ViTConfig {
            image_size: kv.require_parse("vit.image_size")?,
            patch_size: kv.require_parse("vit.patch_size")?,
            channels: kv.require_parse("vit.channels")?,
            dim: kv.require_parse("vit.dim")?,
            depth: kv.require_parse("vit.depth")?,
            heads: kv.require_parse("vit.heads")?,
            mlp_ratio: kv.require_parse("vit.mlp_ratio")?,
            num_classes_hint: kv.get_parse("vit.num_classes_hint")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One of the four adaptable attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Query, Target::Key, Target::Value, Target::Output];

    pub fn name(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Key => "key",
            Target::Value => "value",
            Target::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "q" | "query" => Ok(Target::Query),
            "k" | "key" => Ok(Target::Key),
            "v" | "value" => Ok(Target::Value),
            "o" | "output" => Ok(Target::Output),
            other => Err(Error::config(format!("unknown LoRA target '{other}'"))),
        }
    }

    pub fn short(self) -> char {
        self.name().chars().next().unwrap()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-block parameter groups, generic over what is stored per group
/// (tensors, graph handles, frozen flags, shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T> BlockWeights<T> {
    fn as_array(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn as_array_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_array([a, b, c, d, e, f, g, h, i, j, k, l]: [T; 12]) -> Self {
        BlockWeights {
            ln1_gain: a,
            ln1_bias: b,
            query: c,
            key: d,
            value: e,
            output: f,
            ln2_gain: g,
            ln2_bias: h,
            fc1_weight: i,
            fc1_bias: j,
            fc2_weight: k,
            fc2_bias: l,
        }
    }

    pub fn projection(&self, target: Target) -> &T {
        match target {
            Target::Query => &self.query,
            Target::Key => &self.key,
            Target::Value => &self.value,
            Target::Output => &self.output,
        }
    }

    pub fn projection_mut(&mut self, target: Target) -> &mut T {
        match target {
            Target::Query => &mut self.query,
            Target::Key => &mut self.key,
            Target::Value => &mut self.value,
            Target::Output => &mut self.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
}

pub fn block_param_name(block: usize, field: &str) -> String {
    format!("block{block}.{field}")
}

impl<T> ViTWeights<T> {
    /// Visits every group with its checkpoint name, in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        f("patch_embed.weight".into(), &self.patch_weight);
        f("patch_embed.bias".into(), &self.patch_bias);
        f("cls_token".into(), &self.cls_token);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.as_array()) {
                f(block_param_name(i, name), t);
            }
        }
        f("norm.gain".into(), &self.norm_gain);
        f("norm.bias".into(), &self.norm_bias);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        f("patch_embed.weight".into(), &mut self.patch_weight);
        f("patch_embed.bias".into(), &mut self.patch_bias);
        f("cls_token".into(), &mut self.cls_token);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.as_array_mut()) {
                f(block_param_name(i, name), t);
            }
        }
        f("norm.gain".into(), &mut self.norm_gain);
        f("norm.bias".into(), &mut self.norm_bias);
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(String, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ViTWeights<U>, E> {
        let patch_weight = f("patch_embed.weight".into(), &self.patch_weight)?;
        let patch_bias = f("patch_embed.bias".into(), &self.patch_bias)?;
        let cls_token = f("cls_token".into(), &self.cls_token)?;
        let pos_embed = f("pos_embed".into(), &self.pos_embed)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let mut out = Vec::with_capacity(12);
            for (name, t) in BLOCK_NAMES.iter().zip(b.as_array()) {
                out.push(f(block_param_name(i, name), t)?);
            }
            let arr: [U; 12] = out.try_into().ok().expect("12 block fields");
            blocks.push(BlockWeights::from_array(arr));
        }
        let norm_gain = f("norm.gain".into(), &self.norm_gain)?;
        let norm_bias = f("norm.bias".into(), &self.norm_bias)?;
        Ok(ViTWeights {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_gain,
            norm_bias,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(String, &T) -> U) -> ViTWeights<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }
}

/// How block `block`'s projection `target` turns `x` into `x·Wᵀ`.
/// The base model uses [`PlainProjection`]; LoRA supplies its own.
pub trait Projector {
    fn project(&self, g: &mut Graph, block: usize, target: Target, x: Var, weight: Var)
        -> Result<Var>;
}

pub struct PlainProjection;

impl Projector for PlainProjection {
    fn project(&self, g: &mut Graph, _: usize, _: Target, x: Var, weight: Var) -> Result<Var> {
        g.matmul_nt(x, weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub weights: ViTWeights<Tensor>,
    pub frozen: ViTWeights<bool>,
}

impl ViTModel {
    /// Gaussian(0, 0.02) matrices and embeddings, unit gains, zero biases.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "vit-init");
        let shapes = config.shapes();
        let weights = shapes.map(|name, shape| {
            if name.ends_with("gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.normal() * INIT_STD).collect();
                Tensor::new(shape.clone(), data).expect("shape from config")
            }
        });
        let frozen = shapes.map(|_, _| false);
        Ok(ViTModel {
            config,
            weights,
            frozen,
        })
    }

    pub fn from_weights(config: ViTConfig, weights: ViTWeights<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        let mut bad = None;
        let mut expected = Vec::new();
        shapes.visit(|name, s| expected.push((name, s.clone())));
        let mut i = 0;
        weights.visit(|name, t| {
            match expected.get(i) {
                Some((n, s)) if *n == name && s.as_slice() == t.shape() => {}
                _ => bad = bad.take().or(Some(name)),
            }
            i += 1;
        });
        if let Some(name) = bad.or((i != expected.len()).then(|| "<count>".to_string())) {
            return Err(Error::dim(format!("weight group '{name}' does not match config")));
        }
        let frozen = shapes.map(|_, _| false);
        Ok(ViTModel {
            config,
            weights,
            frozen,
        })
    }

    pub fn freeze_all(&mut self) {
        self.frozen.visit_mut(|_, f| *f = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.visit_mut(|_, f| *f = false);
    }

    /// Counts elements; with `trainable_only`, frozen groups are skipped.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        let mut frozen = Vec::new();
        self.frozen.visit(|_, f| frozen.push(*f));
        let mut n = 0;
        let mut i = 0;
        self.weights.visit(|_, t| {
            if !(trainable_only && frozen[i]) {
                n += t.len();
            }
            i += 1;
        });
        n
    }

    /// Places every group in `g`. Only unfrozen groups require grad, and only
    /// when `with_grad` is set.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> ViTWeights<Var> {
        let mut flags = Vec::new();
        self.frozen.visit(|_, f| flags.push(*f));
        let mut i = 0;
        self.weights.map(|_, t| {
            let rg = with_grad && !flags[i];
            i += 1;
            g.leaf(t.clone(), rg)
        })
    }

    /// Feature vector `z` (as a `1×d` row) for a `C×H×W` image.
    pub fn features(
        &self,
        g: &mut Graph,
        vars: &ViTWeights<Var>,
        projector: &dyn Projector,
        image: &Tensor,
    ) -> Result<Var> {
        let patches = patchify(image, &self.config)?;
        forward_patches(g, &self.config, vars, projector, &patches)
    }

    /// `B×d` features for pre-patchified images.
    pub fn features_batch(
        &self,
        g: &mut Graph,
        vars: &ViTWeights<Var>,
        projector: &dyn Projector,
        patches: &[Tensor],
    ) -> Result<Var> {
        forward_batch(g, &self.config, vars, projector, patches)
    }

    /// SHA-256 over the little-endian bytes of every group, in canonical
    /// order. Used to prove frozen groups were not touched.
    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.weights.visit(|name, t| {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        });
        crate::hex(&h.finalize())
    }
}

/// Splits a `C×S×S` image into `(S/p)²` row-major patches. Each patch
/// flattens channel-major: element `c·p² + dy·p + dx`.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let p = config.patch_size;
    let (c, s) = (config.channels, config.image_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim(format!(
            "image shape {:?} does not match config [{c}, {s}, {s}]",
            image.shape()
        )));
    }
    patchify_raw(image.data(), c, s, p)
}

pub fn patchify_raw(data: &[f64], channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || size % patch != 0 {
        return Err(Error::config(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    let side = size / patch;
    let plen = patch * patch * channels;
    let mut out = Vec::with_capacity(side * side * plen);
    for py in 0..side {
        for px in 0..side {
            for ch in 0..channels {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ch * size * size + y * size + px * patch;
                    out.extend_from_slice(&data[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, plen], out)
}

/// Pre-norm multi-head self-attention with residual: `x + Attn(LN(x))`.
pub fn attention_forward(
    g: &mut Graph,
    config: &ViTConfig,
    block: usize,
    w: &BlockWeights<Var>,
    projector: &dyn Projector,
    x: Var,
) -> Result<Var> {
    attention_batch(g, config, block, w, projector, x, 1)
}

/// `x + FC2(GELU(FC1(LN(x))))`.
pub fn mlp_forward(g: &mut Graph, w: &BlockWeights<Var>, x: Var) -> Result<Var> {
    let h = g.layer_norm(x, w.ln2_gain, w.ln2_bias, LN_EPS)?;
    let h = g.matmul_nt(h, w.fc1_weight)?;
    let h = g.add_row(h, w.fc1_bias)?;
    let h = g.gelu(h)?;
    let h = g.matmul_nt(h, w.fc2_weight)?;
    let h = g.add_row(h, w.fc2_bias)?;
    g.add(x, h)
}

/// Full forward from a `N×patch_dim` patch matrix to the `1×d` class-token
/// feature after the final layer norm.
pub fn forward_patches(
    g: &mut Graph,
    config: &ViTConfig,
    w: &ViTWeights<Var>,
    projector: &dyn Projector,
    patches: &Tensor,
) -> Result<Var> {
    forward_batch(g, config, w, projector, std::slice::from_ref(patches))
}

/// Batched forward: the images' tokens are stacked as rows so every
/// row-wise op runs once per batch, and attention runs per image. Every
/// kernel is row-independent, so row `i` of the `B×d` output is bit-identical
/// to a single-image forward of image `i`.
pub fn forward_batch(
    g: &mut Graph,
    config: &ViTConfig,
    w: &ViTWeights<Var>,
    projector: &dyn Projector,
    patches: &[Tensor],
) -> Result<Var> {
    let expected = [config.num_patches(), config.patch_dim()];
    if patches.is_empty() {
        return Err(Error::dim("empty batch"));
    }
    let mut stacked = Vec::with_capacity(patches.len() * expected[0] * expected[1]);
    for p in patches {
        if p.shape() != expected {
            return Err(Error::dim(format!(
                "patch matrix {:?}, expected {expected:?}",
                p.shape()
            )));
        }
        stacked.extend_from_slice(p.data());
    }
    let b = patches.len();
    let (n, t) = (config.num_patches(), config.num_tokens());
    let p = g.constant(Tensor::new(vec![b * n, expected[1]], stacked)?);
    let e = g.matmul_nt(p, w.patch_weight)?;
    let e = g.add_row(e, w.patch_bias)?;
    let mut seqs = Vec::with_capacity(b);
    for i in 0..b {
        let ei = if b == 1 { e } else { g.slice_rows(e, i * n, n)? };
        let tokens = g.concat_rows(&[w.cls_token, ei])?;
        seqs.push(g.add(tokens, w.pos_embed)?);
    }
    let mut x = if b == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
    for (i, bw) in w.blocks.iter().enumerate() {
        x = attention_batch(g, config, i, bw, projector, x, b)?;
        x = mlp_forward(g, bw, x)?;
    }
    let cls: Vec<Var> = (0..b)
        .map(|i| g.slice_rows(x, i * t, 1))
        .collect::<Result<_>>()?;
    let cls = if b == 1 { cls[0] } else { g.concat_rows(&cls)? };
    g.layer_norm(cls, w.norm_gain, w.norm_bias, LN_EPS)
}

/// [`attention_forward`] over `batch` stacked sequences of equal length.
pub fn attention_batch(
    g: &mut Graph,
    config: &ViTConfig,
    block: usize,
    w: &BlockWeights<Var>,
    projector: &dyn Projector,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let (rows, width) = g.value(x).dims2()?;
    if width != config.dim {
        return Err(Error::dim(format!(
            "token width {width} does not match model dim {}",
            config.dim
        )));
    }
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim(format!("{rows} token rows for batch of {batch}")));
    }
    let t = rows / batch;
    let h = g.layer_norm(x, w.ln1_gain, w.ln1_bias, LN_EPS)?;
    let q = projector.project(g, block, Target::Query, h, w.query)?;
    let k = projector.project(g, block, Target::Key, h, w.key)?;
    let v = projector.project(g, block, Target::Value, h, w.value)?;
    let hd = config.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut per_image = Vec::with_capacity(batch);
    for i in 0..batch {
        let (qi, ki, vi) = if batch == 1 {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, i * t, t)?,
                g.slice_rows(k, i * t, t)?,
                g.slice_rows(v, i * t, t)?,
            )
        };
        let mut heads = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let (qh, kh, vh) = if config.heads == 1 {
                (qi, ki, vi)
            } else {
                (
                    g.slice_cols(qi, head * hd, hd)?,
                    g.slice_cols(ki, head * hd, hd)?,
                    g.slice_cols(vi, head * hd, hd)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        per_image.push(if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        });
    }
    let merged = if batch == 1 {
        per_image[0]
    } else {
        g.concat_rows(&per_image)?
    };
    let out = projector.project(g, block, Target::Output, merged, w.output)?;
    g.add(x, out)
}
