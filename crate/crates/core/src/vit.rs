//! Vanilla ViT encoder: patch embedding with a class token, pre-norm
//! transformer blocks, and access to every layer's attention weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result, Violation};
use crate::nn::{trunc_normal, LayerNorm, Linear, Module, Param, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl VitConfig {
    pub fn tiny() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 2,
        }
    }

    pub fn mini() -> Self {
        VitConfig {
            dim: 64,
            depth: 4,
            ..Self::tiny()
        }
    }

    fn full_scale(dim: usize, depth: usize, heads: usize) -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            num_classes: 2,
        }
    }

    /// Named preset: `tiny`, `mini`, `s`, `b` or `l`.
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" | "vitasd-tiny" => Some(Self::tiny()),
            "mini" | "vitasd-mini" => Some(Self::mini()),
            "s" | "vitasd-s" => Some(Self::full_scale(384, 12, 6)),
            "b" | "vitasd-b" => Some(Self::full_scale(768, 12, 12)),
            "l" | "vitasd-l" => Some(Self::full_scale(1024, 24, 16)),
            _ => None,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let f = |name: &str| format!("{prefix}{name}");
        let mut out = Vec::new();
        let mut push = |fields: &[String], msg: String| {
            out.push(Violation {
                fields: fields.to_vec(),
                message: msg,
            })
        };
        if self.patch_size == 0 || self.image_size == 0 {
            push(
                &[f("image_size"), f("patch_size")],
                "image_size and patch_size must be positive".into(),
            );
        } else if self.image_size % self.patch_size != 0 {
            push(
                &[f("image_size"), f("patch_size")],
                format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            push(
                &[f("dim"), f("heads")],
                format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads),
            );
        }
        if self.depth == 0 {
            push(&[f("depth")], "depth must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            push(&[f("mlp_ratio")], "mlp_ratio must give a positive hidden width".into());
        }
        if self.num_classes < 2 {
            push(&[f("num_classes")], "num_classes must be at least 2".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Names of encoder fields that differ from `other` (classes excluded).
    pub fn encoder_mismatch(&self, other: &VitConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($field:ident),*) => {
                $(if self.$field != other.$field {
                    out.push(stringify!($field).to_string());
                })*
            };
        }
        cmp!(image_size, patch_size, dim, depth, heads, mlp_ratio);
        out
    }
}

/// Cut `[B, H, W, 3]` (or a single `[H, W, 3]`) images into `[B, N, p·p·3]`
/// raster-ordered patches, each flattened row-major over (row, col, channel).
pub fn extract_patches(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let shape = images.shape();
    let (b, h, w, c) = match *shape {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, H, W, 3] images, got {shape:?}"
            )))
        }
    };
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = patch_size * patch_size * 3;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch_size {
                    let row = py * patch_size + y;
                    let start = ((bi * h + row) * w + px * patch_size) * 3;
                    out.extend_from_slice(&src[start..start + patch_size * 3]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, pd], out)
}

/// Model-input normalization: mean 0.5, std 0.5 per channel.
pub fn normalize_input(patches: &Tensor) -> Tensor {
    Tensor::from_fn(patches.shape(), |i| (patches.data()[i] - 0.5) / 0.5)
}

/// Post-softmax attention weights for every layer, each `[B, heads, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Tensor>,
}

impl AttentionStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            let t = *layer.shape().last().unwrap();
            for row in layer.data().chunks(t) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    pub fn all_in_unit_interval(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.data().iter().all(|&v| (0.0..=1.0).contains(&v)))
    }

    /// Class-token row of layer `layer` for image `b`, averaged over heads (length T).
    pub fn cls_row_mean(&self, layer: usize, b: usize) -> Vec<f64> {
        let l = &self.layers[layer];
        let (h, t) = (l.shape()[1], l.shape()[2]);
        let mut out = vec![0.0; t];
        for head in 0..h {
            let off = ((b * h + head) * t) * t;
            for (o, v) in out.iter_mut().zip(&l.data()[off..off + t]) {
                *o += v / h as f64;
            }
        }
        out
    }

    /// Class-token row of one head.
    pub fn cls_row(&self, layer: usize, b: usize, head: usize) -> Vec<f64> {
        let l = &self.layers[layer];
        let (h, t) = (l.shape()[1], l.shape()[2]);
        let off = ((b * h + head) * t) * t;
        l.data()[off..off + t].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            query: Linear::new(&format!("{name}.query"), dim, dim, rng),
            key: Linear::new(&format!("{name}.key"), dim, dim, rng),
            value: Linear::new(&format!("{name}.value"), dim, dim, rng),
            proj: Linear::new(&format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let r = g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        g.transpose(r, 1, 2)
    }

    /// Multi-head self-attention over `[B, T, D]`. Returns the projected
    /// output and the `[B, heads, T, T]` attention weights.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.query.in_features() {
            return Err(Error::Shape {
                op: "mha",
                lhs: s,
                rhs: vec![self.query.in_features()],
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;

        let q = self.query.forward(g, x)?;
        let q = self.split_heads(g, q)?;
        let k = self.key.forward(g, x)?;
        let k = self.split_heads(g, k)?;
        let k_t = g.transpose(k, 2, 3)?;
        let v = self.value.forward(g, x)?;
        let v = self.split_heads(g, v)?;

        let scores = g.matmul(q, k_t)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let out = self.proj.forward(g, ctx)?;
        Ok((out, attn))
    }

    pub fn zero(&mut self) {
        self.query.zero();
        self.key.zero();
        self.value.zero();
        self.proj.zero();
    }
}

impl Module for Attention {
    fn params(&self) -> Vec<&Param> {
        [&self.query, &self.key, &self.value, &self.proj]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.proj.params_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block:
/// `K' = MHA(LN(K)) + K`, `K_next = MLP(LN(K')) + K'`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Block {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            mlp: Mlp {
                fc1: Linear::new(&format!("{name}.mlp.fc1"), dim, hidden, rng),
                fc2: Linear::new(&format!("{name}.mlp.fc2"), hidden, dim, rng),
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, x)?;
        let (a, attn) = self.attn.forward(g, h)?;
        let x1 = g.add(a, x)?;
        let h = self.norm2.forward(g, x1)?;
        let m = self.mlp.forward(g, h)?;
        let out = g.add(m, x1)?;
        Ok((out, attn))
    }

    /// Zero both residual branches so the block is the identity.
    pub fn zero_branches(&mut self) {
        self.attn.zero();
        self.mlp.fc1.zero();
        self.mlp.fc2.zero();
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.norm1.params();
        out.extend(self.attn.params());
        out.extend(self.norm2.params());
        out.extend(self.mlp.fc1.params());
        out.extend(self.mlp.fc2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.norm1.params_mut();
        out.extend(self.attn.params_mut());
        out.extend(self.norm2.params_mut());
        out.extend(self.mlp.fc1.params_mut());
        out.extend(self.mlp.fc2.params_mut());
        out
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct VitForward {
    /// `[B, D]` class-token embedding after the final layer norm.
    pub cls: Var,
    /// `[B, T, D]` tokens after the last block (before the final norm).
    pub tokens: Var,
    /// Per-layer `[B, heads, T, T]` attention weights.
    pub attn: Vec<Var>,
}

/// Inference result of [`Vit::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub class_embedding: Tensor,
    pub attention: AttentionStack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Vit {
    pub fn new(config: &VitConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new("vit.patch_embed", config.patch_dim(), d, rng);
        let cls_token = Param::new("vit.cls_token", trunc_normal(&[d], INIT_STD, rng));
        let pos_embed = Param::new(
            "vit.pos_embed",
            trunc_normal(&[config.seq_len(), d], INIT_STD, rng),
        );
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    &format!("vit.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_hidden(),
                    rng,
                )
            })
            .collect();
        Ok(Vit {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new("vit.norm", d),
        })
    }

    /// Project raw `[B, N, p·p·3]` patches to `[B, N, D]` (input normalization included).
    pub fn embed_patches(&self, g: &mut Graph, patches: &Tensor) -> Result<Var> {
        let s = patches.shape();
        if s.len() != 3 || s[2] != self.config.patch_dim() {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: s.to_vec(),
                rhs: vec![self.config.patch_dim()],
            });
        }
        let x = g.constant(normalize_input(patches));
        self.patch_embed.forward(g, x)
    }

    /// `[B, 1, D]` class token plus its positional embedding.
    pub fn class_token(&self, g: &mut Graph, batch: usize) -> Result<Var> {
        let d = self.config.dim;
        let zeros = g.constant(Tensor::zeros(&[batch, 1, d]));
        let cls = self.cls_token.var(g);
        let cls = g.add(zeros, cls)?;
        let pos = self.pos_embed.var(g);
        let pos0 = g.slice(pos, 0, 0, 1)?;
        g.add(cls, pos0)
    }

    /// Patch tokens with positional embeddings `pos[1..]` added, `[B, N, D]`.
    pub fn patch_tokens(&self, g: &mut Graph, patches: &Tensor) -> Result<Var> {
        let x = self.embed_patches(g, patches)?;
        let pos = self.pos_embed.var(g);
        let n = self.config.num_patches();
        let pos_rest = g.slice(pos, 0, 1, n)?;
        g.add(x, pos_rest)
    }

    /// Full `[B, N+1, D]` token sequence for a batch of `[B, H, W, 3]` images.
    pub fn patchify(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let s = images.shape();
        let (h, w) = match *s {
            [h, w, _] | [_, h, w, _] => (h, w),
            _ => return Err(Error::Dimension(format!("bad image batch shape {s:?}"))),
        };
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Dimension(format!(
                "image {h}x{w} does not match configured size {}",
                self.config.image_size
            )));
        }
        let patches = extract_patches(images, self.config.patch_size)?;
        let b = patches.shape()[0];
        let toks = self.patch_tokens(g, &patches)?;
        let cls = self.class_token(g, b)?;
        g.concat(&[cls, toks], 1)
    }

    /// Run the transformer blocks over an arbitrary `[B, T, D]` token sequence.
    pub fn run_blocks(&self, g: &mut Graph, mut x: Var) -> Result<(Var, Vec<Var>)> {
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(g, x)?;
            x = y;
            attn.push(a);
        }
        Ok((x, attn))
    }

    /// Final-norm class-token row of `[B, T, D]` tokens.
    pub fn class_embedding(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let b = g.shape(tokens)[0];
        let cls = g.slice(tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, self.config.dim])?;
        self.norm.forward(g, cls)
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor) -> Result<VitForward> {
        let x = self.patchify(g, images)?;
        let (tokens, attn) = self.run_blocks(g, x)?;
        let cls = self.class_embedding(g, tokens)?;
        Ok(VitForward { cls, tokens, attn })
    }

    /// Gradient-free encoding of a batch.
    pub fn encode(&self, images: &Tensor) -> Result<Encoding> {
        let mut g = Graph::new();
        let out = g.frozen(|g| self.forward(g, images))?;
        Ok(Encoding {
            class_embedding: g.value(out.cls).clone(),
            attention: AttentionStack {
                layers: out.attn.iter().map(|&a| g.value(a).clone()).collect(),
            },
        })
    }
}

impl Module for Vit {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.patch_embed.params();
        out.push(&self.cls_token);
        out.push(&self.pos_embed);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.norm.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.patch_embed.params_mut();
        out.push(&mut self.cls_token);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.norm.params_mut());
        out
    }
}
