//! Parametric functions: patch encoders, predictor, audio projector and the
//! two text paths, plus checkpoint I/O.
//!
//! Forward passes are written once against an [`autodiff::Graph`]; the
//! `*_forward` builders are used by training code, while the plain
//! functions ([`encode`], [`predict_masked`], [`project_audio`], ...) build a
//! throwaway graph for inference.
//!
//! Parameters are addressed by dotted names (`online.blocks.0.qkv.w`). The
//! same names key gradients, optimizer moments and checkpoint tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::frontend::{PatchGrid, PositionalEncoding, PATCH_DIM};
use crate::masking::MaskPartition;
use crate::tensor::Matrix;

/// Initial temperature of the contrastive loss.
pub const TAU_INIT: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Transformer,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMapKind {
    /// Learnable affine map from the cached embedding width to `dim`.
    Linear,
    /// Embeddings used as they are; requires `text_embed_dim == dim`.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    /// Mean and variance over every entry of the masked set.
    Global,
    /// Mean and variance per feature channel.
    PerFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,
    pub projector: ProjectorKind,
    pub proj_blocks: usize,
    pub proj_heads: usize,
    pub proj_ffn: usize,
    pub text_embed_dim: usize,
    pub text_map: TextMapKind,
    pub text_vocab: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub n_f: usize,
    pub n_t: usize,
    pub init_std: f64,
    pub target_norm: TargetNorm,
}

impl ModelConfig {
    /// Minutes-scale model used by tests and the toy runs.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            pred_depth: 2,
            pred_heads: 4,
            projector: ProjectorKind::Transformer,
            proj_blocks: 1,
            proj_heads: 1,
            proj_ffn: 64,
            text_embed_dim: 4096,
            text_map: TextMapKind::Linear,
            text_vocab: 0,
            text_depth: 2,
            text_heads: 4,
            text_max_len: 32,
            n_f: 5,
            n_t: 13,
            init_std: 0.02,
            target_norm: TargetNorm::Global,
        }
    }

    /// ViT-Base sized encoder on the 80×608 grid.
    pub fn full_scale() -> Self {
        Self {
            dim: 768,
            depth: 12,
            heads: 12,
            pred_depth: 8,
            pred_heads: 16,
            proj_ffn: 768,
            text_depth: 12,
            text_heads: 12,
            text_max_len: 64,
            n_t: 38,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim {} must be a positive multiple of 4", self.dim));
        }
        for (what, h) in [
            ("heads", self.heads),
            ("pred_heads", self.pred_heads),
            ("proj_heads", self.proj_heads),
            ("text_heads", self.text_heads),
        ] {
            if h == 0 || self.dim % h != 0 {
                return bad(format!("{what}={h} does not divide dim {}", self.dim));
            }
        }
        if self.text_map == TextMapKind::Identity && self.text_embed_dim != self.dim {
            return bad("identity text map needs text_embed_dim == dim".into());
        }
        if self.n_f == 0 || self.n_t == 0 {
            return bad("empty patch grid".into());
        }
        if self.projector == ProjectorKind::Transformer && self.proj_blocks == 0 {
            return bad("transformer projector needs at least one block".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.n_f * self.n_t
    }

    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Walks named parameter tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: Matrix::trunc_normal(input, output, std, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, name: &str, x: Var, trainable: bool) -> Var {
        let w = g.param(&join(name, "w"), &self.w, trainable);
        let b = g.param(&join(name, "b"), &self.b, trainable);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Matrix::filled(1, dim, 1.0),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, name: &str, x: Var, trainable: bool) -> Var {
        let gain = g.param(&join(name, "gain"), &self.gain, trainable);
        let bias = g.param(&join(name, "bias"), &self.bias, trainable);
        let n = g.layer_norm(x);
        let s = g.mul_row(n, gain);
        g.add_row(s, bias)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, std, rng),
            attn_out: Linear::new(dim, dim, std, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, std, rng),
            fc2: Linear::new(hidden, dim, std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn_out.w.cols()
    }

    /// Zeroes both residual branches so the block is the identity map.
    pub fn zero_residuals(&mut self) {
        self.attn_out = Linear::zeros(self.attn_out.w.rows(), self.attn_out.w.cols());
        self.fc2 = Linear::zeros(self.fc2.w.rows(), self.fc2.w.cols());
    }

    pub fn forward(&self, g: &mut Graph, name: &str, x: Var, trainable: bool) -> Var {
        let h = self.ln1.forward(g, &join(name, "ln1"), x, trainable);
        let a = self.attention(g, name, h, trainable);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, &join(name, "ln2"), x, trainable);
        let h = self.fc1.forward(g, &join(name, "fc1"), h, trainable);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, &join(name, "fc2"), h, trainable);
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, name: &str, h: Var, trainable: bool) -> Var {
        let dim = self.dim();
        let hd = dim / self.heads;
        let qkv = self.qkv.forward(g, &join(name, "qkv"), h, trainable);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * hd, hd);
            let k = g.slice_cols(qkv, dim + head * hd, hd);
            let v = g.slice_cols(qkv, 2 * dim + head * hd, hd);
            let logits = g.matmul_t(q, false, k, true);
            let logits = g.scale(logits, scale);
            let p = g.softmax_rows(logits);
            outs.push(g.matmul(p, v));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.attn_out.forward(g, &join(name, "attn_out"), o, trainable)
    }

    /// Attention probabilities of each head, `[tokens × tokens]`, for input `x`.
    pub fn attention_probs(&self, x: &Matrix) -> Vec<Matrix> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = self.ln1.forward(&mut g, "ln1", xv, false);
        let qkv = self.qkv.forward(&mut g, "qkv", h, false);
        let dim = self.dim();
        let hd = dim / self.heads;
        (0..self.heads)
            .map(|head| {
                let q = g.slice_cols(qkv, head * hd, hd);
                let k = g.slice_cols(qkv, dim + head * hd, hd);
                let logits = g.matmul_t(q, false, k, true);
                let logits = g.scale(logits, 1.0 / (hd as f64).sqrt());
                let p = g.softmax_rows(logits);
                g.value(p).clone()
            })
            .collect()
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.attn_out.visit(&join(prefix, "attn_out"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

fn visit_blocks(blocks: &[Block], prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &format!("blocks.{i}")), f);
    }
}

fn visit_blocks_mut(blocks: &mut [Block], prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
    }
}

fn run_blocks(blocks: &[Block], g: &mut Graph, name: &str, mut x: Var, trainable: bool) -> Var {
    for (i, b) in blocks.iter().enumerate() {
        x = b.forward(g, &join(name, &format!("blocks.{i}")), x, trainable);
    }
    x
}

/// Which patches an encoder pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Visible,
    Masked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub posenc: PositionalEncoding,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = cfg.init_std;
        Self {
            patch_embed: Linear::new(PATCH_DIM, cfg.dim, std, rng),
            posenc: PositionalEncoding::sincos_2d(cfg.n_f, cfg.n_t, cfg.dim).expect("validated dim"),
            blocks: (0..cfg.depth)
                .map(|_| Block::new(cfg.dim, cfg.heads, cfg.dim * cfg.mlp_ratio, std, rng))
                .collect(),
            norm: LayerNorm::new(cfg.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.gain.cols()
    }

    /// Positional encoding matching the grid's time length.
    pub fn posenc_for(&self, grid: &PatchGrid) -> Result<PositionalEncoding> {
        if grid.n_f != self.posenc.n_f {
            return invalid(format!("grid has {} frequency patches, encoder expects {}", grid.n_f, self.posenc.n_f));
        }
        self.posenc.interpolate(grid.n_t)
    }

    /// Embeds the patches at `idx`, adds their positional rows and runs the blocks.
    pub fn forward(&self, g: &mut Graph, name: &str, grid: &PatchGrid, idx: &[usize], trainable: bool) -> Result<Var> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= grid.len()) {
            return invalid(format!("patch index {bad} out of range"));
        }
        let pe = self.posenc_for(grid)?;
        let x = g.constant(grid.patches.select_rows(idx));
        let p = g.constant(pe.table.select_rows(idx));
        let h = self.patch_embed.forward(g, &join(name, "patch_embed"), x, trainable);
        let h = g.add(h, p);
        let h = run_blocks(&self.blocks, g, name, h, trainable);
        Ok(self.norm.forward(g, &join(name, "norm"), h, trainable))
    }
}

impl Params for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        visit_blocks(&self.blocks, prefix, f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        visit_blocks_mut(&mut self.blocks, prefix, f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

pub fn encode(params: &EncoderParams, grid: &PatchGrid, part: &MaskPartition, branch: Branch) -> Result<Matrix> {
    if part.n != grid.len() {
        return invalid(format!("partition over {} patches, grid has {}", part.n, grid.len()));
    }
    let idx = match branch {
        Branch::Visible => &part.visible_idx,
        Branch::Masked => &part.masked_idx,
    };
    let mut g = Graph::new();
    let out = params.forward(&mut g, "enc", grid, idx, false)?;
    Ok(g.value(out).clone())
}

/// Encodes every patch of the grid.
pub fn encode_all(params: &EncoderParams, grid: &PatchGrid) -> Result<Matrix> {
    encode(params, grid, &MaskPartition::all_visible(grid.len()), Branch::Visible)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub mask_token: Matrix,
    pub blocks: Vec<Block>,
    pub out: Linear,
}

impl PredictorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = cfg.init_std;
        Self {
            mask_token: Matrix::trunc_normal(1, cfg.dim, std, rng),
            blocks: (0..cfg.pred_depth)
                .map(|_| Block::new(cfg.dim, cfg.pred_heads, cfg.dim * cfg.mlp_ratio, std, rng))
                .collect(),
            out: Linear::new(cfg.dim, cfg.dim, std, rng),
        }
    }

    /// Predicted features of the masked positions, `[|masked| × D]`.
    pub fn forward(&self, g: &mut Graph, name: &str, z_v: Var, pe: &PositionalEncoding, part: &MaskPartition, trainable: bool) -> Var {
        let token = g.param(&join(name, "mask_token"), &self.mask_token, trainable);
        let seq = g.assemble(z_v, &part.visible_idx, token, &part.masked_idx);
        let p = g.constant(pe.table.clone());
        let h = g.add(seq, p);
        let h = run_blocks(&self.blocks, g, name, h, trainable);
        let h = g.gather_rows(h, &part.masked_idx);
        self.out.forward(g, &join(name, "out"), h, trainable)
    }
}

impl Params for PredictorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "mask_token"), &self.mask_token);
        visit_blocks(&self.blocks, prefix, f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        visit_blocks_mut(&mut self.blocks, prefix, f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

pub fn predict_masked(pp: &PredictorParams, z_v: &Matrix, pe: &PositionalEncoding, part: &MaskPartition) -> Result<Matrix> {
    let d = pp.mask_token.cols();
    if z_v.rows() != part.visible_idx.len() || (z_v.rows() > 0 && z_v.cols() != d) {
        return invalid("visible features do not match the partition");
    }
    if pe.table.rows() != part.n || pe.dim() != d {
        return invalid("positional encoding does not match the partition");
    }
    if part.masked_idx.is_empty() {
        return Ok(Matrix::zeros(0, d));
    }
    let mut g = Graph::new();
    let z = g.constant(if z_v.rows() == 0 { Matrix::zeros(0, d) } else { z_v.clone() });
    let out = pp.forward(&mut g, "pred", z, pe, part, false);
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub enum AudioProjectorParams {
    /// Class token prepended to the patch features, then transformer blocks.
    Transformer { class_token: Matrix, blocks: Vec<Block> },
    /// Mean-pooled features through a two-layer MLP.
    Mlp { fc1: Linear, fc2: Linear },
}

impl AudioProjectorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = cfg.init_std;
        match cfg.projector {
            ProjectorKind::Transformer => Self::Transformer {
                class_token: Matrix::trunc_normal(1, cfg.dim, std, rng),
                blocks: (0..cfg.proj_blocks)
                    .map(|_| Block::new(cfg.dim, cfg.proj_heads, cfg.proj_ffn, std, rng))
                    .collect(),
            },
            ProjectorKind::Mlp => Self::Mlp {
                fc1: Linear::new(cfg.dim, cfg.proj_ffn, std, rng),
                fc2: Linear::new(cfg.proj_ffn, cfg.dim, std, rng),
            },
        }
    }

    /// `[1 × D]` semantic feature.
    pub fn forward(&self, g: &mut Graph, name: &str, z: Var, trainable: bool) -> Var {
        match self {
            Self::Transformer { class_token, blocks } => {
                let cls = g.param(&join(name, "class_token"), class_token, trainable);
                let x = g.concat_rows(&[cls, z]);
                let x = run_blocks(blocks, g, name, x, trainable);
                g.gather_rows(x, &[0])
            }
            Self::Mlp { fc1, fc2 } => {
                let pooled = g.mean_rows(z);
                let h = fc1.forward(g, &join(name, "fc1"), pooled, trainable);
                let h = g.gelu(h);
                fc2.forward(g, &join(name, "fc2"), h, trainable)
            }
        }
    }
}

impl Params for AudioProjectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            Self::Transformer { class_token, blocks } => {
                f(&join(prefix, "class_token"), class_token);
                visit_blocks(blocks, prefix, f);
            }
            Self::Mlp { fc1, fc2 } => {
                fc1.visit(&join(prefix, "fc1"), f);
                fc2.visit(&join(prefix, "fc2"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            Self::Transformer { class_token, blocks } => {
                f(&join(prefix, "class_token"), class_token);
                visit_blocks_mut(blocks, prefix, f);
            }
            Self::Mlp { fc1, fc2 } => {
                fc1.visit_mut(&join(prefix, "fc1"), f);
                fc2.visit_mut(&join(prefix, "fc2"), f);
            }
        }
    }
}

pub fn project_audio(ap: &AudioProjectorParams, z: &Matrix) -> Result<Vec<f64>> {
    if z.rows() == 0 {
        return invalid("projector needs at least one feature row");
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let out = ap.forward(&mut g, "proj", zv, false);
    Ok(g.value(out).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
}

impl TextEncoderParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Self {
        let std = cfg.init_std;
        Self {
            token_embed: Matrix::trunc_normal(vocab, cfg.dim, std, rng),
            pos_embed: Matrix::trunc_normal(cfg.text_max_len, cfg.dim, std, rng),
            blocks: (0..cfg.text_depth)
                .map(|_| Block::new(cfg.dim, cfg.text_heads, cfg.dim * cfg.mlp_ratio, std, rng))
                .collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_embed.rows()
    }

    pub fn max_len(&self) -> usize {
        self.pos_embed.rows()
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_len() {
            return invalid(format!("token sequence length {} outside 1..={}", tokens.len(), self.max_len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return invalid(format!("token id {bad} outside vocabulary of {}", self.vocab()));
        }
        Ok(())
    }

    /// Pooled first-token output, `[1 × D]`.
    pub fn forward(&self, g: &mut Graph, name: &str, tokens: &[usize], trainable: bool) -> Result<Var> {
        self.check(tokens)?;
        let table = g.param(&join(name, "token_embed"), &self.token_embed, trainable);
        let pos = g.param(&join(name, "pos_embed"), &self.pos_embed, trainable);
        let x = g.gather_rows(table, tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.gather_rows(pos, &positions);
        let x = g.add(x, p);
        let x = run_blocks(&self.blocks, g, name, x, trainable);
        Ok(g.gather_rows(x, &[0]))
    }
}

impl Params for TextEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "token_embed"), &self.token_embed);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        visit_blocks(&self.blocks, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "token_embed"), &mut self.token_embed);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        visit_blocks_mut(&mut self.blocks, prefix, f);
    }
}

/// Stage 1 maps cached sentence embeddings; stages 2/2.1 run a text encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum TextPathParams {
    LlmMap(Option<Linear>),
    Encoder(TextEncoderParams),
}

impl TextPathParams {
    pub fn forward_embedding(&self, g: &mut Graph, name: &str, e: &[f64], trainable: bool) -> Result<Var> {
        let Self::LlmMap(map) = self else {
            return invalid("text path holds a text encoder, not an embedding map");
        };
        let x = g.constant(Matrix::row_vector(e));
        match map {
            Some(lin) => {
                if e.len() != lin.w.rows() {
                    return invalid(format!("embedding has {} dims, map expects {}", e.len(), lin.w.rows()));
                }
                Ok(lin.forward(g, &join(name, "llm_map"), x, trainable))
            }
            None => Ok(x),
        }
    }

    pub fn forward_tokens(&self, g: &mut Graph, name: &str, tokens: &[usize], trainable: bool) -> Result<Var> {
        let Self::Encoder(enc) = self else {
            return invalid("text path holds an embedding map, not a text encoder");
        };
        enc.forward(g, &join(name, "encoder"), tokens, trainable)
    }
}

impl Params for TextPathParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            Self::LlmMap(Some(lin)) => lin.visit(&join(prefix, "llm_map"), f),
            Self::LlmMap(None) => {}
            Self::Encoder(enc) => enc.visit(&join(prefix, "encoder"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            Self::LlmMap(Some(lin)) => lin.visit_mut(&join(prefix, "llm_map"), f),
            Self::LlmMap(None) => {}
            Self::Encoder(enc) => enc.visit_mut(&join(prefix, "encoder"), f),
        }
    }
}

pub fn map_text_embedding(tp: &TextPathParams, e: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = tp.forward_embedding(&mut g, "text", e, false)?;
    Ok(g.value(out).data().to_vec())
}

pub fn encode_text(tp: &TextPathParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = tp.forward_tokens(&mut g, "text", tokens, false)?;
    Ok(g.value(out).data().to_vec())
}

/// Checkpoint tensor and gradient name prefixes.
pub mod names {
    pub const ONLINE: &str = "online";
    pub const TARGET: &str = "target";
    pub const PREDICTOR: &str = "predictor";
    pub const PROJECTOR: &str = "projector";
    pub const TEXT: &str = "text";
    pub const TAU: &str = "tau";
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub online: EncoderParams,
    pub target: EncoderParams,
    pub predictor: PredictorParams,
    pub projector: AudioProjectorParams,
    pub text: TextPathParams,
    /// `[1 × 1]` temperature.
    pub tau: Matrix,
}

impl ModelState {
    /// Fresh stage-1 state; the target encoder starts as a copy of the online one.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let online = EncoderParams::new(&config, rng);
        let target = online.clone();
        let predictor = PredictorParams::new(&config, rng);
        let projector = AudioProjectorParams::new(&config, rng);
        let text = TextPathParams::LlmMap(match config.text_map {
            TextMapKind::Linear => Some(Linear::new(config.text_embed_dim, config.dim, config.init_std, rng)),
            TextMapKind::Identity => None,
        });
        Ok(Self {
            config,
            online,
            target,
            predictor,
            projector,
            text,
            tau: Matrix::scalar(TAU_INIT),
        })
    }

    /// Replaces the embedding map with a fresh text encoder (stage 2).
    pub fn attach_text_encoder<R: Rng + ?Sized>(&mut self, vocab: usize, rng: &mut R) -> Result<()> {
        if vocab == 0 {
            return invalid("text encoder needs a non-empty vocabulary");
        }
        self.config.text_vocab = vocab;
        self.text = TextPathParams::Encoder(TextEncoderParams::new(&self.config, vocab, rng));
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau.to_scalar()
    }

    pub fn has_text_encoder(&self) -> bool {
        matches!(self.text, TextPathParams::Encoder(_))
    }

    /// SHA-256 over the parameters whose names start with `prefix`.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        self.visit("", &mut |name, m| {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in m.data() {
                    h.update(v.to_le_bytes());
                }
            }
        });
        h.finalize().into()
    }

    pub fn param(&self, name: &str) -> Option<Matrix> {
        let mut found = None;
        self.visit("", &mut |n, m| {
            if n == name {
                found = Some(m.clone());
            }
        });
        found
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Layout: `M2DK`, u32 version, 32-byte config digest, u32 config-JSON
    /// length + JSON, u32 tensor count, then per tensor u32 name length,
    /// name, u32 rows, u32 cols and little-endian f32 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config.digest())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut tensors = Vec::new();
        self.visit("", &mut |n, m| tensors.push((n.to_string(), m.clone())));
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, m) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        read_exact(r, &mut digest)?;
        let json_len = read_u32(r)? as usize;
        let mut json = vec![0u8; json_len];
        read_exact(r, &mut json)?;
        let config: ModelConfig =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.digest() != digest {
            return Err(Error::Format("checkpoint config digest mismatch".into()));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut raw = vec![0u8; rows * cols * 4];
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Matrix::from_vec(rows, cols, data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_tensors(config, tensors)
    }

    fn from_tensors(config: ModelConfig, mut tensors: std::collections::BTreeMap<String, Matrix>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut state = Self::new(config.clone(), &mut rng)?;
        let text_prefix = join(names::TEXT, "encoder.token_embed");
        if tensors.contains_key(&text_prefix) {
            let vocab = tensors[&text_prefix].rows();
            state.attach_text_encoder(vocab, &mut rng)?;
            state.config = config;
        }
        let mut problem = None;
        state.visit_mut("", &mut |name, m| match tensors.remove(name) {
            Some(t) if t.shape() == m.shape() => *m = t,
            Some(t) => {
                problem.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), m.shape()));
            }
            None => {
                problem.get_or_insert(format!("checkpoint lacks tensor {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Format(p));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(state)
    }
}

impl Params for ModelState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.online.visit(&join(prefix, names::ONLINE), f);
        self.target.visit(&join(prefix, names::TARGET), f);
        self.predictor.visit(&join(prefix, names::PREDICTOR), f);
        self.projector.visit(&join(prefix, names::PROJECTOR), f);
        self.text.visit(&join(prefix, names::TEXT), f);
        f(&join(prefix, names::TAU), &self.tau);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.online.visit_mut(&join(prefix, names::ONLINE), f);
        self.target.visit_mut(&join(prefix, names::TARGET), f);
        self.predictor.visit_mut(&join(prefix, names::PREDICTOR), f);
        self.projector.visit_mut(&join(prefix, names::PROJECTOR), f);
        self.text.visit_mut(&join(prefix, names::TEXT), f);
        f(&join(prefix, names::TAU), &mut self.tau);
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"M2DK";
const CHECKPOINT_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Target standardization with statistics over every entry (or per channel),
/// `(z - mean) / sqrt(var + eps)`.
pub fn standardize_targets(z: &Matrix, norm: TargetNorm) -> Result<Matrix> {
    const EPS: f64 = 1e-6;
    if z.len() < 2 {
        return invalid("target standardization needs at least two values");
    }
    match norm {
        TargetNorm::Global => {
            let mean = z.mean();
            let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            Ok(z.map(|v| (v - mean) * inv))
        }
        TargetNorm::PerFeature => {
            let (rows, cols) = z.shape();
            let mut out = z.clone();
            for c in 0..cols {
                let mean = (0..rows).map(|r| z.get(r, c)).sum::<f64>() / rows as f64;
                let var = (0..rows).map(|r| (z.get(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                for r in 0..rows {
                    out.set(r, c, (z.get(r, c) - mean) * inv);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::PATCH;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            pred_depth: 1,
            pred_heads: 2,
            proj_ffn: 8,
            text_embed_dim: 12,
            text_depth: 1,
            text_heads: 2,
            text_max_len: 6,
            n_f: 1,
            n_t: 4,
            init_std: 0.3,
            ..ModelConfig::desk()
        }
    }

    fn grid(rng: &mut ChaCha8Rng, n_t: usize) -> PatchGrid {
        PatchGrid {
            patches: Matrix::randn(n_t, PATCH * PATCH, rng),
            n_f: 1,
            n_t,
        }
    }

    // Straight-line reference of one pre-norm block, written without the graph.
    fn ln(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * gain[i] + bias[i])
            .collect()
    }

    fn affine(x: &[f64], lin: &Linear) -> Vec<f64> {
        (0..lin.w.cols())
            .map(|j| lin.b.get(0, j) + x.iter().enumerate().map(|(i, v)| v * lin.w.get(i, j)).sum::<f64>())
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn block_ref(b: &Block, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = b.dim();
        let hd = d / b.heads;
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, b.ln1.gain.row(0), b.ln1.bias.row(0))).collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &b.qkv)).collect();
        let n = x.len();
        let mut attn = vec![vec![0.0; d]; n];
        for head in 0..b.heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..hd).map(|c| qkv[i][head * hd + c] * qkv[j][d + head * hd + c]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..hd {
                    attn[i][head * hd + c] = (0..n).map(|j| e[j] / s * qkv[j][2 * d + head * hd + c]).sum();
                }
            }
        }
        x.iter()
            .zip(&attn)
            .map(|(xr, ar)| {
                let a = affine(ar, &b.attn_out);
                let x1: Vec<f64> = xr.iter().zip(&a).map(|(u, v)| u + v).collect();
                let h2 = ln(&x1, b.ln2.gain.row(0), b.ln2.bias.row(0));
                let f: Vec<f64> = affine(&h2, &b.fc1).into_iter().map(gelu).collect();
                let f = affine(&f, &b.fc2);
                x1.iter().zip(&f).map(|(u, v)| u + v).collect()
            })
            .collect()
    }

    fn rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    fn assert_close(a: &Matrix, b: &[Vec<f64>], tol: f64) {
        assert_eq!(a.rows(), b.len());
        for (r, want) in b.iter().enumerate() {
            for (x, y) in a.row(r).iter().zip(want) {
                assert!((x - y).abs() < tol, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn encode_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny();
        let enc = EncoderParams::new(&cfg, &mut rng);
        let g = grid(&mut rng, 4);
        let out = encode_all(&enc, &g).unwrap();
        let x: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                affine(g.patches.row(i), &enc.patch_embed)
                    .iter()
                    .zip(enc.posenc.table.row(i))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let x = block_ref(&enc.blocks[0], &x);
        let want: Vec<Vec<f64>> = x.iter().map(|r| ln(r, enc.norm.gain.row(0), enc.norm.bias.row(0))).collect();
        assert_close(&out, &want, 1e-10);
        assert_eq!(out, encode_all(&enc, &g).unwrap());
    }

    #[test]
    fn encode_branches_select_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderParams::new(&tiny(), &mut rng);
        let g = grid(&mut rng, 4);
        let part = MaskPartition {
            visible_idx: vec![1, 3],
            masked_idx: vec![0, 2],
            n: 4,
        };
        assert_eq!(encode(&enc, &g, &part, Branch::Visible).unwrap().rows(), 2);
        assert_eq!(encode(&enc, &g, &part, Branch::Masked).unwrap().rows(), 2);
        let wrong = MaskPartition::all_visible(5);
        assert!(encode(&enc, &g, &wrong, Branch::Visible).is_err());
    }

    #[test]
    fn predictor_identity_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pp = PredictorParams::new(&tiny(), &mut rng);
        pp.blocks[0].zero_residuals();
        pp.out = Linear {
            w: Matrix::identity(8),
            b: Matrix::zeros(1, 8),
        };
        let pe = PositionalEncoding::sincos_2d(1, 4, 8).unwrap();
        let part = MaskPartition {
            visible_idx: vec![0, 2],
            masked_idx: vec![1, 3],
            n: 4,
        };
        let z_v = Matrix::randn(2, 8, &mut rng);
        let out = predict_masked(&pp, &z_v, &pe, &part).unwrap();
        let assembled = crate::masking::assemble_predictor_input(&z_v, pp.mask_token.row(0), &pe, &part).unwrap();
        assert!(out.max_abs_diff(&assembled.select_rows(&[1, 3])) < 1e-15);

        let none = MaskPartition::all_visible(4);
        assert_eq!(predict_masked(&pp, &Matrix::randn(4, 8, &mut rng), &pe, &none).unwrap().rows(), 0);
    }

    #[test]
    fn predictor_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pp = PredictorParams::new(&tiny(), &mut rng);
        let pe = PositionalEncoding::sincos_2d(1, 4, 8).unwrap();
        let part = MaskPartition {
            visible_idx: vec![3],
            masked_idx: vec![0, 1, 2],
            n: 4,
        };
        let z_v = Matrix::randn(1, 8, &mut rng);
        let out = predict_masked(&pp, &z_v, &pe, &part).unwrap();
        let x = rows(&crate::masking::assemble_predictor_input(&z_v, pp.mask_token.row(0), &pe, &part).unwrap());
        let x = block_ref(&pp.blocks[0], &x);
        let want: Vec<Vec<f64>> = [0, 1, 2].iter().map(|&i| affine(&x[i], &pp.out)).collect();
        assert_close(&out, &want, 1e-10);
    }

    #[test]
    fn projector_identity_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let mut ap = AudioProjectorParams::new(&cfg, &mut rng);
        let z = Matrix::randn(3, 8, &mut rng);
        let AudioProjectorParams::Transformer { class_token, blocks } = &ap else { panic!() };
        let mut x = vec![class_token.row(0).to_vec()];
        x.extend(rows(&z));
        let want = block_ref(&blocks[0], &x);
        let got = project_audio(&ap, &z).unwrap();
        assert_close(&Matrix::row_vector(&got), &want[..1], 1e-10);

        if let AudioProjectorParams::Transformer { class_token, blocks } = &mut ap {
            blocks[0].zero_residuals();
            let cls = class_token.row(0).to_vec();
            assert_eq!(project_audio(&ap, &Matrix::randn(1, 8, &mut rng)).unwrap(), cls);
        }
        assert!(project_audio(&ap, &Matrix::zeros(0, 8)).is_err());
    }

    #[test]
    fn projector_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [ProjectorKind::Transformer, ProjectorKind::Mlp] {
            let cfg = ModelConfig { projector: kind, ..tiny() };
            let ap = AudioProjectorParams::new(&cfg, &mut rng);
            let z = Matrix::randn(5, 8, &mut rng);
            let a = project_audio(&ap, &z).unwrap();
            let b = project_audio(&ap, &z.select_rows(&[4, 2, 0, 3, 1])).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn text_map_examples() {
        let zero = TextPathParams::LlmMap(Some(Linear::zeros(12, 8)));
        assert_eq!(map_text_embedding(&zero, &[1.0; 12]).unwrap(), vec![0.0; 8]);

        let mut w = Matrix::zeros(12, 8);
        for i in 0..8 {
            w.set(i, i, 1.0);
        }
        let copy = TextPathParams::LlmMap(Some(Linear { w, b: Matrix::zeros(1, 8) }));
        let e: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(map_text_embedding(&copy, &e).unwrap(), e[..8].to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lin = Linear::new(12, 8, 1.0, &mut rng);
        let got = map_text_embedding(&TextPathParams::LlmMap(Some(lin.clone())), &e).unwrap();
        let want = affine(&e, &lin);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

        assert!(map_text_embedding(&copy, &[0.0; 11]).is_err());
        assert!(encode_text(&copy, &[0]).is_err());
    }

    #[test]
    fn text_encoder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny();
        let mut enc = TextEncoderParams::new(&cfg, 10, &mut rng);
        let tp = TextPathParams::Encoder(enc.clone());
        assert_eq!(encode_text(&tp, &[1, 2, 3]).unwrap(), encode_text(&tp, &[1, 2, 3]).unwrap());
        assert!(encode_text(&tp, &[]).is_err());
        assert!(encode_text(&tp, &[0; 7]).is_err());
        assert!(encode_text(&tp, &[10]).is_err());
        assert!(map_text_embedding(&tp, &[0.0; 12]).is_err());

        // reference: embed + position, one block, first row
        let tokens = [4, 0, 9];
        let x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| enc.token_embed.row(t).iter().zip(enc.pos_embed.row(p)).map(|(a, b)| a + b).collect())
            .collect();
        let want = block_ref(&enc.blocks[0], &x);
        let got = encode_text(&tp, &tokens).unwrap();
        assert_close(&Matrix::row_vector(&got), &want[..1], 1e-10);

        enc.blocks[0].zero_residuals();
        enc.pos_embed = Matrix::zeros(6, 8);
        let tp = TextPathParams::Encoder(enc.clone());
        assert_eq!(encode_text(&tp, &[5]).unwrap(), enc.token_embed.row(5).to_vec());
    }

    #[test]
    fn standardize_target_examples() {
        let z = Matrix::from_vec(2, 2, vec![1.0, -1.0, 1.0, -1.0]);
        let s = standardize_targets(&z, TargetNorm::Global).unwrap();
        assert!(s.max_abs_diff(&z) < 1e-6);
        let c = standardize_targets(&Matrix::filled(3, 2, 4.2), TargetNorm::Global).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Matrix::randn(4, 3, &mut rng).map(|v| 3.0 * v + 2.0);
        let s = standardize_targets(&r, TargetNorm::Global).unwrap();
        let mean = s.mean();
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-5);
        let p = standardize_targets(&r, TargetNorm::PerFeature).unwrap();
        for c in 0..3 {
            let m: f64 = (0..4).map(|i| p.get(i, c)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
        }
        assert!(standardize_targets(&Matrix::zeros(1, 1), TargetNorm::Global).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let state = ModelState::new(tiny(), &mut rng).unwrap();
        let mut a = Vec::new();
        state.write_to(&mut a).unwrap();
        let back = ModelState::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert!((back.tau() - TAU_INIT).abs() < 1e-8);

        let mut s2 = state.clone();
        s2.attach_text_encoder(17, &mut rng).unwrap();
        let mut a = Vec::new();
        s2.write_to(&mut a).unwrap();
        let back = ModelState::read_from(&mut a.as_slice()).unwrap();
        assert!(back.has_text_encoder());
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);

        assert!(matches!(ModelState::read_from(&mut &a[..a.len() - 3]), Err(Error::Format(_))));
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(ModelState::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn digest_tracks_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ModelState::new(tiny(), &mut rng).unwrap();
        let online = s.digest(names::ONLINE);
        let proj = s.digest(names::PROJECTOR);
        s.projector.visit_mut("", &mut |_, m| m.data_mut()[0] += 1.0);
        assert_eq!(online, s.digest(names::ONLINE));
        assert_ne!(proj, s.digest(names::PROJECTOR));
    }
}
