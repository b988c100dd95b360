//! Hierarchical vision backbone and token-level text encoder.
//!
//! Both are small from-scratch transformers with the same stage/shape
//! contract as a four-stage windowed backbone: the stem embeds
//! `patch_size` patches, each later stage halves the resolution by 2x2
//! patch merging and doubles the width. Attention inside the toy stages is
//! global. Externally exported weights can be loaded into the
//! `encoders.*` namespace with [`load_pretrained`].

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, Scope,
};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Sentence token prepended to every expression.
pub const SENTENCE_ID: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<s>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub text_vocab_size: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub max_tokens: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Exclude text-encoder parameters from optimizer updates.
    pub freeze_text: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 480,
            patch_size: 4,
            stage_channels: [32, 64, 128, 256],
            stage_depths: [1, 1, 1, 1],
            text_vocab_size: 64,
            text_dim: 64,
            text_layers: 1,
            max_tokens: 48,
            num_heads: 4,
            mlp_ratio: 4,
            freeze_text: false,
        }
    }
}

impl EncoderConfig {
    /// 64x64 desk-scale configuration.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image_size: 64,
            text_vocab_size: vocab_size,
            max_tokens: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step = self.patch_size * 8;
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % step != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size x 8 = {step}",
                self.image_size
            )));
        }
        for i in 0..3 {
            if self.stage_channels[i + 1] != 2 * self.stage_channels[i] {
                return Err(Error::Config(format!(
                    "stage_channels must double stage to stage, got {:?}",
                    self.stage_channels
                )));
            }
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must be at least 2".into()));
        }
        if self.text_vocab_size <= SENTENCE_ID as usize {
            return Err(Error::Config(format!(
                "text_vocab_size {} leaves no room past the reserved ids",
                self.text_vocab_size
            )));
        }
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be positive".into()));
        }
        for &c in self.stage_channels.iter().chain(std::iter::once(&self.text_dim)) {
            if c == 0 || c % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "width {c} is not divisible by num_heads {}",
                    self.num_heads
                )));
            }
        }
        Ok(())
    }

    /// `(H_i, W_i, C_i)` for stages 1..=4.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let base = self.image_size / self.patch_size;
        std::array::from_fn(|i| (base >> i, base >> i, self.stage_channels[i]))
    }
}

/// Token ids for one expression, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExpression {
    token_ids: Vec<u32>,
    pad_mask: Vec<bool>,
    length: usize,
}

impl TokenizedExpression {
    /// Real tokens first, then padding up to `padded_len`.
    pub fn new(tokens: &[u32], padded_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("expression has no tokens".into()));
        }
        if tokens.len() > padded_len {
            return Err(Error::Input(format!(
                "{} tokens exceed the padded length {padded_len}",
                tokens.len()
            )));
        }
        let mut token_ids = tokens.to_vec();
        token_ids.resize(padded_len, PAD_ID);
        let pad_mask = (0..padded_len).map(|i| i < tokens.len()).collect();
        Ok(Self {
            token_ids,
            pad_mask,
            length: tokens.len(),
        })
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    /// Number of real tokens.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn padded_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Same real tokens, different amount of padding.
    pub fn repadded(&self, padded_len: usize) -> Result<Self> {
        Self::new(&self.token_ids[..self.length], padded_len)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} is outside the vocabulary of size {vocab_size}"
            )));
        }
        let real = self.pad_mask.iter().filter(|&&m| m).count();
        if real != self.length || self.pad_mask.len() != self.token_ids.len() {
            return Err(Error::Input("pad mask disagrees with expression length".into()));
        }
        Ok(())
    }
}

/// Token ids and key mask for a batch of expressions.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(B, N)` u32.
    pub ids: Tensor,
    /// `(B, N)` in the model dtype, 1 for real tokens.
    pub mask: Tensor,
}

impl TokenBatch {
    pub fn new(exprs: &[TokenizedExpression], dtype: DType, device: &Device) -> Result<Self> {
        let n = exprs
            .iter()
            .map(|e| e.padded_len())
            .max()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let mut ids = Vec::with_capacity(exprs.len() * n);
        let mut mask = Vec::with_capacity(exprs.len() * n);
        for e in exprs {
            let e = if e.padded_len() == n { e.clone() } else { e.repadded(n)? };
            ids.extend_from_slice(e.token_ids());
            mask.extend(e.pad_mask().iter().map(|&m| if m { 1.0f64 } else { 0.0 }));
        }
        let b = exprs.len();
        Ok(Self {
            ids: Tensor::from_vec(ids, (b, n), device)?,
            mask: Tensor::from_vec(mask, (b, n), device)?.to_dtype(dtype)?,
        })
    }
}

/// Lowercased whitespace word vocabulary with reserved pad/unknown/sentence ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<'a>(expressions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for e in expressions {
            set.extend(Self::words_of(e));
        }
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words_of(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// Sentence token, then words, truncated and padded to `max_tokens`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Result<TokenizedExpression> {
        let words = Self::words_of(text);
        if words.is_empty() {
            return Err(Error::Input("empty expression".into()));
        }
        let mut ids = vec![SENTENCE_ID];
        ids.extend(
            words
                .iter()
                .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID)),
        );
        if ids[1..].iter().all(|&t| t == UNK_ID) {
            log::warn!("expression {text:?} has no in-vocabulary words");
        }
        ids.truncate(max_tokens);
        TokenizedExpression::new(&ids, max_tokens)
    }
}

/// `L_i`: token features `(B, N, C_t)` with their key mask.
#[derive(Debug, Clone)]
pub struct LanguageFeatures {
    pub matrix: Tensor,
    pub mask: Tensor,
    pub stage_tag: usize,
}

/// Stage-wise visual maps `V_1..V_4`, each `(B, C_i, H_i, W_i)`.
#[derive(Debug, Clone)]
pub struct VisualFeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl VisualFeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Input(format!(
                "pyramid needs 4 stages, got {}",
                self.stages.len()
            )));
        }
        for i in 0..3 {
            let (_, c0, h0, w0) = self.stages[i].dims4()?;
            let (_, c1, h1, w1) = self.stages[i + 1].dims4()?;
            if c1 != 2 * c0 || h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::Input(format!(
                    "stage {} -> {} breaks the halving/doubling schedule",
                    i + 1,
                    i + 2
                )));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            nn::ensure_finite(s, &format!("pyramid stage {}", i + 1))?;
        }
        Ok(())
    }
}

/// Post-norm transformer encoder layer (text side).
#[derive(Debug, Clone)]
struct TextLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
}

impl TextLayer {
    fn new(s: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut s.sub("attn"), dim, dim, heads)?,
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            mlp: Mlp::new(&mut s.sub("mlp"), dim, dim * mlp_ratio)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (a, _) = self.attn.forward(x, x, Some(mask), ctx)?;
        let x = self.norm1.forward(&(x + a)?, ctx)?;
        let m = self.mlp.forward(&x, ctx)?;
        self.norm2.forward(&(x + m)?, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    pos: Tensor,
    norm: LayerNorm,
    layers: Vec<TextLayer>,
    vocab_size: usize,
    max_tokens: usize,
}

impl TextEncoder {
    pub fn new(s: &mut Scope, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.text_dim;
        let layers = (0..cfg.text_layers)
            .map(|i| TextLayer::new(&mut s.sub(&format!("layer{i}")), d, cfg.num_heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: s.param("embed.weight", &[cfg.text_vocab_size, d], Init::Normal(0.02))?,
            pos: s.param("pos_embed", &[cfg.max_tokens, d], Init::Normal(0.02))?,
            norm: LayerNorm::new(&mut s.sub("embed_norm"), d)?,
            layers,
            vocab_size: cfg.text_vocab_size,
            max_tokens: cfg.max_tokens,
        })
    }

    /// `ids` `(B, N)` u32 and `mask` `(B, N)`; returns `(B, N, C_t)`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        if n > self.max_tokens {
            return Err(Error::Input(format!(
                "{n} tokens exceed max_tokens {}",
                self.max_tokens
            )));
        }
        let max_id = ids.max_all()?.to_scalar::<u32>()?;
        if max_id as usize >= self.vocab_size {
            return Err(Error::Input(format!(
                "token id {max_id} is outside the vocabulary of size {}",
                self.vocab_size
            )));
        }
        let emb = ctx.p(&self.embed);
        let d = emb.dim(1)?;
        let x = emb.index_select(&ids.flatten_all()?, 0)?.reshape((b, n, d))?;
        let x = x.broadcast_add(&ctx.p(&self.pos).narrow(0, 0, n)?)?;
        let mut x = self.norm.forward(&x, ctx)?;
        for layer in &self.layers {
            x = layer.forward(&x, mask, ctx)?;
        }
        Ok(x)
    }

    /// Encodes one expression into `L_1`.
    pub fn encode_text(&self, expr: &TokenizedExpression, ctx: Ctx) -> Result<LanguageFeatures> {
        expr.validate(self.vocab_size)?;
        let batch = TokenBatch::new(std::slice::from_ref(expr), self.embed.dtype(), self.embed.device())?;
        Ok(LanguageFeatures {
            matrix: self.forward(&batch.ids, &batch.mask, ctx)?,
            mask: batch.mask,
            stage_tag: 1,
        })
    }
}

/// Pre-norm transformer block with global attention.
#[derive(Debug, Clone)]
struct VisionBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl VisionBlock {
    fn new(s: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut s.sub("attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            mlp: Mlp::new(&mut s.sub("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    /// Tokens `(B, T, C)`.
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x, ctx)?;
        let (a, _) = self.attn.forward(&h, &h, None, ctx)?;
        let x = (x + a)?;
        let h = self.norm2.forward(&x, ctx)?;
        Ok((&x + self.mlp.forward(&h, ctx)?)?)
    }
}

fn run_blocks(blocks: &[VisionBlock], x: &Tensor, ctx: Ctx) -> Result<Tensor> {
    if blocks.is_empty() {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let mut t = nn::to_tokens(x)?;
    for b in blocks {
        t = b.forward(&t, ctx)?;
    }
    nn::from_tokens(&t, h, w)
}

/// 2x2 neighbourhood concat, norm, linear reduction to twice the width.
#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
    in_dim: usize,
}

impl PatchMerging {
    fn new(s: &mut Scope, in_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut s.sub("norm"), 4 * in_dim)?,
            reduction: Linear::new(&mut s.sub("reduction"), 4 * in_dim, 2 * in_dim, false)?,
            in_dim,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_dim {
            return Err(Error::Config(format!(
                "patch merging expects {} channels, got {c}",
                self.in_dim
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Input(format!("cannot merge an odd {h}x{w} map")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let t = x
            .reshape((b, c, h2, 2, w2, 2))?
            .permute([0, 2, 4, 3, 5, 1])?
            .reshape((b, h2 * w2, 4 * c))?;
        let t = self.reduction.forward(&self.norm.forward(&t, ctx)?, ctx)?;
        nn::from_tokens(&t, h2, w2)
    }
}

#[derive(Debug, Clone)]
struct VisionStage {
    merge: PatchMerging,
    blocks: Vec<VisionBlock>,
}

#[derive(Debug, Clone)]
pub struct VisionBackbone {
    patch_embed: nn::Conv2d,
    stem_norm: LayerNorm,
    pos: Tensor,
    stage1: Vec<VisionBlock>,
    stages: Vec<VisionStage>,
    image_size: usize,
}

impl VisionBackbone {
    pub fn new(s: &mut Scope, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.stage_channels;
        let grid = cfg.image_size / cfg.patch_size;
        let mut stem = s.sub("stem");
        let patch_embed = nn::Conv2d::new(
            &mut stem.sub("proj"),
            3,
            c[0],
            cfg.patch_size,
            cfg.patch_size,
            0,
            true,
        )?;
        let stem_norm = LayerNorm::new(&mut stem.sub("norm"), c[0])?;
        let pos = stem.param("pos_embed", &[grid * grid, c[0]], Init::Normal(0.02))?;
        let blocks = |s: &mut Scope, dim: usize, depth: usize| -> Result<Vec<VisionBlock>> {
            (0..depth)
                .map(|j| VisionBlock::new(&mut s.sub(&format!("block{j}")), dim, cfg.num_heads, cfg.mlp_ratio))
                .collect()
        };
        let stage1 = blocks(&mut s.sub("stage1"), c[0], cfg.stage_depths[0])?;
        let mut stages = Vec::new();
        for i in 1..4 {
            let mut ss = s.sub(&format!("stage{}", i + 1));
            let merge = PatchMerging::new(&mut ss.sub("merge"), c[i - 1])?;
            let bl = blocks(&mut ss, c[i], cfg.stage_depths[i])?;
            stages.push(VisionStage { merge, blocks: bl });
        }
        Ok(Self {
            patch_embed,
            stem_norm,
            pos,
            stage1,
            stages,
            image_size: cfg.image_size,
        })
    }

    /// Image `(B, 3, H, W)` to `V_1` `(B, C_1, H/patch, W/patch)`.
    pub fn vision_stem(&self, image: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Input(format!(
                "expected a 3x{0}x{0} image, got {ch}x{h}x{w}",
                self.image_size
            )));
        }
        let x = self.patch_embed.forward(image, ctx)?;
        let (_, _, gh, gw) = x.dims4()?;
        let t = self.stem_norm.forward(&nn::to_tokens(&x)?, ctx)?;
        let t = t.broadcast_add(&ctx.p(&self.pos))?;
        run_blocks(&self.stage1, &nn::from_tokens(&t, gh, gw)?, ctx)
    }

    /// Stage `i` in 2..=4: merge, halve resolution, double width, then transformer blocks.
    pub fn vision_stage(&self, i: usize, features: &Tensor, ctx: Ctx) -> Result<Tensor> {
        if !(2..=4).contains(&i) {
            return Err(Error::Usage(format!("vision stage index {i} outside 2..=4")));
        }
        let stage = &self.stages[i - 2];
        let x = stage.merge.forward(features, ctx)?;
        run_blocks(&stage.blocks, &x, ctx)
    }

    /// Plain four-stage pass without any cross-modal enhancement.
    pub fn pyramid(&self, image: &Tensor, ctx: Ctx) -> Result<VisualFeaturePyramid> {
        let mut stages = vec![self.vision_stem(image, ctx)?];
        for i in 2..=4 {
            let next = self.vision_stage(i, stages.last().unwrap(), ctx)?;
            stages.push(next);
        }
        Ok(VisualFeaturePyramid { stages })
    }
}

/// Load externally exported weights into every `encoders.*` parameter they name.
///
/// The file is a safetensors container whose keys use the same dotted names
/// as the store (`encoders.vision.stem.proj.weight`, ...). Returns the names
/// that were loaded; keys outside `encoders.` or unknown to the store are errors
/// when `strict`.
pub fn load_pretrained(store: &ParamStore, path: &Path, strict: bool) -> Result<Vec<String>> {
    let tensors = candle_core::safetensors::load(path, store.device())?;
    let mut loaded = Vec::new();
    for (name, t) in tensors {
        let known = name.starts_with("encoders.")
            && (store.params().contains_key(&name) || store.buffers().contains_key(&name));
        if !known {
            if strict {
                return Err(Error::Input(format!(
                    "pretrained file {} has unexpected tensor {name}",
                    path.display()
                )));
            }
            continue;
        }
        store.set(&name, &t)?;
        loaded.push(name);
    }
    loaded.sort();
    Ok(loaded)
}
