//! Top-down text-conditioned decoder and its baseline variants.
//!
//! `Y_4` is the enhanced stage-4 map. For stages 3 and 2 the upsampled
//! previous state is concatenated with the enhanced stage map, passed
//! through a segmentation block and then a transformer decoder layer that
//! cross-attends to the final language features. Stage 1 uses the
//! segmentation block only. A 1x1 convolution produces two class maps which
//! are bilinearly upsampled to the input resolution.
//!
//! The `standard` variant drops the transformer layers and uses plain
//! convolutions; `oad` keeps rotation-adaptive convolutions in both
//! positions of every block but does not read the text.

use std::f64::consts::FRAC_PI_2;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{LanguageFeatures, VisualFeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    Tcmd,
    Standard,
    Oad,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 3] = [Self::Tcmd, Self::Standard, Self::Oad];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tcmd => "tcmd",
            Self::Standard => "standard",
            Self::Oad => "oad",
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcmd" => Ok(Self::Tcmd),
            "standard" => Ok(Self::Standard),
            "oad" => Ok(Self::Oad),
            other => Err(Error::Config(format!("unknown decoder variant {other:?}"))),
        }
    }
}

/// `(9, 9)` bilinear resampling weights rotating a 3x3 kernel by `angle` radians.
///
/// Entry `[p][q]` is the weight of base tap `q` in rotated tap `p`, with taps
/// in row-major order and offsets `(x, y) = (col - 1, row - 1)`. The rotated
/// kernel at `p` samples the base kernel at `R(-angle) p`; samples falling
/// outside the 3x3 support contribute nothing.
pub fn rotation_weights(angle: f64) -> [[f64; 9]; 9] {
    let (sin, cos) = angle.sin_cos();
    let mut w = [[0.0; 9]; 9];
    for (p, row) in w.iter_mut().enumerate() {
        let (px, py) = ((p % 3) as f64 - 1.0, (p / 3) as f64 - 1.0);
        let sx = cos * px + sin * py;
        let sy = -sin * px + cos * py;
        for (q, v) in row.iter_mut().enumerate() {
            let (qx, qy) = ((q % 3) as f64 - 1.0, (q / 3) as f64 - 1.0);
            *v = (1.0 - (sx - qx).abs()).max(0.0) * (1.0 - (sy - qy).abs()).max(0.0);
        }
    }
    w
}

fn tap_offsets(dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let xs: Vec<f64> = (0..9).map(|k| (k % 3) as f64 - 1.0).collect();
    let ys: Vec<f64> = (0..9).map(|k| (k / 3) as f64 - 1.0).collect();
    Ok((
        Tensor::from_vec(xs, 9, device)?.to_dtype(dtype)?,
        Tensor::from_vec(ys, 9, device)?.to_dtype(dtype)?,
    ))
}

/// Differentiable batch version of [`rotation_weights`]: `angles` `(B,)` to `(B, 9, 9)`.
pub fn rotation_weights_tensor(angles: &Tensor) -> Result<Tensor> {
    let b = angles.dim(0)?;
    let (tx, ty) = tap_offsets(angles.dtype(), angles.device())?;
    let cos = angles.cos()?.reshape((b, 1, 1))?;
    let sin = angles.sin()?.reshape((b, 1, 1))?;
    let px = tx.reshape((1, 9, 1))?;
    let py = ty.reshape((1, 9, 1))?;
    let sx = (cos.broadcast_mul(&px)? + sin.broadcast_mul(&py)?)?;
    let sy = (cos.broadcast_mul(&py)? - sin.broadcast_mul(&px)?)?;
    let qx = tx.reshape((1, 1, 9))?;
    let qy = ty.reshape((1, 1, 9))?;
    let wx = sx.broadcast_sub(&qx)?.abs()?.affine(-1.0, 1.0)?.relu()?;
    let wy = sy.broadcast_sub(&qy)?.abs()?.affine(-1.0, 1.0)?.relu()?;
    Ok((wx * wy)?)
}

/// Rotates an `(O, I, 3, 3)` kernel once per angle; returns `(B, O, I, 3, 3)`.
pub fn rotate_kernel(kernel: &Tensor, angles: &Tensor) -> Result<Tensor> {
    let (o, i, kh, kw) = kernel.dims4()?;
    if (kh, kw) != (3, 3) {
        return Err(Error::Config(format!("rotation needs a 3x3 kernel, got {kh}x{kw}")));
    }
    let b = angles.dim(0)?;
    let r = rotation_weights_tensor(angles)?;
    let flat = kernel.reshape((1, o * i, 9))?;
    let rotated = flat.broadcast_matmul(&r.transpose(1, 2)?.contiguous()?)?;
    Ok(rotated.reshape((b, o, i, 3, 3))?)
}

/// Adaptive rotated 3x3 convolution: one predicted angle per sample rotates the base kernel.
#[derive(Debug, Clone)]
pub struct ArcConv {
    conv: Conv2d,
    angle: Linear,
}

impl ArcConv {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(s, in_ch, out_ch, 3, 1, 1, true)?,
            angle: Linear::new(&mut s.sub("angle"), in_ch, 1, true)?,
        })
    }

    pub fn base(&self) -> &Conv2d {
        &self.conv
    }

    /// Global average pool, linear, Tanh scaled to `(-pi/2, pi/2)`; returns `(B,)`.
    pub fn predict_angle(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        Ok(self.angle.forward(&pooled, ctx)?.tanh()?.affine(FRAC_PI_2, 0.0)?.flatten_all()?)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let angles = self.predict_angle(x, ctx)?;
        self.forward_with_angles(x, &angles, ctx)
    }

    /// Apply with caller-supplied per-sample angles `(B,)`.
    pub fn forward_with_angles(&self, x: &Tensor, angles: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let b = x.dim(0)?;
        if angles.dim(0)? != b {
            return Err(Error::Input(format!(
                "{} angles for a batch of {b}",
                angles.dim(0)?
            )));
        }
        let kernels = rotate_kernel(&ctx.p(self.conv.weight()), angles)?;
        let outs = (0..b)
            .map(|j| {
                let k = kernels.get(j)?;
                self.conv.forward_with_kernel(&x.narrow(0, j, 1)?, &k, ctx)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 0)?)
    }
}

/// Standalone rotated convolution with the predicted angle.
pub fn arc_conv(x: &Tensor, params: &ArcConv, ctx: Ctx) -> Result<Tensor> {
    nn::ensure_finite(x, "arc_conv input")?;
    params.forward(x, ctx)
}

#[derive(Debug, Clone)]
pub enum SegConv {
    Plain(Conv2d),
    Rotated(ArcConv),
}

impl SegConv {
    fn new(s: &mut Scope, in_ch: usize, out_ch: usize, rotated: bool) -> Result<Self> {
        Ok(if rotated {
            Self::Rotated(ArcConv::new(s, in_ch, out_ch)?)
        } else {
            Self::Plain(Conv2d::new(s, in_ch, out_ch, 3, 1, 1, true)?)
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        match self {
            Self::Plain(c) => c.forward(x, ctx),
            Self::Rotated(c) => c.forward(x, ctx),
        }
    }

    /// The 3x3 base convolution.
    pub fn base(&self) -> &Conv2d {
        match self {
            Self::Plain(c) => c,
            Self::Rotated(c) => c.base(),
        }
    }

    fn in_channels(&self) -> usize {
        self.base().in_channels()
    }
}

/// conv_a, BN, ReLU, conv_b, BN, ReLU; spatial size preserved.
#[derive(Debug, Clone)]
pub struct SegBlock {
    pub conv_a: SegConv,
    bn_a: BatchNorm2d,
    pub conv_b: SegConv,
    bn_b: BatchNorm2d,
}

impl SegBlock {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize, rotate_a: bool, rotate_b: bool) -> Result<Self> {
        Ok(Self {
            conv_a: SegConv::new(&mut s.sub("conv_a"), in_ch, out_ch, rotate_a)?,
            bn_a: BatchNorm2d::new(&mut s.sub("bn_a"), out_ch)?,
            conv_b: SegConv::new(&mut s.sub("conv_b"), out_ch, out_ch, rotate_b)?,
            bn_b: BatchNorm2d::new(&mut s.sub("bn_b"), out_ch)?,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.conv_b.base().out_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.conv_a.in_channels() {
            return Err(Error::Config(format!(
                "segmentation block expects {} channels, got {c}",
                self.conv_a.in_channels()
            )));
        }
        let x = self.bn_a.forward(&self.conv_a.forward(x, ctx)?, ctx)?.relu()?;
        Ok(self.bn_b.forward(&self.conv_b.forward(&x, ctx)?, ctx)?.relu()?)
    }
}

pub fn seg_block(x: &Tensor, params: &SegBlock, ctx: Ctx) -> Result<Tensor> {
    params.forward(x, ctx)
}

/// Post-norm decoder layer: self-attention, cross-attention to the text, feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerDecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl TransformerDecoderLayer {
    pub fn new(s: &mut Scope, dim: usize, memory_dim: usize, heads: usize, ffn_ratio: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut s.sub("self_attn"), dim, dim, heads)?,
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            cross_attn: MultiHeadAttention::new(&mut s.sub("cross_attn"), dim, memory_dim, heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            ffn: Mlp::new(&mut s.sub("ffn"), dim, dim * ffn_ratio)?,
            norm3: LayerNorm::new(&mut s.sub("norm3"), dim)?,
        })
    }

    /// `target` `(B, T, C)`, `memory` with its key mask. Also returns the cross-attention weights.
    pub fn forward(
        &self,
        target: &Tensor,
        memory: &LanguageFeatures,
        ctx: Ctx,
    ) -> Result<(Tensor, Tensor)> {
        let (sa, _) = self.self_attn.forward(target, target, None, ctx)?;
        let x = self.norm1.forward(&(target + sa)?, ctx)?;
        let (ca, w) = self
            .cross_attn
            .forward_with_weights(&x, &memory.matrix, Some(&memory.mask), ctx)?;
        let x = self.norm2.forward(&(x + ca)?, ctx)?;
        let f = self.ffn.forward(&x, ctx)?;
        Ok((self.norm3.forward(&(x + f)?, ctx)?, w.expect("weights requested")))
    }
}

pub fn transformer_decoder_layer(
    target: &Tensor,
    memory: &LanguageFeatures,
    params: &TransformerDecoderLayer,
    ctx: Ctx,
) -> Result<Tensor> {
    Ok(params.forward(target, memory, ctx)?.0)
}

/// `(B, 2, H, W)` class scores at input resolution.
#[derive(Debug, Clone)]
pub struct SegmentationLogits {
    pub scores: Tensor,
}

impl SegmentationLogits {
    /// Foreground where class 1 strictly beats class 0; one `Vec<u8>` per batch element.
    pub fn binarize(&self) -> Result<Vec<Vec<u8>>> {
        let s = self.scores.to_dtype(DType::F32)?;
        let diff = (s.narrow(1, 1, 1)? - s.narrow(1, 0, 1)?)?.flatten_from(1)?;
        Ok(diff
            .to_vec2::<f32>()?
            .into_iter()
            .map(|row| row.into_iter().map(|d| u8::from(d > 0.0)).collect())
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: SegmentationLogits,
    /// `Y_1..Y_4`.
    pub states: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    variant: DecoderVariant,
    /// Blocks for stages 3, 2, 1.
    seg: Vec<SegBlock>,
    /// Decoder layers for stages 3, 2 (`tcmd` only).
    layers: Vec<TransformerDecoderLayer>,
    classifier: Conv2d,
    output_size: usize,
}

impl Decoder {
    pub fn new(
        s: &mut Scope,
        variant: DecoderVariant,
        stage_channels: [usize; 4],
        text_dim: usize,
        heads: usize,
        output_size: usize,
    ) -> Result<Self> {
        let (rot_a, rot_b) = match variant {
            DecoderVariant::Tcmd => (true, false),
            DecoderVariant::Standard => (false, false),
            DecoderVariant::Oad => (true, true),
        };
        let mut seg = Vec::new();
        let mut layers = Vec::new();
        for i in [3usize, 2, 1] {
            let c = stage_channels[i - 1];
            let mut ss = s.sub(&format!("stage{i}"));
            seg.push(SegBlock::new(&mut ss.sub("seg"), stage_channels[i] + c, c, rot_a, rot_b)?);
            if variant == DecoderVariant::Tcmd && i >= 2 {
                layers.push(TransformerDecoderLayer::new(&mut ss.sub("decoder"), c, text_dim, heads, 4)?);
            }
        }
        let classifier = Conv2d::new(&mut s.sub("classifier"), stage_channels[0], 2, 1, 1, 0, true)?;
        Ok(Self {
            variant,
            seg,
            layers,
            classifier,
            output_size,
        })
    }

    pub fn variant(&self) -> DecoderVariant {
        self.variant
    }

    pub fn seg_blocks(&self) -> &[SegBlock] {
        &self.seg
    }

    pub fn decoder_layers(&self) -> &[TransformerDecoderLayer] {
        &self.layers
    }

    pub fn decode(
        &self,
        pyramid: &VisualFeaturePyramid,
        l5: &LanguageFeatures,
        ctx: Ctx,
    ) -> Result<DecodeOutput> {
        if pyramid.stages.len() != 4 {
            return Err(Error::Input(format!(
                "decoder needs 4 pyramid stages, got {}",
                pyramid.stages.len()
            )));
        }
        let mut y = pyramid.stages[3].clone();
        let mut states = vec![y.clone()];
        for (k, i) in [3usize, 2, 1].into_iter().enumerate() {
            let v = &pyramid.stages[i - 1];
            let (_, _, h, w) = v.dims4()?;
            let up = nn::resize_bilinear(&y, h, w)?;
            let fused = self.seg[k].forward(&Tensor::cat(&[&up, v], 1)?, ctx)?;
            y = match self.layers.get(k) {
                Some(layer) if i >= 2 => {
                    let (t, _) = layer.forward(&nn::to_tokens(&fused)?, l5, ctx)?;
                    nn::from_tokens(&t, h, w)?
                }
                _ => fused,
            };
            states.push(y.clone());
        }
        states.reverse();
        let logits = self.classifier.forward(&y, ctx)?;
        let scores = nn::resize_bilinear(&logits, self.output_size, self.output_size)?;
        Ok(DecodeOutput {
            logits: SegmentationLogits { scores },
            states,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angle_is_identity() {
        let w = rotation_weights(0.0);
        for (p, row) in w.iter().enumerate() {
            for (q, &v) in row.iter().enumerate() {
                assert_eq!(v, if p == q { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_is_a_permutation() {
        let w = rotation_weights(FRAC_PI_2);
        for row in w {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().filter(|v| **v > 1e-9).count() == 1);
        }
    }

    #[test]
    fn tensor_weights_match_scalar_weights() -> Result<()> {
        let angles = [0.3f64, -1.1, 0.0];
        let t = rotation_weights_tensor(&Tensor::new(&angles, &Device::Cpu)?)?;
        let v = t.to_dtype(DType::F64)?;
        for (b, &a) in angles.iter().enumerate() {
            let expect = rotation_weights(a);
            let got = v.get(b)?.to_vec2::<f64>()?;
            for p in 0..9 {
                for q in 0..9 {
                    assert!((got[p][q] - expect[p][q]).abs() < 1e-12);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in DecoderVariant::ALL {
            assert_eq!(v.name().parse::<DecoderVariant>().unwrap(), v);
        }
        assert!("unet".parse::<DecoderVariant>().is_err());
    }
}
