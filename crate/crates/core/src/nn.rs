//! Parameter storage and the differentiable building blocks every model
//! component is assembled from.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`encoders.vision.stage2.merge.reduction.weight`, ...). Layers hold
//! tensors that share storage with the store's variables, so optimizer
//! updates are visible without rebuilding the model. The forward [`Ctx`]
//! decides whether those tensors are tracked for backprop.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics in normalization layers (and running-stat updates).
    pub train: bool,
    /// Record the autograd graph through parameters.
    pub track: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        train: true,
        track: true,
    };
    pub const EVAL: Ctx = Ctx {
        train: false,
        track: false,
    };

    #[inline]
    pub fn p(&self, t: &Tensor) -> Tensor {
        if self.track {
            t.clone()
        } else {
            t.detach()
        }
    }
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

/// Trainable parameters plus non-trainable buffers (normalization running stats).
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite one parameter or buffer in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Usage(format!("no parameter or buffer named {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Input(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Zero every parameter whose name satisfies `pred`; returns how many were zeroed.
    pub fn zero_matching(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.params {
            if pred(name) {
                var.set(&var.as_tensor().zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Sum of all parameter values in float64, as a cheap identity fingerprint.
    pub fn checksum(&self) -> Result<f64> {
        let mut total = 0.0;
        for (i, var) in self.params.values().enumerate() {
            let s = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .sum_all()?
                .to_scalar::<f64>()?;
            total += s * (1.0 + i as f64 * 1e-3);
        }
        Ok(total)
    }

    /// All named tensors (parameters and buffers), detached.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }
}

/// Builds a [`ParamStore`] from a seeded generator.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            store: ParamStore {
                device: Device::Cpu,
                dtype,
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            builder: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub struct Scope<'a> {
    builder: &'a mut ParamBuilder,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.join(name),
            builder: self.builder,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.builder.store.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        if self.builder.store.params.contains_key(&full) {
            return Err(Error::Internal(format!("duplicate parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let rng = &mut self.builder.rng;
        let data: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.builder.store.device)?
            .to_dtype(self.builder.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.builder.store.params.insert(full, var);
        Ok(out)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let full = self.join(name);
        let t = Tensor::full(value, shape, &self.builder.store.device)?
            .to_dtype(self.builder.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.builder.store.buffers.insert(full, var.clone());
        Ok(var)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(s, in_dim, out_dim, bias, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        s: &mut Scope,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = s.param("weight", &[out_dim, in_dim], weight_init)?;
        let bias = if bias {
            Some(s.param("bias", &[out_dim], bias_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Internal("scalar input to linear".into()))?;
        if last != self.in_dim() {
            return Err(Error::Config(format!(
                "linear expects {} input channels, got {last}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let w = ctx.p(&self.weight);
        let mut y = x.reshape((rows, last))?.matmul(&w.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&ctx.p(b))?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        s: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = s.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
        let bias = if bias {
            Some(s.param("bias", &[out_ch], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `x` is `(B, C, H, W)`.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let w = ctx.p(&self.weight);
        self.forward_with_kernel(x, &w, ctx)
    }

    /// Convolve with an externally supplied kernel of this layer's shape, reusing its bias.
    pub fn forward_with_kernel(&self, x: &Tensor, kernel: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Config(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(kernel, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ctx.p(b).reshape((1, self.out_channels(), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[dim], Init::Const(1.0))?,
            bias: s.param("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&ctx.p(&self.weight))?
            .broadcast_add(&ctx.p(&self.bias))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[channels], Init::Const(1.0))?,
            bias: s.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// `x` is `(B, C, H, W)`.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if ctx.train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (x.elem_count() / c) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = (self.running_mean.as_detached_tensor().affine(1.0 - m, 0.0)?
                + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let rv = (self.running_var.as_detached_tensor().affine(1.0 - m, 0.0)?
                + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&ctx.p(&self.weight).reshape((1, c, 1, 1))?)?
            .broadcast_add(&ctx.p(&self.bias).reshape((1, c, 1, 1))?)?)
    }
}

/// Softmax over the last dimension; keys where `mask` is 0 get weight exactly 0.
///
/// `mask` broadcasts against `logits` and holds 1 for real keys, 0 for padding.
/// The max used for stabilization is taken over real keys only, so appending
/// padded keys leaves the weights of the real keys bit-identical.
pub fn masked_softmax(logits: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => {
            let max = logits.max_keepdim(D::Minus1)?.detach();
            let e = logits.broadcast_sub(&max)?.exp()?;
            let s = e.sum_keepdim(D::Minus1)?;
            Ok(e.broadcast_div(&s)?)
        }
        Some(mask) => {
            let bias = mask.affine(1e30, -1e30)?;
            let shifted = logits.broadcast_add(&bias)?;
            let max = shifted.max_keepdim(D::Minus1)?.detach();
            let e = shifted.broadcast_sub(&max)?.exp()?.broadcast_mul(mask)?;
            let s = e.sum_keepdim(D::Minus1)?;
            Ok(e.broadcast_div(&s)?)
        }
    }
}

/// Query rows per attention chunk are bounded so the weight tensor stays below this many elements.
const ATTN_CHUNK_ELEMS: usize = 1 << 22;

/// Scaled dot-product attention on head-split tensors.
///
/// `q` is `(B, h, Tq, d)`, `k` is `(B, h, Tk, d)`, `v` is `(B, h, Tk, dv)`,
/// `key_mask` is `(B, Tk)` with 1 for real keys. Returns the attended values
/// and, when `keep_weights`, the `(B, h, Tq, Tk)` attention weights.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&Tensor>,
    keep_weights: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (b, h, tq, d) = q.dims4()?;
    let tk = k.dim(2)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mask = match key_mask {
        Some(m) => Some(m.reshape((b, 1, 1, tk))?),
        None => None,
    };
    let kt = k.transpose(2, 3)?.contiguous()?;
    let rows = (ATTN_CHUNK_ELEMS / (b * h * tk).max(1)).max(1);
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    let mut start = 0;
    while start < tq {
        let len = rows.min(tq - start);
        let qc = if len == tq { q.clone() } else { q.narrow(2, start, len)? };
        let logits = (qc.contiguous()?.matmul(&kt)? * scale)?;
        let w = masked_softmax(&logits, mask.as_ref())?;
        outs.push(w.matmul(v)?);
        if keep_weights {
            weights.push(w);
        }
        start += len;
    }
    let out = if outs.len() == 1 { outs.pop().unwrap() } else { Tensor::cat(&outs, 2)? };
    let w = if keep_weights {
        Some(if weights.len() == 1 { weights.pop().unwrap() } else { Tensor::cat(&weights, 2)? })
    } else {
        None
    };
    Ok((out, w))
}

/// `(B, T, h*d)` to `(B, h, T, d)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::Config(format!("width {c} not divisible by {heads} heads")));
    }
    Ok(x.reshape((b, t, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, h, T, d)` to `(B, T, h*d)`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.reshape((b, t, h * d))?)
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &mut Scope, q_dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if q_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {q_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut s.sub("q"), q_dim, q_dim, true)?,
            k: Linear::new(&mut s.sub("k"), kv_dim, q_dim, true)?,
            v: Linear::new(&mut s.sub("v"), kv_dim, q_dim, true)?,
            out: Linear::new(&mut s.sub("out"), q_dim, q_dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `query` `(B, Tq, Dq)`, `kv` `(B, Tk, Dkv)`, `key_mask` `(B, Tk)`.
    pub fn forward(
        &self,
        query: &Tensor,
        kv: &Tensor,
        key_mask: Option<&Tensor>,
        ctx: Ctx,
    ) -> Result<(Tensor, Option<Tensor>)> {
        self.forward_inner(query, kv, key_mask, ctx, false)
    }

    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        kv: &Tensor,
        key_mask: Option<&Tensor>,
        ctx: Ctx,
    ) -> Result<(Tensor, Option<Tensor>)> {
        self.forward_inner(query, kv, key_mask, ctx, true)
    }

    fn forward_inner(
        &self,
        query: &Tensor,
        kv: &Tensor,
        key_mask: Option<&Tensor>,
        ctx: Ctx,
        keep: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let q = split_heads(&self.q.forward(query, ctx)?, self.heads)?;
        let k = split_heads(&self.k.forward(kv, ctx)?, self.heads)?;
        let v = split_heads(&self.v.forward(kv, ctx)?, self.heads)?;
        let (o, w) = attention(&q, &k, &v, key_mask, keep)?;
        Ok((self.out.forward(&merge_heads(&o)?, ctx)?, w))
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.sub("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut s.sub("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x, ctx)?.gelu_erf()?, ctx)
    }
}

/// `(out_len, in_len)` matrix for half-pixel-centred bilinear resampling along one axis.
pub fn bilinear_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `(B, C, H, W)` tensor, written as two matmuls so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ry = bilinear_matrix(h, out_h, x.dtype(), x.device())?;
    let rx = bilinear_matrix(w, out_w, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&y)?)
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` to `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if t != h * w {
        return Err(Error::Internal(format!("{t} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
}

/// Fails with an input error if any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} contains non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_softmax_rows_sum_to_one_and_pads_are_zero() -> Result<()> {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[1.0f64, 2.0, 50.0, 3.0]], &dev)?;
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0]], &dev)?;
        let w = masked_softmax(&logits, Some(&mask))?.to_vec2::<f64>()?;
        assert_eq!(w[0][2], 0.0);
        let s: f64 = w[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn bilinear_matrix_rows_are_partitions_of_unity() -> Result<()> {
        for (i, o) in [(2, 4), (16, 64), (5, 3), (7, 7)] {
            let m = bilinear_matrix(i, o, DType::F64, &Device::Cpu)?.to_vec2::<f64>()?;
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        Ok(())
    }

    #[test]
    fn resize_preserves_constants() -> Result<()> {
        let x = Tensor::full(3.5f64, (1, 2, 4, 4), &Device::Cpu)?;
        let y = resize_bilinear(&x, 16, 16)?;
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
        for v in y.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 3.5).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn chunked_attention_matches_single_pass() -> Result<()> {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (1, 1, 5000, 4), &dev)?;
        let k = Tensor::randn(0f64, 1.0, (1, 1, 1000, 4), &dev)?;
        let v = Tensor::randn(0f64, 1.0, (1, 1, 1000, 3), &dev)?;
        let (full, _) = attention(&q, &k, &v, None, false)?;
        let logits = (q.matmul(&k.t()?)? * 0.5)?;
        let reference = masked_softmax(&logits, None)?.matmul(&v)?;
        let diff = (full - reference)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12, "{diff}");
        Ok(())
    }
}
