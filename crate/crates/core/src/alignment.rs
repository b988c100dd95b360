//! Mutual-guidance cross-modal alignment.
//!
//! At every backbone stage two parallel submodules run on the same
//! `(V_i, L_i)` pair:
//!
//! * language-guided vision alignment ([`VisionAlignment`]): visual
//!   positions query the tokens and the result refines the visual map;
//! * vision-guided language alignment ([`LanguageAlignment`]): tokens query
//!   the visual positions and the result refines the token features.
//!
//! Each one projects its own modality, attends, multiplies the attended
//! values element-wise with the projected features, projects again, and
//! finishes with a Tanh gate. The refined outputs are added back onto the
//! unprojected inputs to form the next stage's inputs. Parameters live under
//! `smgam.stage{i}.{lgvla|vglva}.*`.

use candle_core::Tensor;

use crate::encoders::{LanguageFeatures, VisionBackbone, VisualFeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Init, Linear, Scope};

/// `Tanh(fc2(ReLU(fc1(x)))) * x`, applied per token.
#[derive(Debug, Clone)]
pub struct Gate {
    fc1: Linear,
    fc2: Linear,
}

impl Gate {
    pub fn new(s: &mut Scope, dim: usize, zero_final: bool) -> Result<Self> {
        let fc1 = Linear::new(&mut s.sub("fc1"), dim, dim, true)?;
        let fc2 = if zero_final {
            Linear::with_init(&mut s.sub("fc2"), dim, dim, true, Init::Const(0.0), Init::Const(0.0))?
        } else {
            Linear::new(&mut s.sub("fc2"), dim, dim, true)?
        };
        Ok(Self { fc1, fc2 })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let g = self.fc2.forward(&self.fc1.forward(x, ctx)?.relu()?, ctx)?.tanh()?;
        Ok((g * x)?)
    }
}

/// Attention weights and intermediate features of one alignment submodule.
#[derive(Debug, Clone)]
pub struct CrossModalAttentionOutput {
    /// `(B, heads, queries, keys)`; every row sums to one.
    pub similarity: Tensor,
    /// Attended values multiplied element-wise with the projected queries, `(B, queries, C)`.
    pub guided: Tensor,
    /// Gated refined features, `(B, queries, C)`.
    pub refined: Tensor,
}

#[derive(Debug, Clone)]
struct AttentionCore {
    in_proj: Linear,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    out_proj: Linear,
    gate: Gate,
    heads: usize,
}

impl AttentionCore {
    fn new(
        s: &mut Scope,
        query_dim: usize,
        key_dim: usize,
        heads: usize,
        zero_gate: bool,
    ) -> Result<Self> {
        if query_dim % heads != 0 {
            return Err(Error::Config(format!(
                "alignment width {query_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            in_proj: Linear::new(&mut s.sub("in_proj"), query_dim, query_dim, true)?,
            w_q: Linear::new(&mut s.sub("w_q"), query_dim, query_dim, false)?,
            w_k: Linear::new(&mut s.sub("w_k"), key_dim, query_dim, false)?,
            w_v: Linear::new(&mut s.sub("w_v"), key_dim, query_dim, false)?,
            out_proj: Linear::new(&mut s.sub("out_proj"), query_dim, query_dim, true)?,
            gate: Gate::new(&mut s.sub("gate"), query_dim, zero_gate)?,
            heads,
        })
    }

    /// `queries` `(B, Tq, Cq)`, `keys` `(B, Tk, Ck)`, `key_mask` `(B, Tk)`.
    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        key_mask: Option<&Tensor>,
        ctx: Ctx,
    ) -> Result<CrossModalAttentionOutput> {
        if queries.dim(2)? != self.in_proj.in_dim() || keys.dim(2)? != self.w_k.in_dim() {
            return Err(Error::Config(format!(
                "alignment expects query/key widths {}/{}, got {}/{}",
                self.in_proj.in_dim(),
                self.w_k.in_dim(),
                queries.dim(2)?,
                keys.dim(2)?
            )));
        }
        let projected = self.in_proj.forward(queries, ctx)?.gelu_erf()?;
        let q = nn::split_heads(&self.w_q.forward(&projected, ctx)?, self.heads)?;
        let k = nn::split_heads(&self.w_k.forward(keys, ctx)?, self.heads)?;
        let v = nn::split_heads(&self.w_v.forward(keys, ctx)?, self.heads)?;
        let (attended, similarity) = nn::attention(&q, &k, &v, key_mask, true)?;
        let guided = (nn::merge_heads(&attended)? * &projected)?;
        let a = self.out_proj.forward(&guided, ctx)?.gelu_erf()?;
        let refined = self.gate.forward(&a, ctx)?;
        Ok(CrossModalAttentionOutput {
            similarity: similarity.expect("weights requested"),
            guided,
            refined,
        })
    }
}

/// Language-guided vision alignment: produces `V_i'`.
#[derive(Debug, Clone)]
pub struct VisionAlignment(AttentionCore);

impl VisionAlignment {
    pub fn new(
        s: &mut Scope,
        vision_dim: usize,
        text_dim: usize,
        heads: usize,
        zero_gate: bool,
    ) -> Result<Self> {
        Ok(Self(AttentionCore::new(s, vision_dim, text_dim, heads, zero_gate)?))
    }

    /// `v` `(B, C_i, H_i, W_i)`, language `(B, N, C_t)`; returns `V_i'` with the shape of `v`.
    pub fn forward(
        &self,
        v: &Tensor,
        lang: &LanguageFeatures,
        ctx: Ctx,
    ) -> Result<(Tensor, CrossModalAttentionOutput)> {
        let (_, _, h, w) = v.dims4()?;
        let out = self.0.forward(&nn::to_tokens(v)?, &lang.matrix, Some(&lang.mask), ctx)?;
        Ok((nn::from_tokens(&out.refined, h, w)?, out))
    }
}

/// Vision-guided language alignment: produces `L_i'`.
#[derive(Debug, Clone)]
pub struct LanguageAlignment(AttentionCore);

impl LanguageAlignment {
    pub fn new(
        s: &mut Scope,
        text_dim: usize,
        vision_dim: usize,
        heads: usize,
        zero_gate: bool,
    ) -> Result<Self> {
        Ok(Self(AttentionCore::new(s, text_dim, vision_dim, heads, zero_gate)?))
    }

    /// Returns `L_i'` `(B, N, C_t)`; rows at padded positions are zeroed.
    pub fn forward(
        &self,
        lang: &LanguageFeatures,
        v: &Tensor,
        ctx: Ctx,
    ) -> Result<(Tensor, CrossModalAttentionOutput)> {
        let out = self.0.forward(&lang.matrix, &nn::to_tokens(v)?, None, ctx)?;
        let refined = out.refined.broadcast_mul(&lang.mask.unsqueeze(2)?)?;
        Ok((refined, out))
    }
}

/// Standalone language-guided vision alignment with input checks.
pub fn lgvla_forward(
    v: &Tensor,
    lang: &LanguageFeatures,
    params: &VisionAlignment,
    ctx: Ctx,
) -> Result<(Tensor, CrossModalAttentionOutput)> {
    nn::ensure_finite(v, "visual features")?;
    nn::ensure_finite(&lang.matrix, "language features")?;
    params.forward(v, lang, ctx)
}

/// Standalone vision-guided language alignment with input checks.
pub fn vglva_forward(
    lang: &LanguageFeatures,
    v: &Tensor,
    params: &LanguageAlignment,
    ctx: Ctx,
) -> Result<(Tensor, CrossModalAttentionOutput)> {
    nn::ensure_finite(v, "visual features")?;
    nn::ensure_finite(&lang.matrix, "language features")?;
    params.forward(lang, v, ctx)
}

/// `V_i + V_i'` fed through backbone stage `i + 1`; for `i = 4` the enhanced map itself.
pub fn stage_transition_vision(
    backbone: &VisionBackbone,
    i: usize,
    v: &Tensor,
    refined: &Tensor,
    ctx: Ctx,
) -> Result<Tensor> {
    if v.dims() != refined.dims() {
        return Err(Error::Internal(format!(
            "stage {i} refined map {:?} does not match {:?}",
            refined.dims(),
            v.dims()
        )));
    }
    let enhanced = (v + refined)?;
    match i {
        1..=3 => backbone.vision_stage(i + 1, &enhanced, ctx),
        4 => Ok(enhanced),
        _ => Err(Error::Usage(format!("stage index {i} outside 1..=4"))),
    }
}

/// `L_{i+1} = L_i + L_i'`.
pub fn stage_transition_language(
    lang: &LanguageFeatures,
    refined: &Tensor,
) -> Result<LanguageFeatures> {
    if lang.matrix.dims() != refined.dims() {
        return Err(Error::Internal(format!(
            "refined language {:?} does not match {:?}",
            refined.dims(),
            lang.matrix.dims()
        )));
    }
    Ok(LanguageFeatures {
        matrix: (&lang.matrix + refined)?,
        mask: lang.mask.clone(),
        stage_tag: lang.stage_tag + 1,
    })
}

#[derive(Debug, Clone)]
pub struct AlignmentStage {
    pub lgvla: Option<VisionAlignment>,
    pub vglva: Option<LanguageAlignment>,
}

/// All four alignment stages; either submodule can be switched off.
#[derive(Debug, Clone)]
pub struct Smgam {
    pub stages: Vec<AlignmentStage>,
}

/// Everything the aligned encoder pass produces.
#[derive(Debug, Clone)]
pub struct AlignedFeatures {
    /// Backbone outputs `V_1..V_4` (stage inputs to alignment).
    pub visual: VisualFeaturePyramid,
    /// `V_i + V_i'`, the maps handed to the decoder.
    pub enhanced: VisualFeaturePyramid,
    /// `L_1..L_5`.
    pub language: Vec<LanguageFeatures>,
}

impl AlignedFeatures {
    pub fn final_language(&self) -> &LanguageFeatures {
        self.language.last().expect("at least L_1")
    }
}

impl Smgam {
    pub fn new(
        s: &mut Scope,
        stage_channels: [usize; 4],
        text_dim: usize,
        heads: usize,
        use_lgvla: bool,
        use_vglva: bool,
        zero_gates: bool,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in stage_channels.iter().enumerate() {
            let mut ss = s.sub(&format!("stage{}", i + 1));
            let lgvla = if use_lgvla {
                Some(VisionAlignment::new(&mut ss.sub("lgvla"), c, text_dim, heads, zero_gates)?)
            } else {
                None
            };
            let vglva = if use_vglva {
                Some(LanguageAlignment::new(&mut ss.sub("vglva"), text_dim, c, heads, zero_gates)?)
            } else {
                None
            };
            stages.push(AlignmentStage { lgvla, vglva });
        }
        Ok(Self { stages })
    }

    /// Runs backbone and alignment jointly from the stem output onward.
    pub fn run(
        &self,
        backbone: &VisionBackbone,
        image: &Tensor,
        l1: LanguageFeatures,
        ctx: Ctx,
    ) -> Result<AlignedFeatures> {
        let mut v = backbone.vision_stem(image, ctx)?;
        let mut lang = l1;
        let mut visual = Vec::with_capacity(4);
        let mut enhanced = Vec::with_capacity(4);
        let mut language = Vec::with_capacity(5);
        for (idx, stage) in self.stages.iter().enumerate() {
            let i = idx + 1;
            let v_ref = match &stage.lgvla {
                Some(m) => Some(m.forward(&v, &lang, ctx)?.0),
                None => None,
            };
            let l_ref = match &stage.vglva {
                Some(m) => Some(m.forward(&lang, &v, ctx)?.0),
                None => None,
            };
            let e = match &v_ref {
                Some(r) => (&v + r)?,
                None => v.clone(),
            };
            let next_lang = match &l_ref {
                Some(r) => stage_transition_language(&lang, r)?,
                None => LanguageFeatures {
                    stage_tag: lang.stage_tag + 1,
                    ..lang.clone()
                },
            };
            visual.push(v);
            enhanced.push(e.clone());
            language.push(lang);
            lang = next_lang;
            v = if i < 4 {
                backbone.vision_stage(i + 1, &e, ctx)?
            } else {
                e
            };
        }
        language.push(lang);
        Ok(AlignedFeatures {
            visual: VisualFeaturePyramid { stages: visual },
            enhanced: VisualFeaturePyramid { stages: enhanced },
            language,
        })
    }
}
