mod common;

use candle_core::{DType, Device, Tensor};
use crossmodal_seg::encoders::{EncoderConfig, TextEncoder, TokenizedExpression, VisionBackbone, PAD_ID, SENTENCE_ID};
use crossmodal_seg::nn::{Ctx, ParamBuilder};
use proptest::prelude::*;

fn vision(cfg: &EncoderConfig, seed: u64) -> VisionBackbone {
    let mut pb = ParamBuilder::new(DType::F32, seed);
    let v = VisionBackbone::new(&mut pb.scope("encoders.vision"), cfg).unwrap();
    pb.finish();
    v
}

fn text(cfg: &EncoderConfig, seed: u64) -> TextEncoder {
    let mut pb = ParamBuilder::new(DType::F32, seed);
    let t = TextEncoder::new(&mut pb.scope("encoders.text"), cfg).unwrap();
    pb.finish();
    t
}

fn max_abs(t: &Tensor) -> f32 {
    t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn full_resolution_pyramid_follows_halving_schedule() {
    let cfg = EncoderConfig::default();
    let v = vision(&cfg, 0);
    let img = Tensor::randn(0f32, 1.0, (1, 3, 480, 480), &Device::Cpu).unwrap();
    let p = v.pyramid(&img, Ctx::EVAL).unwrap();
    p.validate().unwrap();
    let dims: Vec<Vec<usize>> = p.stages.iter().map(|s| s.dims().to_vec()).collect();
    assert_eq!(dims, vec![vec![1, 32, 120, 120], vec![1, 64, 60, 60], vec![1, 128, 30, 30], vec![1, 256, 15, 15]]);
    let shapes: Vec<Vec<usize>> = cfg.stage_shapes().iter().map(|&(h, w, c)| vec![1, c, h, w]).collect();
    assert_eq!(dims, shapes);
}

#[test]
fn all_zero_image_gives_finite_features() {
    let cfg = EncoderConfig::toy(12);
    let v = vision(&cfg, 1);
    let img = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let p = v.pyramid(&img, Ctx::EVAL).unwrap();
    p.validate().unwrap();
    // Both rows of the batch see the same input.
    for s in &p.stages {
        assert_eq!(max_abs(&(s.get(0).unwrap() - s.get(1).unwrap()).unwrap()), 0.0);
    }
}

#[test]
fn stage_rejects_odd_maps_and_wrong_widths() {
    let cfg = EncoderConfig::toy(12);
    let v = vision(&cfg, 2);
    let odd = Tensor::zeros((1, 32, 15, 15), DType::F32, &Device::Cpu).unwrap();
    assert!(v.vision_stage(2, &odd, Ctx::EVAL).is_err());
    let narrow = Tensor::zeros((1, 16, 16, 16), DType::F32, &Device::Cpu).unwrap();
    assert!(v.vision_stage(2, &narrow, Ctx::EVAL).is_err());
}

#[test]
fn different_seeds_give_different_features() {
    let cfg = EncoderConfig::toy(12);
    let img = Tensor::randn(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let a = vision(&cfg, 3).vision_stem(&img, Ctx::EVAL).unwrap();
    let b = vision(&cfg, 3).vision_stem(&img, Ctx::EVAL).unwrap();
    let c = vision(&cfg, 4).vision_stem(&img, Ctx::EVAL).unwrap();
    assert_eq!(max_abs(&(&a - &b).unwrap()), 0.0);
    assert!(max_abs(&(&a - &c).unwrap()) > 1e-3);
}

#[test]
fn six_token_expression_encodes_to_six_rows() {
    let cfg = EncoderConfig {
        max_tokens: 6,
        ..EncoderConfig::toy(12)
    };
    let t = text(&cfg, 5);
    let e = TokenizedExpression::new(&[SENTENCE_ID, 3, 4, 5, 6, 7], 6).unwrap();
    let l = t.encode_text(&e, Ctx::EVAL).unwrap();
    assert_eq!(l.matrix.dims(), &[1, 6, cfg.text_dim]);
    assert_eq!(l.mask.to_vec2::<f32>().unwrap(), vec![vec![1.0; 6]]);
    let too_long = TokenizedExpression::new(&[SENTENCE_ID, 3, 4, 5, 6, 7, 8], 7).unwrap();
    assert!(t.encode_text(&too_long, Ctx::EVAL).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn padded_token_ids_are_invisible(
        real in prop::collection::vec(3u32..12, 1..6),
        junk in prop::collection::vec(0u32..12, 8),
        seed in 0u64..100,
    ) {
        let cfg = EncoderConfig { max_tokens: 8, ..EncoderConfig::toy(12) };
        let t = text(&cfg, seed);
        let n = real.len() + 1;
        let mut ids = vec![SENTENCE_ID];
        ids.extend(&real);
        let mut clean = ids.clone();
        clean.resize(8, PAD_ID);
        let mut noisy = ids;
        noisy.extend(&junk[n..]);
        let mask: Vec<f32> = (0..8).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, (1, 8), &Device::Cpu).unwrap();
        let run = |ids: Vec<u32>| t.forward(&Tensor::from_vec(ids, (1, 8), &Device::Cpu).unwrap(), &mask, Ctx::EVAL).unwrap();
        let a = run(clean).narrow(1, 0, n).unwrap();
        let b = run(noisy).narrow(1, 0, n).unwrap();
        prop_assert!(max_abs(&(a - b).unwrap()) < 1e-6);
    }

    #[test]
    fn toy_pyramid_shapes_follow_config(base in prop::sample::select(vec![8usize, 16, 32]), size in prop::sample::select(vec![32usize, 64, 96])) {
        let cfg = EncoderConfig {
            image_size: size,
            stage_channels: [base, 2 * base, 4 * base, 8 * base],
            num_heads: 2,
            text_dim: 8,
            ..EncoderConfig::toy(12)
        };
        cfg.validate().unwrap();
        let v = vision(&cfg, 0);
        let img = Tensor::randn(0f32, 1.0, (1, 3, size, size), &Device::Cpu).unwrap();
        let p = v.pyramid(&img, Ctx::EVAL).unwrap();
        p.validate().unwrap();
        for (s, (h, w, c)) in p.stages.iter().zip(cfg.stage_shapes()) {
            prop_assert_eq!(s.dims(), &[1, c, h, w]);
        }
    }
}
