//! Resize, normalize and tokenize triplets into model-ready samples.

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Triplet};
use crate::encoders::{TokenizedExpression, Vocab};
use crate::error::{Error, Result};

/// Per-channel pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// The ImageNet constants, for real imagery.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Mean and standard deviation of every pixel of every distinct image.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0u64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("no pixels to compute normalization from".into()));
        }
        let mut mean = [0f64; 3];
        let mut std = [0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Ok(Self { mean, std })
    }

    /// Statistics over the distinct images (by file name) of `triplets`.
    pub fn from_triplets(triplets: &[Triplet]) -> Result<Self> {
        let mut seen = std::collections::BTreeMap::new();
        for t in triplets {
            seen.entry(t.image_file.as_str()).or_insert(t.image.as_ref());
        }
        Self::from_images(seen.into_values())
    }

    /// `(3, H, W)` channel-major normalized values.
    pub fn apply(&self, img: &RgbImage) -> Vec<f32> {
        let (w, h) = img.dimensions();
        let plane = (w * h) as usize;
        let mut out = vec![0f32; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = ((p.0[c] as f64 / 255.0 - self.mean[c]) / self.std[c]) as f32;
            }
        }
        out
    }
}

/// One model-ready example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: String,
    /// `(3, size, size)` normalized pixels.
    pub image: Vec<f32>,
    pub size: usize,
    pub tokens: TokenizedExpression,
    /// Target at model resolution.
    pub mask: BinaryMask,
    /// Target at the original image resolution.
    pub original_mask: BinaryMask,
}

/// Bilinear resize to `size`² followed by normalization, as `(3, size, size)` values.
pub fn resize_normalize(img: &RgbImage, size: usize, norm: &Normalization) -> Vec<f32> {
    let s = size as u32;
    if img.dimensions() == (s, s) {
        norm.apply(img)
    } else {
        norm.apply(&imageops::resize(img, s, s, FilterType::Triangle))
    }
}

/// Bilinear image resize to `size`², nearest-neighbour mask resize, and
/// tokenization padded to `max_tokens`.
pub fn preprocess(
    triplet: &Triplet,
    size: usize,
    vocab: &Vocab,
    max_tokens: usize,
    norm: &Normalization,
) -> Result<Sample> {
    triplet.validate()?;
    let s = size as u32;
    Ok(Sample {
        id: triplet.id.clone(),
        category: triplet.category.clone(),
        image: resize_normalize(&triplet.image, size, norm),
        size,
        tokens: vocab.tokenize(&triplet.expression, max_tokens)?,
        mask: triplet.mask.resize_nearest(s, s),
        original_mask: triplet.mask.clone(),
    })
}

/// Mirror image and mask left to right. Spatial words in the expression
/// are swapped so the pair stays consistent.
pub fn flip_triplet(t: &Triplet) -> Triplet {
    let words: Vec<&str> = t
        .expression
        .split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            other => other,
        })
        .collect();
    Triplet {
        id: format!("{}-flip", t.id),
        image_file: format!("flip-{}", t.image_file),
        image: std::sync::Arc::new(imageops::flip_horizontal(t.image.as_ref())),
        expression: words.join(" "),
        mask: t.mask.flip_horizontal(),
        category: t.category.clone(),
        split: t.split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use std::sync::Arc;

    fn triplet(w: u32, h: u32, mask: BinaryMask) -> Triplet {
        Triplet {
            id: "t".into(),
            image_file: "t.png".into(),
            image: Arc::new(RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 7]))),
            expression: "the red circle".into(),
            mask,
            category: "circle".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn resizes_to_model_resolution() -> Result<()> {
        let t = triplet(1024, 1024, BinaryMask::empty(1024, 1024));
        let vocab = Vocab::build(["the red circle"]);
        let s = preprocess(&t, 480, &vocab, 8, &Normalization::default())?;
        assert_eq!(s.image.len(), 3 * 480 * 480);
        assert_eq!(s.mask.dims(), (480, 480));
        assert_eq!(s.tokens.length(), 4);
        Ok(())
    }

    #[test]
    fn full_mask_stays_full_and_checkerboard_stays_binary() -> Result<()> {
        let full = triplet(30, 20, BinaryMask::new(30, 20, vec![1; 600])?);
        let vocab = Vocab::build(["the red circle"]);
        let s = preprocess(&full, 64, &vocab, 8, &Normalization::default())?;
        assert_eq!(s.mask.count(), 64 * 64);

        let data = (0..33 * 17).map(|i| ((i % 33 + i / 33) % 2) as u8).collect();
        let checker = triplet(33, 17, BinaryMask::new(33, 17, data)?);
        let s = preprocess(&checker, 64, &vocab, 8, &Normalization::default())?;
        assert!(s.mask.data().iter().all(|&v| v <= 1));
        Ok(())
    }

    #[test]
    fn normalization_of_constant_image() -> Result<()> {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([51, 102, 255]));
        let n = Normalization::from_images([&img])?;
        assert!((n.mean[0] - 0.2).abs() < 1e-12 && (n.mean[2] - 1.0).abs() < 1e-12);
        assert!(n.apply(&img).iter().all(|v| v.abs() < 1e-6));
        Ok(())
    }

    #[test]
    fn flip_swaps_direction_words() {
        let mut m = BinaryMask::empty(3, 1);
        m.set(0, 0, true);
        let mut t = triplet(3, 1, m);
        t.expression = "the circle to the left of the square".into();
        let f = flip_triplet(&t);
        assert_eq!(f.expression, "the circle to the right of the square");
        assert!(f.mask.get(2, 0) && !f.mask.get(0, 0));
        assert_eq!(f.image.get_pixel(0, 0).0[0], 2);
    }
}
