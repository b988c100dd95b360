//! Referring-expression triplets, interchange I/O, preprocessing and the
//! synthetic shapes generator.

pub mod preprocess;
pub mod refcoco;
pub mod synthetic;

use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, Normalization, Sample};
pub use refcoco::{load_refcoco_dir, write_refcoco_dir, LoadOptions, LoadedDataset};
pub use synthetic::{generate_synthetic, SyntheticParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::Input(format!(
                "{} mask bytes for a {width}x{height} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[(y * self.width + x) as usize] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Any gray value above 127 is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| u8::from(p.0[0] > 127)).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&image::open(path)?.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    /// Nearest-neighbour resize; the result stays strictly binary.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as u32).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as u32).min(self.width - 1);
                data.push(self.data[(sy * self.width + sx) as usize]);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Uncompressed run-length encoding in column-major order, starting with a background run.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.data[(y * self.width + x) as usize];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(width: u32, height: u32, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != width as u64 * height as u64 {
            return Err(Error::Input(format!(
                "RLE covers {total} pixels, mask has {}",
                width as u64 * height as u64
            )));
        }
        let mut mask = Self::empty(width, height);
        let mut idx = 0u64;
        for (k, &c) in counts.iter().enumerate() {
            let on = k % 2 == 1;
            for _ in 0..c {
                if on {
                    let x = (idx / height as u64) as u32;
                    let y = (idx % height as u64) as u32;
                    mask.set(x, y, true);
                }
                idx += 1;
            }
        }
        Ok(mask)
    }
}

/// One (image, expression, mask) supervision unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    /// File name under the dataset's `images/` directory.
    pub image_file: String,
    pub image: Arc<RgbImage>,
    pub expression: String,
    pub mask: BinaryMask,
    pub category: String,
    pub split: Split,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.expression.trim().is_empty() {
            return Err(Error::Input(format!("triplet {} has an empty expression", self.id)));
        }
        if self.mask.dims() != self.image.dimensions() {
            return Err(Error::Input(format!(
                "triplet {}: mask {:?} does not match image {:?}",
                self.id,
                self.mask.dims(),
                self.image.dimensions()
            )));
        }
        Ok(())
    }
}
