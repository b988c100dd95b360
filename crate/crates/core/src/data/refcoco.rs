//! RefCOCO-style interchange directory.
//!
//! ```text
//! root/
//!   annotations.json   # JSON array of AnnotationRecord
//!   images/            # RGB images, referenced by `image_file`
//!   masks/             # PNG masks, referenced by `mask.file` when `mask.format == "png"`
//! ```
//!
//! The record schema is frozen in `schema/annotations.schema.json`. Masks are
//! either a PNG file or an uncompressed column-major run-length encoding
//! (`{"format": "rle", "size": [height, width], "counts": [...]}`), the
//! layout COCO tooling uses.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Split, Triplet};
use crate::error::{Error, LoadIssue, LoadIssueKind, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

/// The frozen JSON schema for `annotations.json`.
pub const ANNOTATION_SCHEMA: &str = include_str!("../../schema/annotations.schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_file: String,
    pub expression: String,
    pub mask: MaskRef,
    pub category: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskRef {
    Png { file: String },
    Rle { size: [u32; 2], counts: Vec<u32> },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Stop at the first bad record instead of collecting issues.
    pub fail_fast: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskEncoding {
    #[default]
    Png,
    Rle,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub triplets: Vec<Triplet>,
    pub issues: Vec<LoadIssue>,
    /// Triplet count per category and split.
    pub category_counts: BTreeMap<String, BTreeMap<Split, usize>>,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> Vec<Triplet> {
        self.triplets.iter().filter(|t| t.split == split).cloned().collect()
    }
}

/// Reads records lazily; decoded images are cached by file name so scenes
/// shared between several expressions are decoded once.
pub struct RefCocoReader {
    root: PathBuf,
    records: Vec<AnnotationRecord>,
    images: HashMap<String, Arc<RgbImage>>,
}

impl RefCocoReader {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Input(format!("cannot read {}: {e}", path.display()))
        })?;
        let records: Vec<AnnotationRecord> = serde_json::from_str(&text)?;
        Ok(Self {
            root: root.to_path_buf(),
            records,
            images: HashMap::new(),
        })
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    fn issue(rec: &AnnotationRecord, file: Option<&str>, kind: LoadIssueKind) -> LoadIssue {
        LoadIssue {
            record: rec.id.clone(),
            file: file.map(str::to_string),
            kind,
        }
    }

    fn image(&mut self, rec: &AnnotationRecord) -> std::result::Result<Arc<RgbImage>, LoadIssue> {
        if let Some(img) = self.images.get(&rec.image_file) {
            return Ok(img.clone());
        }
        let path = self.root.join(IMAGES_DIR).join(&rec.image_file);
        if !path.exists() {
            return Err(Self::issue(rec, Some(&rec.image_file), LoadIssueKind::MissingImage));
        }
        let img = image::open(&path)
            .map_err(|e| Self::issue(rec, Some(&rec.image_file), LoadIssueKind::BadImage(e.to_string())))?
            .to_rgb8();
        let img = Arc::new(img);
        self.images.insert(rec.image_file.clone(), img.clone());
        Ok(img)
    }

    fn mask(&self, rec: &AnnotationRecord) -> std::result::Result<BinaryMask, LoadIssue> {
        match &rec.mask {
            MaskRef::Png { file } => {
                let path = self.root.join(MASKS_DIR).join(file);
                if !path.exists() {
                    return Err(Self::issue(rec, Some(file), LoadIssueKind::MissingMask));
                }
                BinaryMask::load_png(&path)
                    .map_err(|e| Self::issue(rec, Some(file), LoadIssueKind::BadMask(e.to_string())))
            }
            MaskRef::Rle { size, counts } => BinaryMask::from_rle(size[1], size[0], counts)
                .map_err(|e| Self::issue(rec, None, LoadIssueKind::BadMask(e.to_string()))),
        }
    }

    /// Load and validate the record at `index`.
    pub fn load(&mut self, index: usize) -> std::result::Result<Triplet, LoadIssue> {
        let rec = self.records[index].clone();
        let split = rec
            .split
            .parse::<Split>()
            .map_err(|_| Self::issue(&rec, None, LoadIssueKind::UnknownSplit(rec.split.clone())))?;
        if rec.expression.trim().is_empty() {
            return Err(Self::issue(&rec, None, LoadIssueKind::EmptyExpression));
        }
        let image = self.image(&rec)?;
        let mask = self.mask(&rec)?;
        if mask.dims() != image.dimensions() {
            let file = match &rec.mask {
                MaskRef::Png { file } => Some(file.as_str()),
                MaskRef::Rle { .. } => None,
            };
            return Err(Self::issue(
                &rec,
                file,
                LoadIssueKind::DimMismatch {
                    image: image.dimensions(),
                    mask: mask.dims(),
                },
            ));
        }
        Ok(Triplet {
            id: rec.id,
            image_file: rec.image_file,
            image,
            expression: rec.expression,
            mask,
            category: rec.category,
            split,
        })
    }

    /// Records in file order, optionally restricted to one split.
    pub fn stream(
        &mut self,
        split: Option<Split>,
    ) -> impl Iterator<Item = std::result::Result<Triplet, LoadIssue>> + '_ {
        let indices: Vec<usize> = (0..self.records.len())
            .filter(|&i| match split {
                None => true,
                // Unparseable splits are surfaced as issues rather than skipped.
                Some(s) => self.records[i].split.parse::<Split>().map_or(true, |r| r == s),
            })
            .collect();
        indices.into_iter().map(move |i| self.load(i))
    }
}

/// Load every valid triplet (optionally one split) with itemized issues.
pub fn load_refcoco_dir(root: &Path, split: Option<Split>, opts: &LoadOptions) -> Result<LoadedDataset> {
    let mut reader = RefCocoReader::open(root)?;
    let mut triplets = Vec::new();
    let mut issues = Vec::new();
    for item in reader.stream(split) {
        match item {
            Ok(t) => triplets.push(t),
            Err(issue) => {
                if opts.fail_fast {
                    return Err(Error::Load(vec![issue]));
                }
                log::warn!("skipping {issue}");
                issues.push(issue);
            }
        }
    }
    let mut category_counts: BTreeMap<String, BTreeMap<Split, usize>> = BTreeMap::new();
    for t in &triplets {
        *category_counts
            .entry(t.category.clone())
            .or_default()
            .entry(t.split)
            .or_default() += 1;
    }
    for (cat, counts) in &category_counts {
        log::info!("{cat}: {counts:?}");
    }
    Ok(LoadedDataset {
        triplets,
        issues,
        category_counts,
    })
}

/// Write triplets as an interchange directory. Images shared by several
/// triplets (same `image_file`) are written once.
pub fn write_refcoco_dir(root: &Path, triplets: &[Triplet], encoding: MaskEncoding) -> Result<()> {
    fs::create_dir_all(root.join(IMAGES_DIR))?;
    if encoding == MaskEncoding::Png {
        fs::create_dir_all(root.join(MASKS_DIR))?;
    }
    let mut written: HashMap<&str, &RgbImage> = HashMap::new();
    let mut records = Vec::with_capacity(triplets.len());
    for t in triplets {
        t.validate()?;
        match written.get(t.image_file.as_str()) {
            Some(prev) if **prev != *t.image => {
                return Err(Error::Input(format!(
                    "two different images share the file name {}",
                    t.image_file
                )));
            }
            Some(_) => {}
            None => {
                t.image.save(root.join(IMAGES_DIR).join(&t.image_file))?;
                written.insert(&t.image_file, &t.image);
            }
        }
        let mask = match encoding {
            MaskEncoding::Png => {
                let file = format!("{}.png", t.id);
                t.mask.save_png(&root.join(MASKS_DIR).join(&file))?;
                MaskRef::Png { file }
            }
            MaskEncoding::Rle => MaskRef::Rle {
                size: [t.mask.height(), t.mask.width()],
                counts: t.mask.to_rle(),
            },
        };
        records.push(AnnotationRecord {
            id: t.id.clone(),
            image_file: t.image_file.clone(),
            expression: t.expression.clone(),
            mask,
            category: t.category.clone(),
            split: t.split.as_str().to_string(),
        });
    }
    fs::write(root.join(ANNOTATIONS_FILE), serde_json::to_string_pretty(&records)?)?;
    Ok(())
}
