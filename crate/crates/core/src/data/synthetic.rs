//! Synthetic referring-expression scenes: flat colored shapes on a dark
//! canvas, each shape referred to by an expression that singles it out.
//!
//! Expressions come in three phrase classes: category ("the red circle"),
//! absolute position ("the red circle in the top left") and relation
//! ("the red circle to the left of the blue square"). Every expression is
//! backed by a [`Referent`] predicate, and generation only keeps
//! expressions whose predicate holds for exactly one shape in the scene.

use std::fmt;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, Split, Triplet};
use crate::error::{Error, Result};

pub const BACKGROUND: [u8; 3] = [32, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Self::Red => [220, 40, 40],
            Self::Green => [40, 200, 60],
            Self::Blue => [50, 80, 230],
            Self::Yellow => [230, 210, 40],
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == w)
    }
}

/// One shape: `size` is the side of its square bounding box whose top-left
/// pixel is `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub size: u32,
    pub x: u32,
    pub y: u32,
}

impl ShapeSpec {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.size as f64 / 2.0,
            self.y as f64 + self.size as f64 / 2.0,
        )
    }

    /// Whether the pixel centred at `(px + 0.5, py + 0.5)` is covered.
    pub fn covers(&self, px: u32, py: u32) -> bool {
        let (cx, cy) = self.center();
        let r = self.size as f64 / 2.0;
        let dx = px as f64 + 0.5 - cx;
        let dy = py as f64 + 0.5 - cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base along the bottom edge of the box.
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    fn overlaps(&self, other: &ShapeSpec, gap: u32) -> bool {
        let a = (self.x, self.y, self.x + self.size + gap, self.y + self.size + gap);
        let b = (other.x, other.y, other.x + other.size + gap, other.y + other.size + gap);
        a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Left,
    Right,
    Top,
    Bottom,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Region {
    pub const ALL: [Region; 8] = [
        Self::Left,
        Self::Right,
        Self::Top,
        Self::Bottom,
        Self::TopLeft,
        Self::TopRight,
        Self::BottomLeft,
        Self::BottomRight,
    ];

    fn phrase(&self) -> &'static str {
        match self {
            Self::Left => "on the left",
            Self::Right => "on the right",
            Self::Top => "at the top",
            Self::Bottom => "at the bottom",
            Self::TopLeft => "in the top left",
            Self::TopRight => "in the top right",
            Self::BottomLeft => "in the bottom left",
            Self::BottomRight => "in the bottom right",
        }
    }

    /// Canvas halves are split at the midline; centers on it belong to neither side.
    fn contains(&self, shape: &ShapeSpec, canvas: u32) -> bool {
        let (cx, cy) = shape.center();
        let mid = canvas as f64 / 2.0;
        let (l, r, t, b) = (cx < mid, cx > mid, cy < mid, cy > mid);
        match self {
            Self::Left => l,
            Self::Right => r,
            Self::Top => t,
            Self::Bottom => b,
            Self::TopLeft => t && l,
            Self::TopRight => t && r,
            Self::BottomLeft => b && l,
            Self::BottomRight => b && r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn phrase(&self) -> &'static str {
        match self {
            Self::LeftOf => "to the left of",
            Self::RightOf => "to the right of",
            Self::Above => "above",
            Self::Below => "below",
        }
    }

    fn holds(&self, a: &ShapeSpec, b: &ShapeSpec) -> bool {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        match self {
            Self::LeftOf => ax < bx,
            Self::RightOf => ax > bx,
            Self::Above => ay < by,
            Self::Below => ay > by,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    None,
    Region(Region),
    Relation {
        relation: Relation,
        kind: ShapeKind,
        color: ShapeColor,
    },
}

/// Structured meaning of a synthetic expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Referent {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub constraint: Constraint,
}

impl Referent {
    /// Whether `shapes[idx]` satisfies this description.
    pub fn matches(&self, idx: usize, shapes: &[ShapeSpec], canvas: u32) -> bool {
        let s = &shapes[idx];
        if s.kind != self.kind || s.color != self.color {
            return false;
        }
        match self.constraint {
            Constraint::None => true,
            Constraint::Region(r) => r.contains(s, canvas),
            Constraint::Relation {
                relation,
                kind,
                color,
            } => shapes
                .iter()
                .enumerate()
                .any(|(j, o)| j != idx && o.kind == kind && o.color == color && relation.holds(s, o)),
        }
    }

    /// Indices of every shape the description fits.
    pub fn matching(&self, shapes: &[ShapeSpec], canvas: u32) -> Vec<usize> {
        (0..shapes.len()).filter(|&i| self.matches(i, shapes, canvas)).collect()
    }

    /// Inverse of `Display`.
    pub fn parse(text: &str) -> Option<Self> {
        let w: Vec<&str> = text.split_whitespace().collect();
        if w.len() < 3 || w[0] != "the" {
            return None;
        }
        let color = ShapeColor::parse(w[1])?;
        let kind = ShapeKind::parse(w[2])?;
        let rest = &w[3..];
        let anchor = |r: &[&str]| -> Option<(ShapeKind, ShapeColor)> {
            match r {
                ["the", c, k] => Some((ShapeKind::parse(k)?, ShapeColor::parse(c)?)),
                _ => None,
            }
        };
        let constraint = match rest {
            [] => Constraint::None,
            ["to", "the", side, "of", tail @ ..] => {
                let relation = match *side {
                    "left" => Relation::LeftOf,
                    "right" => Relation::RightOf,
                    _ => return None,
                };
                let (kind, color) = anchor(tail)?;
                Constraint::Relation {
                    relation,
                    kind,
                    color,
                }
            }
            [dir @ ("above" | "below"), tail @ ..] => {
                let relation = if *dir == "above" {
                    Relation::Above
                } else {
                    Relation::Below
                };
                let (kind, color) = anchor(tail)?;
                Constraint::Relation {
                    relation,
                    kind,
                    color,
                }
            }
            _ => {
                let phrase = rest.join(" ");
                Constraint::Region(Region::ALL.into_iter().find(|r| r.phrase() == phrase)?)
            }
        };
        Some(Self {
            kind,
            color,
            constraint,
        })
    }
}

impl fmt::Display for Referent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "the {} {}", self.color.name(), self.kind.name())?;
        match self.constraint {
            Constraint::None => Ok(()),
            Constraint::Region(r) => write!(f, " {}", r.phrase()),
            Constraint::Relation {
                relation,
                kind,
                color,
            } => write!(f, " {} the {} {}", relation.phrase(), color.name(), kind.name()),
        }
    }
}

/// One scene with the referring expressions generated for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub index: usize,
    pub canvas_size: u32,
    pub shapes: Vec<ShapeSpec>,
    /// `(referred shape index, description)` pairs.
    pub referrals: Vec<(usize, Referent)>,
    pub split: Split,
}

impl SyntheticSceneSpec {
    pub fn image_file(&self) -> String {
        format!("scene{:05}.png", self.index)
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.canvas_size, self.canvas_size, Rgb(BACKGROUND));
        for s in &self.shapes {
            let m = render_shape_mask(s, self.canvas_size);
            for y in 0..self.canvas_size {
                for x in 0..self.canvas_size {
                    if m.get(x, y) {
                        img.put_pixel(x, y, Rgb(s.color.rgb()));
                    }
                }
            }
        }
        img
    }
}

/// Pixels covered by `shape` alone on a `canvas`² grid.
pub fn render_shape_mask(shape: &ShapeSpec, canvas: u32) -> BinaryMask {
    let mut m = BinaryMask::empty(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            if shape.covers(x, y) {
                m.set(x, y, true);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub canvas_size: u32,
    pub shapes_per_scene: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Minimum pixel gap between bounding boxes.
    pub gap: u32,
    pub max_attempts: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            shapes_per_scene: 2,
            min_size: 20,
            max_size: 28,
            gap: 2,
            max_attempts: 1000,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        if self.shapes_per_scene == 0 {
            return Err(Error::Generation("shapes_per_scene must be at least 1".into()));
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return Err(Error::Generation(format!(
                "shape sizes must satisfy 4 <= min_size <= max_size, got {}..{}",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.canvas_size {
            return Err(Error::Generation(format!(
                "max_size {} exceeds canvas {}",
                self.max_size, self.canvas_size
            )));
        }
        // Area bound: the boxes alone cannot fit.
        let cell = (self.min_size + self.gap) as u64;
        let room = (self.canvas_size + self.gap) as u64;
        if self.shapes_per_scene as u64 * cell * cell > room * room {
            return Err(Error::Generation(format!(
                "{} shapes of at least {}px do not fit a {}px canvas",
                self.shapes_per_scene, self.min_size, self.canvas_size
            )));
        }
        Ok(())
    }
}

fn place_shapes(rng: &mut ChaCha8Rng, p: &SyntheticParams) -> Option<Vec<ShapeSpec>> {
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let mut tries = 0;
    while shapes.len() < p.shapes_per_scene {
        tries += 1;
        if tries > p.max_attempts {
            return None;
        }
        let size = rng.random_range(p.min_size..=p.max_size);
        let s = ShapeSpec {
            kind: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            color: ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())],
            size,
            x: rng.random_range(0..=p.canvas_size - size),
            y: rng.random_range(0..=p.canvas_size - size),
        };
        if shapes.iter().all(|o| !s.overlaps(o, p.gap)) {
            shapes.push(s);
        }
    }
    Some(shapes)
}

/// Every description of `shapes[idx]` in any phrase class that fits it alone.
fn unique_descriptions(idx: usize, shapes: &[ShapeSpec], canvas: u32) -> [Vec<Referent>; 3] {
    let s = shapes[idx];
    let base = |constraint| Referent {
        kind: s.kind,
        color: s.color,
        constraint,
    };
    let unique = |r: &Referent| r.matching(shapes, canvas) == [idx];
    let category: Vec<Referent> = [base(Constraint::None)].into_iter().filter(unique).collect();
    let absolute = Region::ALL
        .into_iter()
        .map(|r| base(Constraint::Region(r)))
        .filter(unique)
        .collect();
    let mut relational = Vec::new();
    for (j, o) in shapes.iter().enumerate() {
        if j == idx {
            continue;
        }
        for relation in [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below] {
            let r = base(Constraint::Relation {
                relation,
                kind: o.kind,
                color: o.color,
            });
            if relation.holds(&s, o) && unique(&r) && !relational.contains(&r) {
                relational.push(r);
            }
        }
    }
    [category, absolute, relational]
}

fn assign_splits(rng: &mut ChaCha8Rng, scenes: usize) -> Vec<Split> {
    let mut splits = vec![Split::Train; scenes];
    if scenes >= 3 {
        let held = ((scenes as f64 * 0.1).round() as usize).max(1);
        let mut order: Vec<usize> = (0..scenes).collect();
        order.shuffle(rng);
        for &i in &order[..held] {
            splits[i] = Split::Val;
        }
        for &i in &order[held..2 * held] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Scene layouts and descriptions for `count` triplets. Each scene refers to
/// each of its shapes once, so the last scene may refer to fewer.
pub fn generate_scenes(seed: u64, count: usize, params: &SyntheticParams) -> Result<Vec<SyntheticSceneSpec>> {
    if count == 0 {
        return Err(Error::Input("count must be at least 1".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = params.shapes_per_scene;
    let n_scenes = count.div_ceil(per);
    let splits = assign_splits(&mut rng, n_scenes);
    let mut scenes = Vec::with_capacity(n_scenes);
    for (index, split) in splits.into_iter().enumerate() {
        let wanted = per.min(count - index * per);
        let mut attempt = 0;
        let scene = loop {
            attempt += 1;
            if attempt > params.max_attempts {
                return Err(Error::Generation(format!(
                    "no describable layout for scene {index} after {} attempts",
                    params.max_attempts
                )));
            }
            let Some(shapes) = place_shapes(&mut rng, params) else {
                continue;
            };
            let mut referrals = Vec::with_capacity(wanted);
            for idx in 0..wanted {
                let classes: Vec<Vec<Referent>> = unique_descriptions(idx, &shapes, params.canvas_size)
                    .into_iter()
                    .filter(|c| !c.is_empty())
                    .collect();
                if classes.is_empty() {
                    break;
                }
                let class = &classes[rng.random_range(0..classes.len())];
                referrals.push((idx, class[rng.random_range(0..class.len())]));
            }
            if referrals.len() == wanted {
                break SyntheticSceneSpec {
                    index,
                    canvas_size: params.canvas_size,
                    shapes,
                    referrals,
                    split,
                };
            }
        };
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Triplets for the scenes of [`generate_scenes`]; triplets of one scene share an image.
pub fn scenes_to_triplets(seed: u64, scenes: &[SyntheticSceneSpec]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for scene in scenes {
        let image = Arc::new(scene.render());
        for (k, (idx, referent)) in scene.referrals.iter().enumerate() {
            let shape = &scene.shapes[*idx];
            out.push(Triplet {
                id: format!("syn{seed}-{:05}-{k}", scene.index),
                image_file: scene.image_file(),
                image: image.clone(),
                expression: referent.to_string(),
                mask: render_shape_mask(shape, scene.canvas_size),
                category: shape.kind.name().to_string(),
                split: scene.split,
            });
        }
    }
    out
}

/// Deterministic synthetic dataset of exactly `count` triplets.
pub fn generate_synthetic(seed: u64, count: usize, params: &SyntheticParams) -> Result<Vec<Triplet>> {
    let scenes = generate_scenes(seed, count, params)?;
    Ok(scenes_to_triplets(seed, &scenes))
}
