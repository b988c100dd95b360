//! Per-sample IoU, mIoU, oIoU and Pr@X with per-category breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleIou {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// IoU credited when both prediction and ground truth are empty.
pub const EMPTY_IOU: f64 = 1.0;

/// Foreground intersection and union of two equally sized binary masks (nonzero = foreground).
pub fn sample_iou(pred: &[u8], gt: &[u8]) -> Result<SampleIou> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok(SampleIou {
        intersection: inter,
        union,
        iou: iou_of(inter, union, EMPTY_IOU),
    })
}

fn iou_of(inter: u64, union: u64, empty: f64) -> f64 {
    if union == 0 {
        empty
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub intersection: u64,
    pub union: u64,
    pub category: String,
}

/// Per-sample counts; merging shards in any order gives the same report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAccumulator {
    samples: Vec<SampleRecord>,
    /// IoU credited to a sample whose union is empty.
    pub empty_iou: f64,
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self {
            samples: Vec::new(),
            empty_iou: EMPTY_IOU,
        }
    }
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, intersection: u64, union: u64, category: impl Into<String>) -> Result<()> {
        if intersection > union {
            return Err(Error::Input(format!(
                "intersection {intersection} exceeds union {union}"
            )));
        }
        self.samples.push(SampleRecord {
            intersection,
            union,
            category: category.into(),
        });
        Ok(())
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8], category: impl Into<String>) -> Result<SampleIou> {
        let s = sample_iou(pred, gt)?;
        self.push(s.intersection, s.union, category)?;
        Ok(s)
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.samples.extend(other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn finalize(&self) -> Result<EvalReport> {
        let overall = stats(self.samples.iter(), self.empty_iou)
            .ok_or_else(|| Error::Usage("cannot finalize an empty accumulator".into()))?;
        let mut by_cat: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for s in &self.samples {
            by_cat.entry(&s.category).or_default().push(s);
        }
        let per_category = by_cat
            .into_iter()
            .filter_map(|(k, v)| stats(v.into_iter(), self.empty_iou).map(|s| (k.to_string(), s)))
            .collect();
        Ok(EvalReport {
            overall,
            per_category,
        })
    }
}

/// mIoU / oIoU / Pr@X over one group of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub count: usize,
    pub miou: f64,
    pub oiou: f64,
    /// `(threshold, percentage of samples whose IoU exceeds it)`, thresholds ascending.
    pub pr_at: Vec<(f64, f64)>,
}

impl EvalStats {
    pub fn pr(&self, threshold: f64) -> Option<f64> {
        self.pr_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, p)| p)
    }
}

fn stats<'a>(samples: impl Iterator<Item = &'a SampleRecord>, empty: f64) -> Option<EvalStats> {
    let mut ious = Vec::new();
    let (mut si, mut su) = (0u64, 0u64);
    for s in samples {
        ious.push(iou_of(s.intersection, s.union, empty));
        si += s.intersection;
        su += s.union;
    }
    if ious.is_empty() {
        return None;
    }
    let m = ious.len() as f64;
    let miou = ious.iter().sum::<f64>() / m;
    let oiou = if su == 0 { empty } else { si as f64 / su as f64 };
    let pr_at = THRESHOLDS
        .iter()
        .map(|&x| (x, 100.0 * ious.iter().filter(|&&v| v > x).count() as f64 / m))
        .collect();
    Some(EvalStats {
        count: ious.len(),
        miou,
        oiou,
        pr_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalStats,
    pub per_category: BTreeMap<String, EvalStats>,
}

/// Round half-up to two decimals. Values within 1e-6 of a half-hundredth
/// boundary (after scaling) count as on it, absorbing binary representation error.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-6).floor() / 100.0
}

impl EvalReport {
    pub fn miou(&self) -> f64 {
        self.overall.miou
    }

    pub fn oiou(&self) -> f64 {
        self.overall.oiou
    }

    fn stats_json(s: &EvalStats) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        obj.insert("count".into(), s.count.into());
        for &(t, p) in &s.pr_at {
            obj.insert(format!("pr@{t:.1}"), round2(p).into());
        }
        obj.insert("miou".into(), round2(100.0 * s.miou).into());
        obj.insert("oiou".into(), round2(100.0 * s.oiou).into());
        serde_json::Value::Object(obj)
    }

    /// Percentages rounded to two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let cats: serde_json::Map<_, _> = self
            .per_category
            .iter()
            .map(|(k, v)| (k.clone(), Self::stats_json(v)))
            .collect();
        serde_json::json!({
            "overall": Self::stats_json(&self.overall),
            "per_category": cats,
        })
    }

    /// Aligned table with columns Pr@0.5..Pr@0.9, mIoU, oIoU.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "split");
        for t in THRESHOLDS {
            let _ = write!(out, "{:>9}", format!("Pr@{t:.1}"));
        }
        let _ = writeln!(out, "{:>9}{:>9}", "mIoU", "oIoU");
        let mut row = |name: &str, s: &EvalStats| {
            let _ = write!(out, "{name:<20}");
            for &(_, p) in &s.pr_at {
                let _ = write!(out, "{:>9.2}", round2(p));
            }
            let _ = writeln!(out, "{:>9.2}{:>9.2}", round2(100.0 * s.miou), round2(100.0 * s.oiou));
        };
        row("overall", &self.overall);
        for (k, v) in &self.per_category {
            row(k, v);
        }
        out
    }
}
