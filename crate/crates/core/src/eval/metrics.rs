use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, Rect};
use crate::persist::write_atomic;
use crate::voting::Retrieval;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: u32,
    pub image_id: u32,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub classes: Vec<ClassInfo>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of the precision at every true positive.
    #[default]
    Discrete,
    /// Mean of the maximum precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// True-positive flags of a ranking. Each ground truth is claimed at most
/// once, by the first retrieval in rank order that reaches `iou_thresh`
/// with it (highest IoU among the unclaimed boxes of that image).
pub fn true_positives(ranked: &[Retrieval], gts: &[Annotation], iou_thresh: f64) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    ranked
        .iter()
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if claimed[i] || g.image_id != r.image_id {
                    continue;
                }
                let o = iou(&r.rect, &g.rect);
                if o >= iou_thresh && best.is_none_or(|b| o > b.1) {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, _)) => {
                    claimed[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of `ranked` (best first) against `gts`; `None` when
/// there is no ground truth.
pub fn average_precision(ranked: &[Retrieval], gts: &[Annotation], iou_thresh: f64) -> Option<f64> {
    average_precision_with(ranked, gts, iou_thresh, ApMode::Discrete)
}

pub fn average_precision_with(
    ranked: &[Retrieval],
    gts: &[Annotation],
    iou_thresh: f64,
    mode: ApMode,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let tp = true_positives(ranked, gts, iou_thresh);
    let n = gts.len() as f64;
    let mut hits = 0usize;
    let mut points = Vec::new();
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
            points.push((hits as f64 / n, hits as f64 / (i + 1) as f64));
        }
    }
    Some(match mode {
        ApMode::Discrete => points.iter().map(|p| p.1).sum::<f64>() / n,
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    points
                        .iter()
                        .filter(|p| p.0 >= r - 1e-12)
                        .map(|p| p.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Mean over classes of the mean AP of each class's queries.
pub fn mean_average_precision(per_class: &BTreeMap<u32, Vec<f64>>) -> f64 {
    let means: Vec<f64> = per_class
        .values()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    if means.is_empty() {
        return 0.0;
    }
    means.iter().sum::<f64>() / means.len() as f64
}

/// Fraction of queries whose top-1 label equals the query label.
pub fn accuracy_at_1(pairs: &[(u32, Option<u32>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(q, t)| Some(*q) == *t).count() as f64 / pairs.len() as f64
}
