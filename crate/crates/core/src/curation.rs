//! Two-stage score-based selection.
//!
//! 1. Image level: each generated image gets the mean of its per-box
//!    crop/text scores; images strictly above the mean over all images are
//!    kept.
//! 2. Object level: each annotated object gets its mean pixel uncertainty
//!    `(1 - p)` over its mask; within every category the `n` least uncertain
//!    objects are kept.
//!
//! Both reductions run over inputs sorted by id, so results do not depend on
//! input order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, ObjectInstance};
use crate::providers::{invoke, CallLog, CropScorer, ImageHandle, ProviderError, ProviderKind, RetryPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("image has no objects to score")]
    NoObjects,
    #[error("score gate needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("degenerate score distribution: no image scores above the mean {mean}")]
    DegenerateDistribution { mean: f64 },
    #[error("object {object_id} has an empty mask; uncertainty is undefined")]
    EmptyMask { object_id: u32 },
    #[error("object {object_id}: {reason}")]
    Misaligned { object_id: u32, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Clip,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub stage: Stage,
    pub kept: usize,
    pub dropped: usize,
    /// Kept objects per category (for the image gate: objects in kept images).
    pub per_class_kept: BTreeMap<u32, usize>,
    /// Score mean for the image gate, per-class cap for the uncertainty gate.
    pub threshold: f64,
    pub kept_entries: Vec<AuditEntry>,
    pub dropped_entries: Vec<AuditEntry>,
}

impl SelectionReport {
    pub fn input(&self) -> usize {
        self.kept + self.dropped
    }

    pub fn keep_rate(&self) -> f64 {
        if self.input() == 0 {
            0.0
        } else {
            self.kept as f64 / self.input() as f64
        }
    }
}

/// Arithmetic mean of per-object scores.
pub fn clip_image_score(object_scores: &[f64]) -> Result<f64, CurationError> {
    if object_scores.is_empty() {
        return Err(CurationError::NoObjects);
    }
    Ok(object_scores.iter().sum::<f64>() / object_scores.len() as f64)
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Scores every `(box, class name)` crop of an image and returns the image
/// score together with the per-object scores.
pub fn score_image(
    image: &ImageHandle,
    objects: &[(BBox, &str)],
    scorer: &dyn CropScorer,
    policy: &RetryPolicy,
    log: &mut CallLog,
) -> Result<(f64, Vec<f64>), ScoreError> {
    let mut scores = Vec::with_capacity(objects.len());
    for (bbox, name) in objects {
        let request = (&image.uri, bbox, name);
        let s = invoke(log, ProviderKind::Scorer, &request, policy, || scorer.score(image, bbox, name))?;
        scores.push(s.clamp(0.0, 1.0));
    }
    Ok((clip_image_score(&scores)?, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: u64,
    pub score: f64,
    pub category_ids: Vec<u32>,
}

/// Keeps images whose score is strictly greater than the mean score.
/// Returns the kept image ids in ascending order.
pub fn select_by_clip_score(images: &[ImageScore]) -> Result<(Vec<u64>, SelectionReport), CurationError> {
    if images.len() < 2 {
        return Err(CurationError::TooFewImages(images.len()));
    }
    let mut sorted: Vec<&ImageScore> = images.iter().collect();
    sorted.sort_by_key(|i| i.image_id);
    let mean = sorted.iter().map(|i| i.score).sum::<f64>() / sorted.len() as f64;

    let mut kept = Vec::new();
    let mut per_class_kept = BTreeMap::new();
    let mut kept_entries = Vec::new();
    let mut dropped_entries = Vec::new();
    for img in sorted {
        let entry = AuditEntry {
            image_id: img.image_id,
            object_id: None,
            category_id: None,
            score: img.score,
        };
        if img.score > mean {
            kept.push(img.image_id);
            for c in &img.category_ids {
                *per_class_kept.entry(*c).or_insert(0) += 1;
            }
            kept_entries.push(entry);
        } else {
            dropped_entries.push(entry);
        }
    }
    if kept.is_empty() {
        return Err(CurationError::DegenerateDistribution { mean });
    }
    let report = SelectionReport {
        stage: Stage::Clip,
        kept: kept.len(),
        dropped: dropped_entries.len(),
        per_class_kept,
        threshold: mean,
        kept_entries,
        dropped_entries,
    };
    Ok((kept, report))
}

/// Mean of `1 - p` over the object's mask pixels, reading `p` from the
/// box-resolution confidence map.
pub fn object_uncertainty(obj: &ObjectInstance) -> Result<f64, CurationError> {
    let misaligned = |reason: String| CurationError::Misaligned {
        object_id: obj.object_id,
        reason,
    };
    let b = obj.bbox;
    if obj.confidence.width() != b.w || obj.confidence.height() != b.h {
        return Err(misaligned("confidence map does not match the bbox".into()));
    }
    let mut sum = 0.0;
    let mut count: u64 = 0;
    for (y, x0, x1) in obj.mask.row_spans() {
        if y < b.y || u64::from(y) >= b.bottom() || x0 < b.x || u64::from(x1) > b.right() {
            return Err(misaligned(format!("mask row {y} [{x0}, {x1}) leaves the bbox")));
        }
        let row = &obj.confidence.values()[((y - b.y) * b.w) as usize..][..b.w as usize];
        for &p in &row[(x0 - b.x) as usize..(x1 - b.x) as usize] {
            sum += 1.0 - f64::from(p);
        }
        count += u64::from(x1 - x0);
    }
    if count == 0 {
        return Err(CurationError::EmptyMask {
            object_id: obj.object_id,
        });
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectKey {
    pub image_id: u64,
    pub object_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub key: ObjectKey,
    pub category_id: u32,
    pub uncertainty: f64,
}

/// Keeps, independently per category, the `n` objects with the lowest
/// uncertainty (ties by image id, then object id). Returns kept keys in
/// ascending key order.
pub fn select_top_n_per_class(objs: &[ObjectScore], n: usize) -> Result<(Vec<ObjectKey>, SelectionReport), CurationError> {
    if n == 0 {
        return Err(CurationError::InvalidParameter("per-class cap must be >= 1".into()));
    }
    if let Some(o) = objs.iter().find(|o| !(0.0..=1.0).contains(&o.uncertainty)) {
        return Err(CurationError::InvalidParameter(format!(
            "uncertainty {} of {:?} outside [0, 1]",
            o.uncertainty, o.key
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<&ObjectScore>> = BTreeMap::new();
    for o in objs {
        by_class.entry(o.category_id).or_default().push(o);
    }
    let mut kept: Vec<&ObjectScore> = Vec::new();
    let mut dropped: Vec<&ObjectScore> = Vec::new();
    let mut per_class_kept = BTreeMap::new();
    for (class, mut members) in by_class {
        members.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty).then(a.key.cmp(&b.key)));
        let take = n.min(members.len());
        per_class_kept.insert(class, take);
        kept.extend(members[..take].iter().copied());
        dropped.extend(members[take..].iter().copied());
    }
    kept.sort_by_key(|o| o.key);
    dropped.sort_by_key(|o| o.key);
    let entry = |o: &&ObjectScore| AuditEntry {
        image_id: o.key.image_id,
        object_id: Some(o.key.object_id),
        category_id: Some(o.category_id),
        score: o.uncertainty,
    };
    let report = SelectionReport {
        stage: Stage::Uncertainty,
        kept: kept.len(),
        dropped: dropped.len(),
        per_class_kept,
        threshold: n as f64,
        kept_entries: kept.iter().map(entry).collect(),
        dropped_entries: dropped.iter().map(entry).collect(),
    };
    Ok((kept.iter().map(|o| o.key).collect(), report))
}
