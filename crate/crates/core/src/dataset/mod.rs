//! Core domain types: categories, vocabularies, boxes, masks, confidence maps
//! and image records for both real and synthetic data.

mod coco;
mod rle;

use std::collections::{BTreeSet, HashSet};

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use coco::{
    export_coco_panoptic, import_coco_panoptic, read_dataset, write_dataset, AnnotationEntry,
    CategoryEntry, DatasetChecksums, ImageEntry, PanopticIndex, RleEntry, SegmentInfo,
    CHECKSUM_FILE, INDEX_FILE,
};
pub use rle::{rle_decode, rle_encode, BitGrid};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed mask: {0}")]
    MalformedMask(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid record {image_id}: {reason}")]
    InvalidRecord { image_id: u64, reason: String },
    #[error("export error: {0}")]
    Export(String),
    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Train,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub origin: Origin,
}

/// Ordered set of categories with unique ids and case-insensitively unique
/// names. Because names are unique, the train and novel name sets are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
#[serde(transparent)]
pub struct Vocabulary {
    categories: Vec<Category>,
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let categories = Vec::<Category>::deserialize(d)?;
        Vocabulary::new(categories).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>) -> Result<Self, DatasetError> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &categories {
            if c.name.trim().is_empty() {
                return Err(DatasetError::InvalidVocabulary(format!("category {} has an empty name", c.id)));
            }
            if !ids.insert(c.id) {
                return Err(DatasetError::InvalidVocabulary(format!("duplicate category id {}", c.id)));
            }
            if !names.insert(c.name.to_lowercase()) {
                return Err(DatasetError::InvalidVocabulary(format!("duplicate category name {:?}", c.name)));
            }
        }
        Ok(Self { categories })
    }

    /// Builds a train-only vocabulary with ids `0..names.len()`.
    pub fn from_train_names<S: AsRef<str>>(names: &[S]) -> Result<Self, DatasetError> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| Category {
                    id: i as u32,
                    name: n.as_ref().trim().to_string(),
                    origin: Origin::Train,
                })
                .collect(),
        )
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        let name = name.trim().to_lowercase();
        self.categories.iter().find(|c| c.name.to_lowercase() == name)
    }

    pub fn train(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.origin == Origin::Train)
    }

    pub fn novel(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.origin == Origin::Novel)
    }

    pub fn next_id(&self) -> u32 {
        self.categories.iter().map(|c| c.id + 1).max().unwrap_or(0)
    }

    /// Appends a novel category with a fresh id.
    pub fn push_novel(&mut self, name: &str) -> Result<u32, DatasetError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(DatasetError::InvalidVocabulary("empty novel name".into()));
        }
        if self.by_name(name).is_some() {
            return Err(DatasetError::InvalidVocabulary(format!("{name:?} already present")));
        }
        let id = self.next_id();
        self.categories.push(Category {
            id,
            name: name.to_string(),
            origin: Origin::Novel,
        });
        Ok(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, DatasetError> {
        if w == 0 || h == 0 {
            return Err(DatasetError::InvalidBox(format!("zero extent {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= u64::from(width) && self.bottom() <= u64::from(height)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && u64::from(x) < self.right() && u64::from(y) < self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let x0 = u64::from(self.x.max(other.x));
        let y0 = u64::from(self.y.max(other.y));
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Sub-box of half the extent sharing the same centre (at least 1 px).
    pub fn inner_half(&self) -> BBox {
        let w = (self.w / 2).max(1);
        let h = (self.h / 2).max(1);
        BBox {
            x: self.x + (self.w - w) / 2,
            y: self.y + (self.h - h) / 2,
            w,
            h,
        }
    }
}

/// Binary mask stored as uncompressed row-major runs; the first run counts
/// zeros (and may be empty), every later run is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

#[derive(Deserialize)]
struct RawMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawMask::deserialize(d)?;
        Mask::new(raw.width, raw.height, raw.runs).map_err(serde::de::Error::custom)
    }
}

impl Mask {
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, DatasetError> {
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        let expected = u64::from(width) * u64::from(height);
        if total != expected {
            return Err(DatasetError::MalformedMask(format!(
                "runs sum to {total}, expected {width}x{height} = {expected}"
            )));
        }
        if expected == 0 {
            return Err(DatasetError::MalformedMask("empty grid".into()));
        }
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(DatasetError::MalformedMask("zero-length interior run".into()));
        }
        Ok(Self { width, height, runs })
    }

    /// All-zero mask.
    pub fn empty(width: u32, height: u32) -> Result<Self, DatasetError> {
        Self::new(width, height, vec![width * height])
    }

    /// Builds a mask from row spans `(y, x0, x1)` with `x0 < x1 <= width`.
    /// Spans must be sorted by position and must not overlap.
    pub fn from_row_spans<I>(width: u32, height: u32, spans: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (u32, u32, u32)>,
    {
        let total = u64::from(width) * u64::from(height);
        let mut runs = Vec::new();
        let mut cursor: u64 = 0;
        let mut ones: u64 = 0;
        for (y, x0, x1) in spans {
            if x0 >= x1 || x1 > width || y >= height {
                return Err(DatasetError::MalformedMask(format!("bad span ({y}, {x0}, {x1})")));
            }
            let start = u64::from(y) * u64::from(width) + u64::from(x0);
            let end = start + u64::from(x1 - x0);
            let run_end = cursor + ones;
            if start < run_end {
                return Err(DatasetError::MalformedMask("spans overlap or are unsorted".into()));
            }
            if start == run_end && ones > 0 {
                ones += end - start;
                continue;
            }
            if ones > 0 {
                runs.push(ones as u32);
            }
            runs.push((start - run_end) as u32);
            cursor = start;
            ones = end - start;
        }
        if ones > 0 {
            runs.push(ones as u32);
        }
        let covered = cursor + ones;
        if runs.is_empty() {
            runs.push(total as u32);
        } else if covered < total {
            runs.push((total - covered) as u32);
        }
        Self::new(width, height, runs)
    }

    pub fn from_rect(width: u32, height: u32, bbox: &BBox) -> Result<Self, DatasetError> {
        if !bbox.fits_in(width, height) {
            return Err(DatasetError::InvalidBox(format!("{bbox:?} outside {width}x{height}")));
        }
        Self::from_row_spans(width, height, (bbox.y..bbox.y + bbox.h).map(|y| (y, bbox.x, bbox.x + bbox.w)))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| u64::from(r)).sum()
    }

    /// Set pixels as maximal row segments `(y, x0, x1)`, in row-major order.
    pub fn row_spans(&self) -> RowSpans<'_> {
        RowSpans {
            mask: self,
            run: 0,
            pos: 0,
            pending: None,
        }
    }

    /// Tight bounding box of the set pixels, if any.
    pub fn bounds(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for (y, a, b) in self.row_spans() {
            any = true;
            x0 = x0.min(a);
            x1 = x1.max(b);
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
        }
        any.then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn within(&self, bbox: &BBox) -> bool {
        self.row_spans()
            .all(|(y, a, b)| y >= bbox.y && u64::from(y) < bbox.bottom() && a >= bbox.x && u64::from(b) <= bbox.right())
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let target = u64::from(y) * u64::from(self.width) + u64::from(x);
        let mut pos = 0u64;
        for (i, &r) in self.runs.iter().enumerate() {
            pos += u64::from(r);
            if target < pos {
                return i % 2 == 1;
            }
        }
        false
    }
}

pub struct RowSpans<'a> {
    mask: &'a Mask,
    run: usize,
    pos: u64,
    pending: Option<(u64, u64)>,
}

impl Iterator for RowSpans<'_> {
    type Item = (u32, u32, u32);

    fn next(&mut self) -> Option<Self::Item> {
        let width = u64::from(self.mask.width);
        loop {
            if let Some((start, end)) = self.pending {
                let y = start / width;
                let row_end = (y + 1) * width;
                let seg_end = end.min(row_end);
                self.pending = (seg_end < end).then_some((seg_end, end));
                let x0 = start - y * width;
                let x1 = seg_end - y * width;
                return Some((y as u32, x0 as u32, x1 as u32));
            }
            let r = *self.mask.runs.get(self.run)?;
            let start = self.pos;
            self.pos += u64::from(r);
            let is_one = self.run % 2 == 1;
            self.run += 1;
            if is_one && r > 0 {
                self.pending = Some((start, self.pos));
            }
        }
    }
}

/// Per-pixel foreground confidences over an object's box (not the full
/// image). Pixel `(x, y)` of the image maps to `(x - bbox.x, y - bbox.y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, DatasetError> {
        if values.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(DatasetError::MalformedMask(format!(
                "confidence map has {} values for {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::MalformedMask(format!("confidence {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Result<Self, DatasetError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(width: u32, height: u32, bytes: &[u8]) -> Result<Self, DatasetError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(DatasetError::MalformedMask("confidence payload not a multiple of 4 bytes".into()));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(width, height, values)
    }
}

#[derive(Serialize, Deserialize)]
struct ConfidenceWire {
    width: u32,
    height: u32,
    /// Base64 of little-endian f32 values.
    data: String,
}

impl Serialize for ConfidenceMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ConfidenceWire {
            width: self.width,
            height: self.height,
            data: base64::engine::general_purpose::STANDARD.encode(self.to_le_bytes()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConfidenceMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = ConfidenceWire::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(wire.data.as_bytes())
            .map_err(serde::de::Error::custom)?;
        ConfidenceMap::from_le_bytes(wire.width, wire.height, &bytes).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: u32,
    pub category_id: u32,
    pub bbox: BBox,
    /// Full-image mask.
    pub mask: Mask,
    /// Box-resolution confidences.
    pub confidence: ConfidenceMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

impl ObjectInstance {
    /// Checks the object against its image dimensions.
    pub fn check(&self, width: u32, height: u32) -> Result<(), String> {
        if !self.bbox.fits_in(width, height) {
            return Err(format!("object {} bbox {:?} outside image", self.object_id, self.bbox));
        }
        if self.mask.width() != width || self.mask.height() != height {
            return Err(format!("object {} mask has wrong dimensions", self.object_id));
        }
        if !self.mask.within(&self.bbox) {
            return Err(format!("object {} mask extends outside its bbox", self.object_id));
        }
        if self.confidence.width() != self.bbox.w || self.confidence.height() != self.bbox.h {
            return Err(format!("object {} confidence map not aligned with bbox", self.object_id));
        }
        for (name, v) in [("clip_score", self.clip_score), ("uncertainty", self.uncertainty)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("object {} {name} {v} outside [0, 1]", self.object_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub source: Source,
    pub objects: Vec<ObjectInstance>,
    /// Opaque locator; pixel data never lives in records.
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

impl ImageRecord {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DatasetError> {
        let fail = |reason: String| DatasetError::InvalidRecord {
            image_id: self.image_id,
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(fail("zero-sized image".into()));
        }
        if self.source == Source::Synthetic && self.layout_id.is_none() {
            return Err(fail("synthetic record without layout id".into()));
        }
        let mut seen = BTreeSet::new();
        for obj in &self.objects {
            if !seen.insert(obj.object_id) {
                return Err(fail(format!("duplicate object id {}", obj.object_id)));
            }
            if vocab.get(obj.category_id).is_none() {
                return Err(fail(format!("unknown category {}", obj.category_id)));
            }
            obj.check(self.width, self.height).map_err(fail)?;
        }
        Ok(())
    }
}
