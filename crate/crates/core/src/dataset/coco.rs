//! COCO-panoptic style JSON index with per-segment bbox and uncompressed RLE.
//!
//! The index lists images, categories and one annotation entry per image
//! (each carrying its segment infos). A sidecar checksum file records the
//! SHA-256 of the exact index bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BBox, Category, ConfidenceMap, DatasetError, ImageRecord, Mask, ObjectInstance, Origin, Source, Vocabulary,
};
use crate::hashing::{canonical_json, sha256_hex};

pub const INDEX_FILE: &str = "panoptic.json";
pub const CHECKSUM_FILE: &str = "checksums.json";
const FORMAT: &str = "dreamforge-panoptic";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticIndex {
    pub info: IndexInfo,
    pub images: Vec<ImageEntry>,
    pub categories: Vec<CategoryEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexInfo {
    pub format: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
    pub origin: Origin,
    pub isthing: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    pub segments_info: Vec<SegmentInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleEntry {
    /// `[height, width]`, as in COCO.
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    /// `[x, y, w, h]`.
    pub bbox: [u32; 4],
    pub area: u64,
    pub iscrowd: u8,
    pub segmentation: RleEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
    pub confidence: ConfidenceMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetChecksums {
    pub files: BTreeMap<String, String>,
}

pub fn export_coco_panoptic(records: &[ImageRecord], vocab: &Vocabulary) -> Result<PanopticIndex, DatasetError> {
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.image_id) {
            return Err(DatasetError::Export(format!("duplicate image_id {}", r.image_id)));
        }
        r.validate(vocab)?;
    }
    let categories = vocab
        .categories()
        .iter()
        .map(|c| CategoryEntry {
            id: c.id,
            name: c.name.clone(),
            origin: c.origin,
            isthing: 1,
        })
        .collect();
    let images = records
        .iter()
        .map(|r| ImageEntry {
            id: r.image_id,
            width: r.width,
            height: r.height,
            file_name: r.image_uri.clone(),
            source: r.source,
            layout_id: r.layout_id.clone(),
            clip_score: r.clip_score,
        })
        .collect();
    let annotations = records
        .iter()
        .map(|r| AnnotationEntry {
            image_id: r.image_id,
            segments_info: r
                .objects
                .iter()
                .map(|o| SegmentInfo {
                    id: o.object_id,
                    category_id: o.category_id,
                    bbox: [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h],
                    area: o.mask.area(),
                    iscrowd: 0,
                    segmentation: RleEntry {
                        size: [o.mask.height(), o.mask.width()],
                        counts: o.mask.runs().to_vec(),
                    },
                    clip_score: o.clip_score,
                    uncertainty: o.uncertainty,
                    confidence: o.confidence.clone(),
                })
                .collect(),
        })
        .collect();
    Ok(PanopticIndex {
        info: IndexInfo {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
        },
        images,
        categories,
        annotations,
    })
}

pub fn import_coco_panoptic(index: &PanopticIndex) -> Result<(Vec<ImageRecord>, Vocabulary), DatasetError> {
    if index.info.format != FORMAT || index.info.version != FORMAT_VERSION {
        return Err(DatasetError::Export(format!(
            "unsupported index format {} v{}",
            index.info.format, index.info.version
        )));
    }
    let vocab = Vocabulary::new(
        index
            .categories
            .iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.clone(),
                origin: c.origin,
            })
            .collect(),
    )?;
    let mut by_image: BTreeMap<u64, &AnnotationEntry> = BTreeMap::new();
    for a in &index.annotations {
        if by_image.insert(a.image_id, a).is_some() {
            return Err(DatasetError::Export(format!("duplicate annotation for image {}", a.image_id)));
        }
    }
    let mut records = Vec::with_capacity(index.images.len());
    let mut seen = HashSet::new();
    for img in &index.images {
        if !seen.insert(img.id) {
            return Err(DatasetError::Export(format!("duplicate image_id {}", img.id)));
        }
        let objects = match by_image.remove(&img.id) {
            None => Vec::new(),
            Some(a) => a
                .segments_info
                .iter()
                .map(|s| segment_to_object(img, s))
                .collect::<Result<_, _>>()?,
        };
        let record = ImageRecord {
            image_id: img.id,
            width: img.width,
            height: img.height,
            source: img.source,
            objects,
            image_uri: img.file_name.clone(),
            layout_id: img.layout_id.clone(),
            clip_score: img.clip_score,
        };
        record.validate(&vocab)?;
        records.push(record);
    }
    if let Some(orphan) = by_image.keys().next() {
        return Err(DatasetError::Export(format!("annotation for unknown image {orphan}")));
    }
    Ok((records, vocab))
}

fn segment_to_object(img: &ImageEntry, s: &SegmentInfo) -> Result<ObjectInstance, DatasetError> {
    let [h, w] = s.segmentation.size;
    if w != img.width || h != img.height {
        return Err(DatasetError::InvalidRecord {
            image_id: img.id,
            reason: format!("segment {} size {w}x{h} differs from image", s.id),
        });
    }
    let mask = Mask::new(w, h, s.segmentation.counts.clone())?;
    if mask.area() != s.area {
        return Err(DatasetError::InvalidRecord {
            image_id: img.id,
            reason: format!("segment {} area {} does not match its runs", s.id, s.area),
        });
    }
    let [x, y, bw, bh] = s.bbox;
    Ok(ObjectInstance {
        object_id: s.id,
        category_id: s.category_id,
        bbox: BBox::new(x, y, bw, bh)?,
        mask,
        confidence: s.confidence.clone(),
        clip_score: s.clip_score,
        uncertainty: s.uncertainty,
    })
}

/// Writes the index and its checksum file into `dir`.
pub fn write_dataset(dir: &Path, records: &[ImageRecord], vocab: &Vocabulary) -> Result<DatasetChecksums, DatasetError> {
    let index = export_coco_panoptic(records, vocab)?;
    let bytes = canonical_json(&index);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(INDEX_FILE), &bytes)?;
    let checksums = DatasetChecksums {
        files: BTreeMap::from([(INDEX_FILE.to_string(), sha256_hex(&bytes))]),
    };
    fs::write(dir.join(CHECKSUM_FILE), canonical_json(&checksums))?;
    Ok(checksums)
}

/// Reads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<ImageRecord>, Vocabulary), DatasetError> {
    let bytes = fs::read(dir.join(INDEX_FILE))?;
    let checksums: DatasetChecksums = serde_json::from_slice(&fs::read(dir.join(CHECKSUM_FILE))?)?;
    let expected = checksums
        .files
        .get(INDEX_FILE)
        .ok_or_else(|| DatasetError::Export(format!("{CHECKSUM_FILE} has no entry for {INDEX_FILE}")))?;
    let found = sha256_hex(&bytes);
    if &found != expected {
        return Err(DatasetError::ChecksumMismatch {
            file: INDEX_FILE.into(),
            expected: expected.clone(),
            found,
        });
    }
    let index: PanopticIndex = serde_json::from_slice(&bytes)?;
    import_coco_panoptic(&index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(id: u32, cat: u32, bbox: BBox) -> ObjectInstance {
        ObjectInstance {
            object_id: id,
            category_id: cat,
            bbox,
            mask: Mask::from_rect(8, 8, &bbox).unwrap(),
            confidence: ConfidenceMap::filled(bbox.w, bbox.h, 0.75).unwrap(),
            clip_score: Some(0.5),
            uncertainty: None,
        }
    }

    #[test]
    fn empty_export_has_empty_arrays() {
        let vocab = Vocabulary::default();
        let idx = export_coco_panoptic(&[], &vocab).unwrap();
        let v: serde_json::Value = serde_json::to_value(&idx).unwrap();
        assert_eq!(v["images"], serde_json::json!([]));
        assert_eq!(v["annotations"], serde_json::json!([]));
        assert_eq!(v["categories"], serde_json::json!([]));
    }

    #[test]
    fn one_image_two_objects() {
        let vocab = Vocabulary::from_train_names(&["dog", "cat"]).unwrap();
        let rec = ImageRecord {
            image_id: 1,
            width: 8,
            height: 8,
            source: Source::Synthetic,
            objects: vec![
                object(0, 0, BBox::new(0, 0, 2, 2).unwrap()),
                object(1, 1, BBox::new(4, 4, 3, 2).unwrap()),
            ],
            image_uri: "stub://images/x".into(),
            layout_id: Some("l".into()),
            clip_score: Some(0.5),
        };
        let idx = export_coco_panoptic(std::slice::from_ref(&rec), &vocab).unwrap();
        assert_eq!(idx.annotations.len(), 1);
        assert_eq!(idx.annotations[0].segments_info.len(), 2);
        assert_eq!(idx.annotations[0].segments_info[1].area, 6);
        let (back, v2) = import_coco_panoptic(&idx).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        assert_eq!(v2, vocab);

        let dup = vec![rec.clone(), rec];
        assert!(matches!(export_coco_panoptic(&dup, &vocab), Err(DatasetError::Export(_))));
    }

    #[test]
    fn write_read_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_train_names(&["dog"]).unwrap();
        let rec = ImageRecord {
            image_id: 9,
            width: 8,
            height: 8,
            source: Source::Real,
            objects: vec![object(0, 0, BBox::new(1, 1, 4, 4).unwrap())],
            image_uri: "file:///x.png".into(),
            layout_id: None,
            clip_score: None,
        };
        write_dataset(dir.path(), std::slice::from_ref(&rec), &vocab).unwrap();
        let (back, _) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, vec![rec]);
        let path = dir.path().join(INDEX_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replace("file:///x.png", "file:///y.png");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::ChecksumMismatch { .. })));
    }
}
