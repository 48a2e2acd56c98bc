//! Real-image records for the training simulation.
//!
//! Without a real dataset on disk, a stub set is drawn: one to three
//! rectangular objects of training classes per image, with full-confidence
//! masks as ground truth would have.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BBox, ConfidenceMap, DatasetError, ImageRecord, Mask, ObjectInstance, Source, Vocabulary};
use crate::hashing::derive_seed;
use crate::scene::Canvas;

pub fn stub_real_dataset(vocab: &Vocabulary, count: usize, canvas: Canvas, seed: u64) -> Result<Vec<ImageRecord>, DatasetError> {
    let train: Vec<u32> = vocab.train().map(|c| c.id).collect();
    if train.is_empty() {
        return Err(DatasetError::InvalidVocabulary("no training categories".into()));
    }
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "real-image", i));
            let k = rng.random_range(1..=3u32);
            let objects = (0..k)
                .map(|object_id| {
                    let w = ((rng.random_range(0.08..0.3) * f64::from(canvas.width)) as u32).max(1);
                    let h = ((rng.random_range(0.08..0.3) * f64::from(canvas.height)) as u32).max(1);
                    let x = rng.random_range(0..=canvas.width - w);
                    let y = rng.random_range(0..=canvas.height - h);
                    let bbox = BBox::new(x, y, w, h)?;
                    Ok(ObjectInstance {
                        object_id,
                        category_id: train[rng.random_range(0..train.len())],
                        bbox,
                        mask: Mask::from_rect(canvas.width, canvas.height, &bbox)?,
                        confidence: ConfidenceMap::filled(w, h, 1.0)?,
                        clip_score: None,
                        uncertainty: None,
                    })
                })
                .collect::<Result<Vec<_>, DatasetError>>()?;
            Ok(ImageRecord {
                image_id: i,
                width: canvas.width,
                height: canvas.height,
                source: Source::Real,
                objects,
                image_uri: format!("stub://real/{i}"),
                layout_id: None,
                clip_score: None,
            })
        })
        .collect()
}

/// Rewrites category ids from `from` to the ids `to` uses for the same
/// (case-insensitive) names. Objects of unknown classes are dropped, as are
/// images left empty.
pub fn remap_categories(records: &[ImageRecord], from: &Vocabulary, to: &Vocabulary) -> Vec<ImageRecord> {
    let ids: BTreeMap<u32, u32> = from
        .categories()
        .iter()
        .filter_map(|c| to.by_name(&c.name).map(|t| (c.id, t.id)))
        .collect();
    records
        .iter()
        .filter_map(|r| {
            let objects: Vec<_> = r
                .objects
                .iter()
                .filter_map(|o| {
                    ids.get(&o.category_id).map(|id| ObjectInstance {
                        category_id: *id,
                        ..o.clone()
                    })
                })
                .collect();
            (!objects.is_empty()).then(|| ImageRecord { objects, ..r.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_real_records_are_valid_and_deterministic() {
        let vocab = Vocabulary::from_train_names(&["dog", "cat"]).unwrap();
        let a = stub_real_dataset(&vocab, 20, Canvas::default(), 3).unwrap();
        assert_eq!(a, stub_real_dataset(&vocab, 20, Canvas::default(), 3).unwrap());
        assert_ne!(a, stub_real_dataset(&vocab, 20, Canvas::default(), 4).unwrap());
        for r in &a {
            r.validate(&vocab).unwrap();
            assert!((1..=3).contains(&r.objects.len()));
            assert_eq!(r.source, Source::Real);
        }
    }

    #[test]
    fn remap_by_name() {
        let from = Vocabulary::from_train_names(&["cat", "dog", "emu"]).unwrap();
        let to = Vocabulary::from_train_names(&["Dog", "cat"]).unwrap();
        let real = stub_real_dataset(&from, 30, Canvas::default(), 1).unwrap();
        let mapped = remap_categories(&real, &from, &to);
        for r in &mapped {
            r.validate(&to).unwrap();
        }
        let dogs = |rs: &[ImageRecord], v: &Vocabulary| {
            let id = v.by_name("dog").unwrap().id;
            rs.iter().flat_map(|r| &r.objects).filter(|o| o.category_id == id).count()
        };
        assert_eq!(dogs(&real, &from), dogs(&mapped, &to));
    }
}
