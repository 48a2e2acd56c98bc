//! Vector representation of stub-generated images.
//!
//! A stub image is a background colour plus solid rectangular patches in
//! paint order. Pixels are evaluated on demand, so a 1024x1024 canvas costs
//! a few bytes instead of three megabytes; [`PaintedImage::to_ppm`] renders
//! the raster when one is needed.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::ProviderError;
use crate::dataset::BBox;
use crate::hashing::{canonical_json, sha256_hex};

pub const STUB_IMAGE_SCHEME: &str = "stub://images/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub bbox: BBox,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaintedImage {
    pub width: u32,
    pub height: u32,
    pub background: [u8; 3],
    /// Later patches paint over earlier ones.
    pub patches: Vec<Patch>,
}

impl PaintedImage {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.patches
            .iter()
            .rev()
            .find(|p| p.bbox.contains(x, y))
            .map_or(self.background, |p| p.color)
    }

    /// Binary PPM (P6) raster.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.width as usize * self.height as usize * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                out.extend_from_slice(&self.pixel(x, y));
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&canonical_json(self))
    }

    pub fn uri(&self) -> String {
        format!("{STUB_IMAGE_SCHEME}{}", &self.content_hash()[..32])
    }
}

/// Content-addressed store for painted images, optionally backed by a
/// directory so that a resumed run can find images from an earlier process.
#[derive(Debug, Default)]
pub struct PaintedImageStore {
    dir: Option<PathBuf>,
    cache: RwLock<HashMap<String, Arc<PaintedImage>>>,
}

impl PaintedImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            cache: RwLock::default(),
        }
    }

    fn path_for(&self, uri: &str) -> Option<PathBuf> {
        let key = uri.strip_prefix(STUB_IMAGE_SCHEME)?;
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn put(&self, image: PaintedImage) -> Result<String, ProviderError> {
        let uri = image.uri();
        if let Some(path) = self.path_for(&uri) {
            if !path.exists() {
                let write = || -> std::io::Result<()> {
                    fs::create_dir_all(path.parent().expect("store path has a parent"))?;
                    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                    fs::write(&tmp, canonical_json(&image))?;
                    fs::rename(&tmp, &path)
                };
                write().map_err(|e| ProviderError::Rejected(format!("cannot persist {uri}: {e}")))?;
            }
        }
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(uri.clone(), Arc::new(image));
        Ok(uri)
    }

    pub fn get(&self, uri: &str) -> Result<Arc<PaintedImage>, ProviderError> {
        if let Some(img) = self.cache.read().expect("image cache poisoned").get(uri) {
            return Ok(img.clone());
        }
        let path = self
            .path_for(uri)
            .ok_or_else(|| ProviderError::Rejected(format!("unknown image {uri}")))?;
        let bytes = fs::read(&path).map_err(|e| ProviderError::Rejected(format!("unknown image {uri}: {e}")))?;
        let img: PaintedImage =
            serde_json::from_slice(&bytes).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        let img = Arc::new(img);
        self.cache
            .write()
            .expect("image cache poisoned")
            .insert(uri.to_string(), img.clone());
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> PaintedImage {
        PaintedImage {
            width: 4,
            height: 3,
            background: [1, 1, 1],
            patches: vec![
                Patch {
                    bbox: BBox::new(0, 0, 3, 3).unwrap(),
                    color: [200, 0, 0],
                },
                Patch {
                    bbox: BBox::new(1, 1, 1, 1).unwrap(),
                    color: [0, 200, 0],
                },
            ],
        }
    }

    #[test]
    fn later_patches_win() {
        let img = image();
        assert_eq!(img.pixel(0, 0), [200, 0, 0]);
        assert_eq!(img.pixel(1, 1), [0, 200, 0]);
        assert_eq!(img.pixel(3, 0), [1, 1, 1]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm.len(), 11 + 4 * 3 * 3);
    }

    #[test]
    fn store_survives_a_new_process() {
        let dir = tempfile::tempdir().unwrap();
        let uri = PaintedImageStore::with_dir(dir.path()).put(image()).unwrap();
        let fresh = PaintedImageStore::with_dir(dir.path());
        assert_eq!(*fresh.get(&uri).unwrap(), image());
        assert!(PaintedImageStore::in_memory().get(&uri).is_err());
    }
}
