//! Uncompressed COCO-style run-length codec (row-major, first run counts zeros).

use serde::{Deserialize, Serialize};

use super::{DatasetError, Mask};

/// Row-major bit grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitGrid {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, DatasetError> {
        if bits.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(DatasetError::MalformedMask(format!(
                "grid has {} bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    /// Builds a grid from rows of 0/1 values.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self, DatasetError> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        if rows.iter().any(|r| r.len() as u32 != width) {
            return Err(DatasetError::MalformedMask("ragged rows".into()));
        }
        Self::new(width, height, rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect())
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }
}

/// Encodes a non-empty grid.
pub fn rle_encode(grid: &BitGrid) -> Result<Mask, DatasetError> {
    if grid.bits.is_empty() {
        return Err(DatasetError::MalformedMask("cannot encode an empty grid".into()));
    }
    let mut runs = Vec::new();
    let mut current = false;
    let mut count: u32 = 0;
    for &b in &grid.bits {
        if b != current {
            runs.push(count);
            count = 0;
            current = b;
        }
        count += 1;
    }
    runs.push(count);
    Mask::new(grid.width, grid.height, runs)
}

pub fn rle_decode(mask: &Mask) -> BitGrid {
    let mut bits = Vec::with_capacity(mask.width() as usize * mask.height() as usize);
    for (i, &r) in mask.runs().iter().enumerate() {
        bits.resize(bits.len() + r as usize, i % 2 == 1);
    }
    BitGrid {
        width: mask.width(),
        height: mask.height(),
        bits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_grid() {
        let g = BitGrid::zeros(2, 2);
        assert_eq!(rle_encode(&g).unwrap().runs(), &[4]);
    }

    #[test]
    fn checkerboard_diagonal() {
        let g = BitGrid::from_rows(&[&[0, 1], &[1, 0]]).unwrap();
        let m = rle_encode(&g).unwrap();
        assert_eq!(m.runs(), &[1, 2, 1]);
        assert_eq!(rle_decode(&m), g);
    }

    #[test]
    fn decode_all_ones_with_leading_empty_run() {
        let m = Mask::new(2, 2, vec![0, 4]).unwrap();
        assert!(rle_decode(&m).bits.iter().all(|&b| b));
        let m = Mask::new(2, 2, vec![4]).unwrap();
        assert!(rle_decode(&m).bits.iter().all(|&b| !b));
    }

    #[test]
    fn decode_then_reencode() {
        let m = Mask::new(2, 2, vec![1, 2, 1]).unwrap();
        let g = rle_decode(&m);
        assert_eq!(g, BitGrid::from_rows(&[&[0, 1], &[1, 0]]).unwrap());
        assert_eq!(rle_encode(&g).unwrap(), m);
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(rle_encode(&BitGrid::zeros(0, 3)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1u32..40, h in 1u32..40, seed in any::<u64>()) {
            let bits: Vec<bool> = (0..w * h)
                .map(|i| crate::hashing::mix64(seed ^ u64::from(i)).is_multiple_of(3))
                .collect();
            let g = BitGrid::new(w, h, bits).unwrap();
            let m = rle_encode(&g).unwrap();
            let back = rle_decode(&m);
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(back.get(x, y), g.get(x, y));
                    prop_assert_eq!(m.contains(x, y), g.get(x, y));
                }
            }
            prop_assert_eq!(m.area(), g.bits.iter().filter(|&&b| b).count() as u64);
            let spans: Vec<_> = m.row_spans().collect();
            prop_assert_eq!(Mask::from_row_spans(w, h, spans).unwrap(), m);
        }
    }
}
