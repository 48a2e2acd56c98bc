//! Synthetic-real alignment numerics.
//!
//! Each training class owns a bounded queue of real-object features. Its
//! elementwise mean is the class prototype, and a synthetic feature of the
//! same class is pulled towards it by the loss `1 - cos(f_s, prototype)`.
//!
//! Eviction is by enqueue order: the newest feature goes to the back and the
//! oldest is dropped once the bank exceeds its capacity. Reads never reorder
//! entries. Prototypes are detached, so gradients never flow into a bank.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("memory bank for class {class_id} is empty; no prototype")]
    EmptyBank { class_id: u32 },
    #[error("zero-norm vector; cosine is undefined")]
    ZeroNorm,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec {
    pub values: Vec<f64>,
    pub class_id: u32,
    pub source: FeatureSource,
}

impl FeatureVec {
    pub fn new(values: Vec<f64>, class_id: u32, source: FeatureSource) -> Result<Self, AlignmentError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AlignmentError::ContractViolation("feature has non-finite entries".into()));
        }
        Ok(Self {
            values,
            class_id,
            source,
        })
    }

    pub fn real(values: Vec<f64>, class_id: u32) -> Result<Self, AlignmentError> {
        Self::new(values, class_id, FeatureSource::Real)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    class_id: u32,
    capacity: usize,
    entries: VecDeque<FeatureVec>,
    /// Total features ever enqueued.
    enqueued: u64,
}

impl MemoryBank {
    pub fn new(class_id: u32, capacity: usize) -> Result<Self, AlignmentError> {
        if capacity == 0 {
            return Err(AlignmentError::InvalidParameter("bank capacity must be >= 1".into()));
        }
        Ok(Self {
            class_id,
            capacity,
            entries: VecDeque::with_capacity(capacity),
            enqueued: 0,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &FeatureVec> {
        self.entries.iter()
    }

    /// Enqueues a real feature of this class, returning the evicted entry.
    pub fn update(&mut self, f: FeatureVec) -> Result<Option<FeatureVec>, AlignmentError> {
        if f.source != FeatureSource::Real {
            return Err(AlignmentError::ContractViolation("memory banks only accept real features".into()));
        }
        if f.class_id != self.class_id {
            return Err(AlignmentError::ContractViolation(format!(
                "feature of class {} pushed to bank {}",
                f.class_id, self.class_id
            )));
        }
        if let Some(first) = self.entries.front() {
            if first.len() != f.len() {
                return Err(AlignmentError::LengthMismatch {
                    expected: first.len(),
                    got: f.len(),
                });
            }
        }
        self.entries.push_back(f);
        self.enqueued += 1;
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }

    /// Elementwise mean of the entries.
    pub fn prototype(&self) -> Result<FeatureVec, AlignmentError> {
        let first = self.entries.front().ok_or(AlignmentError::EmptyBank { class_id: self.class_id })?;
        let mut acc = vec![0.0; first.len()];
        for e in &self.entries {
            acc.iter_mut().zip(&e.values).for_each(|(a, v)| *a += v);
        }
        let n = self.entries.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        FeatureVec::new(acc, self.class_id, FeatureSource::Real)
    }
}

/// One bank per class, created on first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BanksSnapshot", into = "BanksSnapshot")]
pub struct MemoryBanks {
    capacity: usize,
    feature_len: usize,
    banks: BTreeMap<u32, MemoryBank>,
}

#[derive(Serialize, Deserialize)]
struct BanksSnapshot {
    capacity: usize,
    feature_len: usize,
    banks: Vec<MemoryBank>,
}

impl From<MemoryBanks> for BanksSnapshot {
    fn from(b: MemoryBanks) -> Self {
        Self {
            capacity: b.capacity,
            feature_len: b.feature_len,
            banks: b.banks.into_values().collect(),
        }
    }
}

impl TryFrom<BanksSnapshot> for MemoryBanks {
    type Error = AlignmentError;

    fn try_from(s: BanksSnapshot) -> Result<Self, Self::Error> {
        let mut out = MemoryBanks::new(s.capacity, s.feature_len)?;
        for bank in s.banks {
            if bank.capacity != s.capacity || bank.entries.len() > bank.capacity {
                return Err(AlignmentError::ContractViolation(format!("bank {} exceeds capacity", bank.class_id)));
            }
            for e in &bank.entries {
                if e.source != FeatureSource::Real || e.class_id != bank.class_id || e.len() != s.feature_len {
                    return Err(AlignmentError::ContractViolation(format!("bank {} has a foreign entry", bank.class_id)));
                }
                if e.values.iter().any(|v| !v.is_finite()) {
                    return Err(AlignmentError::ContractViolation("non-finite entry".into()));
                }
            }
            out.banks.insert(bank.class_id, bank);
        }
        Ok(out)
    }
}

impl MemoryBanks {
    pub fn new(capacity: usize, feature_len: usize) -> Result<Self, AlignmentError> {
        if capacity == 0 || feature_len == 0 {
            return Err(AlignmentError::InvalidParameter("capacity and feature length must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            feature_len,
            banks: BTreeMap::new(),
        })
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn update(&mut self, f: FeatureVec) -> Result<Option<FeatureVec>, AlignmentError> {
        if f.len() != self.feature_len {
            return Err(AlignmentError::LengthMismatch {
                expected: self.feature_len,
                got: f.len(),
            });
        }
        let bank = match self.banks.entry(f.class_id) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(MemoryBank::new(f.class_id, self.capacity)?),
        };
        bank.update(f)
    }

    pub fn get(&self, class_id: u32) -> Option<&MemoryBank> {
        self.banks.get(&class_id)
    }

    pub fn prototype(&self, class_id: u32) -> Result<FeatureVec, AlignmentError> {
        self.banks
            .get(&class_id)
            .ok_or(AlignmentError::EmptyBank { class_id })?
            .prototype()
    }

    /// Prototypes of every non-empty bank.
    pub fn prototypes(&self) -> BTreeMap<u32, FeatureVec> {
        self.banks
            .iter()
            .filter_map(|(c, b)| b.prototype().ok().map(|p| (*c, p)))
            .collect()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.banks.keys().copied()
    }
}

fn norms(f_s: &[f64], proto: &[f64]) -> Result<(f64, f64, f64), AlignmentError> {
    if f_s.len() != proto.len() {
        return Err(AlignmentError::LengthMismatch {
            expected: proto.len(),
            got: f_s.len(),
        });
    }
    let dot: f64 = f_s.iter().zip(proto).map(|(a, b)| a * b).sum();
    let nf = f_s.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nm = proto.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(dot.is_finite() && nf.is_finite() && nm.is_finite()) {
        return Err(AlignmentError::ContractViolation("non-finite feature norm".into()));
    }
    if !(nf > 0.0 && nm > 0.0) {
        return Err(AlignmentError::ZeroNorm);
    }
    Ok((dot, nf, nm))
}

/// `1 - cos(f_s, proto)`, in `[0, 2]`.
pub fn sra_loss(f_s: &[f64], proto: &[f64]) -> Result<f64, AlignmentError> {
    let (dot, nf, nm) = norms(f_s, proto)?;
    Ok((1.0 - dot / (nf * nm)).clamp(0.0, 2.0))
}

/// Gradient of [`sra_loss`] with respect to `f_s`, with `proto` held constant:
/// `-(m / (|f| |m|) - cos(f, m) f / |f|^2)`.
pub fn sra_grad(f_s: &[f64], proto: &[f64]) -> Result<Vec<f64>, AlignmentError> {
    let (dot, nf, nm) = norms(f_s, proto)?;
    let cos = dot / (nf * nm);
    let a = 1.0 / (nf * nm);
    let b = cos / (nf * nf);
    Ok(f_s.iter().zip(proto).map(|(f, m)| b * f - a * m).collect())
}

/// `l_seg + lambda * l_sra`. `lambda` must be non-negative.
pub fn total_loss(l_seg: f64, l_sra: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0, "lambda must be non-negative");
    l_seg + lambda * l_sra
}
