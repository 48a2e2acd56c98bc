//! Curation pipeline engine for synthetic open-vocabulary segmentation data.
//!
//! The crate turns a training vocabulary into a filtered, annotated synthetic
//! dataset and provides the numeric core used to align synthetic object
//! features with class-wise prototypes of real features:
//!
//! * [`dataset`]: domain types, run-length masks and a COCO-panoptic style export.
//! * [`providers`]: pluggable LLM / layout-to-image / mask / scorer / embedding
//!   backends, with deterministic in-process stubs and a JSON-over-HTTP client.
//! * [`vocabulary`]: category name association with consensus voting and
//!   semantic deduplication.
//! * [`scene`]: layout planning, validation and largest-mask annotation.
//! * [`curation`]: the image-level score gate and class-wise uncertainty top-n.
//! * [`alignment`]: memory banks, prototypes, the alignment loss and its gradient.
//! * [`pipeline`]: the resumable orchestrator, training simulation and reports.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod alignment;
pub mod curation;
pub mod dataset;
pub mod exec;
pub mod hashing;
pub mod pipeline;
pub mod providers;
pub mod scene;
pub mod vocabulary;

pub use dataset::{BBox, Category, ConfidenceMap, ImageRecord, Mask, ObjectInstance, Origin, Vocabulary};
pub use exec::Execution;
