//! End-to-end orchestration: resumable synthesis stages, the training
//! simulation and reporting.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::providers::{http::HttpProvider, stub, NoTagger, PaintedImageStore, ProviderKind, Providers};

pub mod config;
pub mod manifest;
pub mod real;
pub mod report;
pub mod synth;
pub mod train;

pub use config::PipelineConfig;
pub use manifest::{PipelineManifest, StageName, StageStatus};
pub use report::{emit_report, Report};
pub use synth::{run_synthesis, run_synthesis_with, RunOptions, SynthesisOutcome};
pub use train::{sample_batch, simulate_training, TrainingTrace};

/// Image store directory inside the work directory.
pub const IMAGES_DIR: &str = "images";
pub const STAGES_DIR: &str = "stages";
pub const DATASET_DIR: &str = "dataset";
pub const REPORTS_DIR: &str = "reports";
/// Sidecar with per-call wall-clock latencies, kept out of the manifest.
pub const CALL_LATENCY_FILE: &str = "provider_calls.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("degenerate data: {0}")]
    Data(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Provider(_) => 3,
            PipelineError::Data(_) | PipelineError::Manifest(_) => 4,
            PipelineError::Io { .. } => 1,
        }
    }
}

/// Builds the provider set: HTTP clients for configured endpoints, stubs for
/// the rest. Stub images live under `<workdir>/images`.
pub fn build_providers(config: &PipelineConfig) -> Result<Providers, PipelineError> {
    let store = Arc::new(PaintedImageStore::with_dir(config.workdir.join(IMAGES_DIR)));
    let mut p = Providers::stub(config.seed, store);
    for (kind, e) in &config.providers.endpoints {
        let client = Arc::new(HttpProvider::new(config.endpoint(*kind, e)).map_err(PipelineError::Config)?);
        match kind {
            ProviderKind::Llm => {
                p.llm = client;
                // The stub tagger only knows the stub vocabulary.
                p.tagger = Arc::new(NoTagger);
            }
            ProviderKind::Layout2image => p.images = client,
            ProviderKind::Maskgen => p.masks = client,
            ProviderKind::Scorer => p.scorer = client,
            ProviderKind::Embed => p.embedder = client,
        }
    }
    if !config.providers.endpoints.contains_key(&ProviderKind::Llm) {
        p.tagger = Arc::new(stub::StubTagger);
    }
    Ok(p)
}

/// Loads the synthetic dataset from the work directory, picks the real set
/// (from disk or stub), runs the simulation and writes the trace, the loss
/// curve and a refreshed report. A diverged run still writes its trace.
pub fn run_training(config: &PipelineConfig) -> Result<TrainingTrace, PipelineError> {
    let dataset_dir = config.workdir.join(DATASET_DIR);
    if !dataset_dir.join(crate::dataset::INDEX_FILE).exists() {
        return Err(PipelineError::Data(format!(
            "no synthetic dataset in {}; run `dreamforge synth` first",
            dataset_dir.display()
        )));
    }
    let (synth, vocab) = crate::dataset::read_dataset(&dataset_dir).map_err(|e| PipelineError::Data(e.to_string()))?;
    let real = match &config.training.real_dataset {
        Some(dir) => {
            let (records, real_vocab) = crate::dataset::read_dataset(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
            real::remap_categories(&records, &real_vocab, &vocab)
        }
        None => real::stub_real_dataset(
            &vocab,
            config.training.stub_real_images,
            config.layouts.canvas,
            crate::hashing::derive_seed(config.seed, "real", 0),
        )
        .map_err(|e| PipelineError::Data(e.to_string()))?,
    };
    let result = simulate_training(&real, &synth, &vocab, &config.training, config.seed, config.execution);
    let trace = match &result {
        Ok(t) => t,
        Err(train::TrainError::Diverged { trace, .. }) => trace.as_ref(),
        Err(_) => return result.map_err(PipelineError::from),
    };
    let reports = config.workdir.join(REPORTS_DIR);
    let json = serde_json::to_vec_pretty(trace).expect("trace serializes");
    manifest::write_atomic(&reports.join(report::TRAINING_TRACE_FILE), &json)?;
    emit_report(&config.workdir)?.write(&config.workdir)?;
    result.map_err(PipelineError::from)
}
