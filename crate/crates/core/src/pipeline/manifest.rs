//! Run manifest: stage status, output checksums and provenance.
//!
//! The event history only grows. A stage that is done keeps its checksum;
//! marking it done again with different output is refused.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "dreamforge-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Vocabulary,
    Layouts,
    Images,
    ClipGate,
    Annotate,
    UncertaintyGate,
    Export,
}

impl StageName {
    /// Execution order.
    pub const ALL: [StageName; 7] = [
        StageName::Vocabulary,
        StageName::Layouts,
        StageName::Images,
        StageName::ClipGate,
        StageName::Annotate,
        StageName::UncertaintyGate,
        StageName::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Vocabulary => "vocabulary",
            StageName::Layouts => "layouts",
            StageName::Images => "images",
            StageName::ClipGate => "clip_gate",
            StageName::Annotate => "annotate",
            StageName::UncertaintyGate => "uncertainty_gate",
            StageName::Export => "export",
        }
    }

    /// Stage output path relative to the work directory.
    pub fn output_path(self) -> String {
        format!("stages/{}.json", self.as_str())
    }
}

impl std::str::FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// Where one output item came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemProvenance {
    pub item: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: StageName,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    /// SHA-256 of the output file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    pub items_in: usize,
    pub items_out: usize,
    pub provider_calls: usize,
    pub failed_calls: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<ItemProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageEntry {
    fn pending(name: StageName) -> Self {
        Self {
            name,
            status: StageStatus::Pending,
            output: None,
            checksum: None,
            items_in: 0,
            items_out: 0,
            provider_calls: 0,
            failed_calls: 0,
            provenance: Vec::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub stage: StageName,
    pub status: StageStatus,
}

/// Summary of a finished stage, recorded by [`PipelineManifest::complete`].
#[derive(Debug, Clone, Default)]
pub struct StageSummary {
    pub items_in: usize,
    pub items_out: usize,
    pub provider_calls: usize,
    pub failed_calls: usize,
    pub provenance: Vec<ItemProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
    pub events: Vec<ManifestEvent>,
}

impl PipelineManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config_hash,
            seed,
            stages: StageName::ALL.into_iter().map(StageEntry::pending).collect(),
            events: Vec::new(),
        }
    }

    pub fn stage(&self, name: StageName) -> &StageEntry {
        self.stages.iter().find(|s| s.name == name).expect("every stage has an entry")
    }

    fn stage_mut(&mut self, name: StageName) -> &mut StageEntry {
        self.stages.iter_mut().find(|s| s.name == name).expect("every stage has an entry")
    }

    pub fn is_done(&self, name: StageName) -> bool {
        self.stage(name).status == StageStatus::Done
    }

    fn push(&mut self, stage: StageName, status: StageStatus) {
        self.events.push(ManifestEvent { stage, status });
    }

    pub fn start(&mut self, name: StageName) -> Result<(), PipelineError> {
        let entry = self.stage_mut(name);
        if entry.status == StageStatus::Done {
            return Err(PipelineError::Manifest(format!("stage {name} is already done")));
        }
        *entry = StageEntry::pending(name);
        entry.status = StageStatus::Running;
        self.push(name, StageStatus::Running);
        Ok(())
    }

    pub fn complete(&mut self, name: StageName, checksum: String, summary: StageSummary) -> Result<(), PipelineError> {
        let entry = self.stage_mut(name);
        if entry.status != StageStatus::Running {
            return Err(PipelineError::Manifest(format!("stage {name} completed without starting")));
        }
        entry.status = StageStatus::Done;
        entry.output = Some(name.output_path());
        entry.checksum = Some(checksum);
        entry.items_in = summary.items_in;
        entry.items_out = summary.items_out;
        entry.provider_calls = summary.provider_calls;
        entry.failed_calls = summary.failed_calls;
        entry.provenance = summary.provenance;
        self.push(name, StageStatus::Done);
        Ok(())
    }

    pub fn fail(&mut self, name: StageName, error: String) {
        let entry = self.stage_mut(name);
        entry.status = StageStatus::Failed;
        entry.error = Some(error);
        self.push(name, StageStatus::Failed);
    }

    /// Returns a done stage to pending so it can be recomputed, e.g. after its
    /// output went missing. Recorded in the history.
    pub fn invalidate(&mut self, name: StageName) {
        if self.stage(name).status != StageStatus::Pending {
            *self.stage_mut(name) = StageEntry::pending(name);
            self.push(name, StageStatus::Pending);
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let m: PipelineManifest = serde_json::from_slice(&bytes)
                    .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
                if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
                    return Err(PipelineError::Manifest(format!(
                        "unsupported manifest {} v{}",
                        m.format, m.version
                    )));
                }
                Ok(Some(m))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }
}

/// Writes through a temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn file_checksum(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_appends_events() {
        let mut m = PipelineManifest::new("h".into(), 7);
        assert!(m.stages.iter().all(|s| s.status == StageStatus::Pending));
        m.start(StageName::Vocabulary).unwrap();
        m.complete(StageName::Vocabulary, "abc".into(), StageSummary::default()).unwrap();
        assert!(m.is_done(StageName::Vocabulary));
        assert!(m.start(StageName::Vocabulary).is_err());
        assert!(m.complete(StageName::Layouts, "x".into(), StageSummary::default()).is_err());
        m.start(StageName::Layouts).unwrap();
        m.fail(StageName::Layouts, "boom".into());
        assert_eq!(m.events.len(), 4);
        assert_eq!(m.stage(StageName::Layouts).error.as_deref(), Some("boom"));
        m.start(StageName::Layouts).unwrap();
        assert_eq!(m.stage(StageName::Layouts).error, None);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        assert!(PipelineManifest::load(dir.path()).unwrap().is_none());
        let m = PipelineManifest::new("h".into(), 1);
        m.save(dir.path()).unwrap();
        assert_eq!(PipelineManifest::load(dir.path()).unwrap(), Some(m));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        assert!(PipelineManifest::load(dir.path()).is_err());
    }

    #[test]
    fn stage_names_parse() {
        for s in StageName::ALL {
            assert_eq!(s.as_str().parse::<StageName>().unwrap(), s);
        }
        assert!("nope".parse::<StageName>().is_err());
    }
}
