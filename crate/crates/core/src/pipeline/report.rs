//! Run summaries: a JSON document, a markdown rendering and the loss curve
//! as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::SelectionReport;
use crate::dataset::Origin;
use crate::vocabulary::DropReason;

use super::manifest::{write_atomic, PipelineManifest, StageStatus};
use super::synth::{read_stage, ClipGateStage, ExportStage, UncertaintyGateStage, VocabularyStage};
use super::train::TrainingTrace;
use super::{PipelineError, StageName, REPORTS_DIR};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_MD: &str = "summary.md";
pub const TRAINING_TRACE_FILE: &str = "training_trace.json";
pub const LOSS_CURVE_CSV: &str = "loss_curve.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub name: StageName,
    pub status: StageStatus,
    pub items_in: usize,
    pub items_out: usize,
    pub provider_calls: usize,
    pub failed_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabularyRow {
    pub train: usize,
    pub candidates: usize,
    pub consensus: usize,
    pub novel: usize,
    pub dropped: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub gate: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub keep_rate: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub id: u32,
    pub name: String,
    pub origin: Origin,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub steps: usize,
    pub lambda: f64,
    pub first_distance: Option<f64>,
    pub final_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub stages: Vec<StageRow>,
    pub vocabulary: VocabularyRow,
    pub gates: Vec<GateRow>,
    pub classes: Vec<ClassRow>,
    pub dataset_images: usize,
    pub dataset_objects: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: ReportSummary,
    pub markdown: String,
    pub loss_csv: Option<String>,
}

impl Report {
    /// Writes the summary files under `<workdir>/reports`.
    pub fn write(&self, workdir: &Path) -> Result<(), PipelineError> {
        let dir = workdir.join(REPORTS_DIR);
        let json = serde_json::to_vec_pretty(&self.summary).expect("summary serializes");
        write_atomic(&dir.join(SUMMARY_JSON), &json)?;
        write_atomic(&dir.join(SUMMARY_MD), self.markdown.as_bytes())?;
        if let Some(csv) = &self.loss_csv {
            write_atomic(&dir.join(LOSS_CURVE_CSV), csv.as_bytes())?;
        }
        Ok(())
    }
}

fn gate_row(gate: &str, r: &SelectionReport) -> GateRow {
    GateRow {
        gate: gate.into(),
        input: r.input(),
        kept: r.kept,
        dropped: r.dropped,
        keep_rate: r.keep_rate(),
        threshold: r.threshold,
    }
}

fn drop_key(r: &DropReason) -> &'static str {
    match r {
        DropReason::ExactMatch { .. } => "exact_match",
        DropReason::NonNoun => "non_noun",
        DropReason::SimilarToTrain { .. } => "similar_to_train",
        DropReason::SimilarToNovel { .. } => "similar_to_novel",
        DropReason::EmbeddingFailed { .. } => "embedding_failed",
    }
}

/// Summarizes whatever a work directory holds. Stages that have not
/// finished contribute zeros.
pub fn emit_report(workdir: &Path) -> Result<Report, PipelineError> {
    let manifest = PipelineManifest::load(workdir)?.unwrap_or_else(|| PipelineManifest::new(String::new(), 0));
    let done = |s: StageName| manifest.is_done(s);

    let stages = manifest
        .stages
        .iter()
        .map(|s| StageRow {
            name: s.name,
            status: s.status,
            items_in: s.items_in,
            items_out: s.items_out,
            provider_calls: s.provider_calls,
            failed_calls: s.failed_calls,
        })
        .collect();

    let vocab_stage: Option<VocabularyStage> = if done(StageName::Vocabulary) {
        Some(read_stage(workdir, StageName::Vocabulary)?)
    } else {
        None
    };
    let mut vocabulary = VocabularyRow::default();
    if let Some(v) = &vocab_stage {
        vocabulary.train = v.dedup.vocabulary.train().count();
        vocabulary.candidates = v.expansion.candidates.len();
        vocabulary.consensus = v.consensus.len();
        vocabulary.novel = v.dedup.accepted.len();
        for d in &v.dedup.dropped {
            *vocabulary.dropped.entry(drop_key(&d.reason).to_string()).or_insert(0) += 1;
        }
    }

    let mut gates = Vec::new();
    if done(StageName::ClipGate) {
        let clip: ClipGateStage = read_stage(workdir, StageName::ClipGate)?;
        gates.push(gate_row("image_score", &clip.report));
    }
    let mut per_class = BTreeMap::new();
    if done(StageName::UncertaintyGate) {
        let gate: UncertaintyGateStage = read_stage(workdir, StageName::UncertaintyGate)?;
        gates.push(gate_row("uncertainty", &gate.report));
        per_class = gate.report.per_class_kept.clone();
    }
    let classes = vocab_stage
        .as_ref()
        .map(|v| {
            v.dedup
                .vocabulary
                .categories()
                .iter()
                .map(|c| ClassRow {
                    id: c.id,
                    name: c.name.clone(),
                    origin: c.origin,
                    objects: per_class.get(&c.id).copied().unwrap_or(0),
                })
                .collect()
        })
        .unwrap_or_default();

    let (dataset_images, dataset_objects) = if done(StageName::Export) {
        let e: ExportStage = read_stage(workdir, StageName::Export)?;
        (e.images, e.objects)
    } else {
        (0, 0)
    };

    let trace_path = workdir.join(REPORTS_DIR).join(TRAINING_TRACE_FILE);
    let trace: Option<TrainingTrace> = match std::fs::read(&trace_path) {
        Ok(bytes) => Some(
            serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", trace_path.display())))?,
        ),
        Err(_) => None,
    };
    let training = trace.as_ref().map(|t| TrainingRow {
        steps: t.steps.len(),
        lambda: t.lambda,
        first_distance: t.first_distance(),
        final_distance: t.final_distance(),
    });

    let summary = ReportSummary {
        stages,
        vocabulary,
        gates,
        classes,
        dataset_images,
        dataset_objects,
        training,
    };
    let markdown = render_markdown(&summary);
    Ok(Report {
        summary,
        markdown,
        loss_csv: trace.map(|t| t.to_csv()),
    })
}

fn render_markdown(s: &ReportSummary) -> String {
    let mut md = String::from("# Synthesis report\n\n## Stages\n\n| stage | status | in | out | calls | failed calls |\n|---|---|---|---|---|---|\n");
    for r in &s.stages {
        let _ = writeln!(
            md,
            "| {} | {:?} | {} | {} | {} | {} |",
            r.name, r.status, r.items_in, r.items_out, r.provider_calls, r.failed_calls
        );
    }
    let v = &s.vocabulary;
    let _ = write!(
        md,
        "\n## Vocabulary\n\n| train | candidates | consensus | novel | final |\n|---|---|---|---|---|\n| {} | {} | {} | {} | {} |\n",
        v.train,
        v.candidates,
        v.consensus,
        v.novel,
        v.train + v.novel
    );
    if !v.dropped.is_empty() {
        md.push_str("\nDropped candidates:\n\n");
        for (k, n) in &v.dropped {
            let _ = writeln!(md, "- {k}: {n}");
        }
    }
    md.push_str("\n## Gates\n\n| gate | input | kept | dropped | keep rate | threshold |\n|---|---|---|---|---|---|\n");
    for g in &s.gates {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.4} | {:.4} |",
            g.gate, g.input, g.kept, g.dropped, g.keep_rate, g.threshold
        );
    }
    let _ = write!(
        md,
        "\n## Dataset\n\n{} images, {} objects.\n\n| id | class | origin | objects |\n|---|---|---|---|\n",
        s.dataset_images, s.dataset_objects
    );
    for c in &s.classes {
        let _ = writeln!(md, "| {} | {} | {:?} | {} |", c.id, c.name, c.origin, c.objects);
    }
    if let Some(t) = &s.training {
        let fmt = |d: Option<f64>| d.map(|d| format!("{d:.6}")).unwrap_or_else(|| "n/a".into());
        let _ = write!(
            md,
            "\n## Training simulation\n\n{} steps at lambda {}; cosine distance {} -> {}.\n",
            t.steps,
            t.lambda,
            fmt(t.first_distance),
            fmt(t.final_distance)
        );
    }
    md
}
