use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use dreamforge_core::curation::ObjectKey;
use dreamforge_core::dataset::{read_dataset, rle_decode, BBox};
use dreamforge_core::pipeline::report::{LOSS_CURVE_CSV, SUMMARY_JSON};
use dreamforge_core::pipeline::synth::{
    final_records, read_stage, AnnotateStage, ClipGateStage, ExportStage, LayoutsStage, UncertaintyGateStage,
};
use dreamforge_core::pipeline::{
    run_synthesis, run_synthesis_with, run_training, PipelineConfig, PipelineError, PipelineManifest, RunOptions,
    StageName, StageStatus, SynthesisOutcome, REPORTS_DIR,
};
use dreamforge_core::providers::{
    CropScorer, ImageHandle, PaintedImageStore, ProviderError, Providers, RetryPolicy,
};

const TRAIN: [&str; 5] = ["dog", "cat", "car", "chair", "bottle"];

fn small_config(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::new(3, dir, &TRAIN);
    c.layouts.count = 20;
    c.training.steps = 12;
    c.training.stub_real_images = 30;
    c
}

fn export(outcome: SynthesisOutcome) -> ExportStage {
    match outcome {
        SynthesisOutcome::Completed { export, .. } => export,
        other => panic!("expected a completed run, got {other:?}"),
    }
}

#[test]
fn stage_outputs_replay_against_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let exported = export(run_synthesis(&config, &RunOptions::default()).unwrap());
    let w = dir.path();

    let layouts: LayoutsStage = read_stage(w, StageName::Layouts).unwrap();
    assert!(!layouts.layouts.is_empty());
    assert_eq!(layouts.layouts.len() + layouts.failures.len(), 20);

    // Image gate: mean of crop scores, keep strictly above the id-ordered mean.
    let clip: ClipGateStage = read_stage(w, StageName::ClipGate).unwrap();
    let mut scored = clip.scored.clone();
    scored.sort_by_key(|s| s.image_id);
    for s in &scored {
        let mean = s.object_scores.iter().sum::<f64>() / s.object_scores.len() as f64;
        assert_eq!(s.score, mean);
    }
    let mut total = 0.0;
    for s in &scored {
        total += s.score;
    }
    let threshold = total / scored.len() as f64;
    let want: Vec<u64> = scored.iter().filter(|s| s.score > threshold).map(|s| s.image_id).collect();
    assert_eq!(clip.kept, want);

    // Annotation consumes exactly the kept images.
    let annotate: AnnotateStage = read_stage(w, StageName::Annotate).unwrap();
    let annotated: BTreeSet<u64> = annotate.records.iter().map(|r| r.image_id).collect();
    let failed: BTreeSet<u64> = annotate.failures.iter().map(|f| f.image_id).collect();
    let kept: BTreeSet<u64> = clip.kept.iter().copied().collect();
    assert!(annotated.is_subset(&kept));
    assert!(kept.difference(&annotated).all(|id| failed.contains(id)));

    // Uncertainty recomputed pixel by pixel, then the per-class cut.
    let gate: UncertaintyGateStage = read_stage(w, StageName::UncertaintyGate).unwrap();
    let recorded: BTreeMap<ObjectKey, f64> = gate.scores.iter().map(|s| (s.key, s.uncertainty)).collect();
    let mut by_class: BTreeMap<u32, Vec<(f64, ObjectKey)>> = BTreeMap::new();
    for r in &annotate.records {
        for o in &r.objects {
            let grid = rle_decode(&o.mask);
            let b: BBox = o.bbox;
            let (mut sum, mut n) = (0.0, 0u64);
            for y in 0..r.height {
                for x in 0..r.width {
                    if grid.get(x, y) {
                        sum += 1.0 - f64::from(o.confidence.get(x - b.x, y - b.y));
                        n += 1;
                    }
                }
            }
            let key = ObjectKey {
                image_id: r.image_id,
                object_id: o.object_id,
            };
            let u = sum / n as f64;
            assert!((recorded[&key] - u).abs() < 1e-12, "{key:?}");
            by_class.entry(o.category_id).or_default().push((u, key));
        }
    }
    let mut want: Vec<ObjectKey> = Vec::new();
    for members in by_class.values_mut() {
        members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        want.extend(members.iter().take(gate.per_class_cap).map(|m| m.1));
    }
    want.sort();
    let mut got = gate.kept.clone();
    got.sort();
    assert_eq!(got, want);

    // The exported dataset is exactly the doubly-filtered set.
    let (records, vocab) = read_dataset(&w.join("dataset")).unwrap();
    assert_eq!(records, final_records(&annotate, &gate));
    assert_eq!(records.iter().map(|r| r.objects.len()).sum::<usize>(), exported.objects);
    assert!(vocab.len() >= TRAIN.len());
}

#[test]
fn corrupted_stage_output_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let first = export(run_synthesis(&config, &RunOptions::default()).unwrap());
    let path = dir.path().join(StageName::Annotate.output_path());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b" ");
    std::fs::write(&path, bytes).unwrap();
    let resume = RunOptions {
        resume: true,
        stop_after: None,
    };
    let again = export(run_synthesis(&config, &resume).unwrap());
    assert_eq!(again.checksums, first.checksums);
    let m = PipelineManifest::load(dir.path()).unwrap().unwrap();
    assert!(StageName::ALL.iter().all(|s| m.is_done(*s)));

    // A tampered dataset file is caught on resume too.
    std::fs::write(dir.path().join("dataset/checksums.json"), b"{}").unwrap();
    let third = export(run_synthesis(&config, &resume).unwrap());
    assert_eq!(third.checksums, first.checksums);
}

#[test]
fn resume_with_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    run_synthesis(
        &config,
        &RunOptions {
            resume: false,
            stop_after: Some(StageName::Layouts),
        },
    )
    .unwrap();
    config.curation.target_objects = 7;
    let err = run_synthesis(
        &config,
        &RunOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    // Training knobs are not part of the synthesis identity.
    let mut config = small_config(dir.path());
    config.training.lambda = 0.1;
    assert!(run_synthesis(
        &config,
        &RunOptions {
            resume: true,
            stop_after: None
        }
    )
    .is_ok());
}

#[test]
fn report_mirrors_gate_reports_and_training_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    run_synthesis(&config, &RunOptions::default()).unwrap();
    let reports = dir.path().join(REPORTS_DIR);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(reports.join(SUMMARY_JSON)).unwrap()).unwrap();
    let clip: ClipGateStage = read_stage(dir.path(), StageName::ClipGate).unwrap();
    let gate: UncertaintyGateStage = read_stage(dir.path(), StageName::UncertaintyGate).unwrap();
    let gates = summary["gates"].as_array().unwrap();
    assert_eq!(gates.len(), 2);
    for (row, report) in gates.iter().zip([&clip.report, &gate.report]) {
        assert_eq!(row["kept"].as_u64().unwrap() as usize, report.kept);
        assert_eq!(row["dropped"].as_u64().unwrap() as usize, report.dropped);
        assert_eq!(row["keep_rate"].as_f64().unwrap(), report.kept as f64 / (report.kept + report.dropped) as f64);
    }
    assert!(summary.get("training").is_none());

    let trace = run_training(&config).unwrap();
    assert_eq!(trace.steps.len(), 12);
    let csv = std::fs::read_to_string(reports.join(LOSS_CURVE_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(reports.join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(summary["training"]["steps"], 12);
}

#[test]
fn training_without_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&small_config(dir.path())).unwrap_err();
    assert!(matches!(err, PipelineError::Data(_)), "{err}");
}

struct DownScorer;

impl CropScorer for DownScorer {
    fn score(&self, _: &ImageHandle, _: &BBox, _: &str) -> Result<f64, ProviderError> {
        Err(ProviderError::Retryable("HTTP 503".into()))
    }
}

#[test]
fn exhausted_provider_fails_stage_and_resume_recovers() {
    let reference = tempfile::tempdir().unwrap();
    let want = export(run_synthesis(&small_config(reference.path()), &RunOptions::default()).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.providers.retry = RetryPolicy::immediate(1);
    let store = Arc::new(PaintedImageStore::with_dir(dir.path().join("images")));
    let mut providers = Providers::stub(config.seed, store);
    providers.scorer = Arc::new(DownScorer);
    let err = run_synthesis_with(&config, &providers, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Provider(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    let m = PipelineManifest::load(dir.path()).unwrap().unwrap();
    assert_eq!(m.stage(StageName::Images).status, StageStatus::Done);
    assert_eq!(m.stage(StageName::ClipGate).status, StageStatus::Failed);
    assert!(m.stage(StageName::ClipGate).error.is_some());
    assert_eq!(m.stage(StageName::Annotate).status, StageStatus::Pending);

    let resumed = export(
        run_synthesis(
            &config,
            &RunOptions {
                resume: true,
                stop_after: None,
            },
        )
        .unwrap(),
    );
    assert_eq!(resumed.checksums, want.checksums);
}

#[test]
fn disabled_gates_keep_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.curation.clip_gate = false;
    config.curation.uncertainty_gate = false;
    run_synthesis(&config, &RunOptions::default()).unwrap();
    let clip: ClipGateStage = read_stage(dir.path(), StageName::ClipGate).unwrap();
    let images: BTreeSet<u64> = clip.scored.iter().map(|s| s.image_id).collect();
    assert_eq!(clip.kept.iter().copied().collect::<BTreeSet<_>>(), images);
    let annotate: AnnotateStage = read_stage(dir.path(), StageName::Annotate).unwrap();
    let gate: UncertaintyGateStage = read_stage(dir.path(), StageName::UncertaintyGate).unwrap();
    let objects: usize = annotate.records.iter().map(|r| r.objects.len()).sum();
    assert_eq!(gate.kept.len(), objects);
}
