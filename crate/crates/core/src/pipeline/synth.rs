//! Synthesis stages, run in this order: vocabulary expansion, layout
//! planning, image generation, the image score gate, mask annotation, the
//! uncertainty gate, export.
//!
//! Each stage writes `stages/<name>.json` and records its SHA-256 in the
//! manifest. A resumed run skips done stages whose output still matches,
//! and recomputes everything from the first stage that does not.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::curation::{
    object_uncertainty, score_image, select_by_clip_score, select_top_n_per_class, AuditEntry, ImageScore,
    ObjectKey, ObjectScore, ScoreError, SelectionReport, Stage,
};
use crate::dataset::{write_dataset, DatasetChecksums, ImageRecord, Source, Vocabulary};
use crate::exec::Execution;
use crate::hashing::{checksum, derive_seed, sha256_hex};
use crate::providers::{invoke, CallLog, CallOutcome, CallRecord, ImageHandle, ProviderError, ProviderKind, Providers, RegionStat, RetryPolicy};
use crate::scene::{annotate_objects, plan_layout, validate_layout, Layout, PlanError};
use crate::vocabulary::{consensus_filter, expand_vocabulary, semantic_dedup, CnaError, DedupOutcome, Expansion};

use super::manifest::{file_checksum, write_atomic, ItemProvenance, StageSummary};
use super::{
    build_providers, PipelineConfig, PipelineError, PipelineManifest, StageName, CALL_LATENCY_FILE, DATASET_DIR,
    STAGES_DIR,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the manifest in the work directory.
    pub resume: bool,
    /// Stop cleanly after this stage, as if the process had been killed.
    pub stop_after: Option<StageName>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthesisOutcome {
    Completed {
        manifest: PipelineManifest,
        export: ExportStage,
    },
    Stopped {
        manifest: PipelineManifest,
        after: StageName,
    },
}

impl SynthesisOutcome {
    pub fn manifest(&self) -> &PipelineManifest {
        match self {
            SynthesisOutcome::Completed { manifest, .. } | SynthesisOutcome::Stopped { manifest, .. } => manifest,
        }
    }
}

/// A sample that was skipped, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    pub reason: String,
}

impl ItemFailure {
    fn image(image_id: u64, reason: impl Into<String>) -> Self {
        Self {
            image_id,
            object_id: None,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyStage {
    pub expansion: Expansion,
    /// Names that met the consensus threshold.
    pub consensus: Vec<String>,
    pub dedup: DedupOutcome,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedLayout {
    /// Layout index; also the image id of everything derived from it.
    pub image_id: u64,
    pub seed: u64,
    pub class_ids: Vec<u32>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutsStage {
    pub layouts: Vec<PlannedLayout>,
    pub failures: Vec<ItemFailure>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub image_id: u64,
    pub seed: u64,
    pub layout_id: String,
    pub image: ImageHandle,
    pub regions: Vec<RegionStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesStage {
    pub images: Vec<GeneratedEntry>,
    pub failures: Vec<ItemFailure>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: u64,
    pub score: f64,
    /// Per layout item, in item order.
    pub object_scores: Vec<f64>,
    pub category_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipGateStage {
    pub enabled: bool,
    pub scored: Vec<ScoredImage>,
    pub failures: Vec<ItemFailure>,
    pub report: SelectionReport,
    pub kept: Vec<u64>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateStage {
    /// Annotated images of the kept set, ascending by id.
    pub records: Vec<ImageRecord>,
    pub failures: Vec<ItemFailure>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGateStage {
    pub enabled: bool,
    pub per_class_cap: usize,
    pub scores: Vec<ObjectScore>,
    pub failures: Vec<ItemFailure>,
    pub report: SelectionReport,
    pub kept: Vec<ObjectKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStage {
    pub images: usize,
    pub objects: usize,
    pub checksums: DatasetChecksums,
}

/// Runs synthesis with providers built from the config.
pub fn run_synthesis(config: &PipelineConfig, opts: &RunOptions) -> Result<SynthesisOutcome, PipelineError> {
    let providers = build_providers(config)?;
    run_synthesis_with(config, &providers, opts)
}

struct Ctx<'a> {
    config: &'a PipelineConfig,
    providers: &'a Providers,
    policy: RetryPolicy,
    exec: Execution,
}

#[derive(Default)]
struct State {
    vocabulary: Option<VocabularyStage>,
    layouts: Option<LayoutsStage>,
    images: Option<ImagesStage>,
    clip: Option<ClipGateStage>,
    annotate: Option<AnnotateStage>,
    uncertainty: Option<UncertaintyGateStage>,
    export: Option<ExportStage>,
}

pub fn run_synthesis_with(
    config: &PipelineConfig,
    providers: &Providers,
    opts: &RunOptions,
) -> Result<SynthesisOutcome, PipelineError> {
    config.validate()?;
    let dir = config.workdir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let hash = config.synthesis_hash();

    let mut manifest = match (opts.resume, PipelineManifest::load(dir)?) {
        (true, Some(m)) => {
            if m.config_hash != hash {
                return Err(PipelineError::Config(
                    "config changed since the manifest was written; rerun without --resume".into(),
                ));
            }
            m
        }
        (resume, _) => {
            if resume {
                log::info!("no manifest in {}; starting a fresh run", dir.display());
            }
            for sub in [STAGES_DIR, DATASET_DIR] {
                let p = dir.join(sub);
                if p.exists() {
                    std::fs::remove_dir_all(&p).map_err(|e| PipelineError::io(&p, e))?;
                }
            }
            let _ = std::fs::remove_file(dir.join(CALL_LATENCY_FILE));
            PipelineManifest::new(hash, config.seed)
        }
    };
    manifest.save(dir)?;

    let ctx = Ctx {
        config,
        providers,
        policy: config.providers.retry,
        exec: config.execution,
    };
    let mut state = State::default();
    let mut recompute = false;

    for stage in StageName::ALL {
        if !recompute && manifest.is_done(stage) {
            match reuse_stage(dir, &manifest, stage, &mut state) {
                Ok(()) => {
                    log::info!("stage {stage}: reusing checksummed output");
                    continue;
                }
                Err(reason) => {
                    log::warn!("stage {stage}: {reason}; recomputing");
                }
            }
        }
        if !recompute {
            for later in StageName::ALL.into_iter().filter(|s| *s >= stage) {
                manifest.invalidate(later);
            }
            recompute = true;
        }
        manifest.start(stage)?;
        manifest.save(dir)?;
        log::info!("stage {stage}: running");
        match run_stage(&ctx, stage, &mut state) {
            Ok((bytes, summary, latencies)) => {
                let path = dir.join(stage.output_path());
                write_atomic(&path, &bytes)?;
                append_latencies(dir, stage, &latencies)?;
                manifest.complete(stage, sha256_hex(&bytes), summary)?;
                manifest.save(dir)?;
            }
            Err(e) => {
                manifest.fail(stage, e.to_string());
                manifest.save(dir)?;
                return Err(e);
            }
        }
        if opts.stop_after == Some(stage) && stage != StageName::Export {
            return Ok(SynthesisOutcome::Stopped { manifest, after: stage });
        }
    }
    super::report::emit_report(dir)?.write(dir)?;
    let export = state.export.expect("export stage ran or was reused");
    Ok(SynthesisOutcome::Completed { manifest, export })
}

fn load_json<T: DeserializeOwned>(dir: &Path, stage: StageName) -> Result<T, String> {
    let path = dir.join(stage.output_path());
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn reuse_stage(dir: &Path, manifest: &PipelineManifest, stage: StageName, state: &mut State) -> Result<(), String> {
    let expected = manifest.stage(stage).checksum.clone().ok_or("no checksum recorded")?;
    let found = file_checksum(&dir.join(stage.output_path())).map_err(|e| e.to_string())?;
    if found != expected {
        return Err(format!("output checksum {found} does not match manifest {expected}"));
    }
    match stage {
        StageName::Vocabulary => state.vocabulary = Some(load_json(dir, stage)?),
        StageName::Layouts => state.layouts = Some(load_json(dir, stage)?),
        StageName::Images => state.images = Some(load_json(dir, stage)?),
        StageName::ClipGate => state.clip = Some(load_json(dir, stage)?),
        StageName::Annotate => state.annotate = Some(load_json(dir, stage)?),
        StageName::UncertaintyGate => state.uncertainty = Some(load_json(dir, stage)?),
        StageName::Export => {
            let export: ExportStage = load_json(dir, stage)?;
            for (file, sum) in &export.checksums.files {
                let found = file_checksum(&dir.join(DATASET_DIR).join(file)).map_err(|e| e.to_string())?;
                if &found != sum {
                    return Err(format!("dataset file {file} changed"));
                }
            }
            state.export = Some(export);
        }
    }
    Ok(())
}

fn append_latencies(dir: &Path, stage: StageName, log: &CallLog) -> Result<(), PipelineError> {
    if log.latencies.is_empty() {
        return Ok(());
    }
    let path = dir.join(CALL_LATENCY_FILE);
    let mut out = String::new();
    for l in &log.latencies {
        let line = serde_json::json!({
            "stage": stage,
            "kind": l.kind,
            "request_hash": l.request_hash,
            "latency_us": l.latency_us,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| PipelineError::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| PipelineError::io(&path, e))
}

type StageResult = Result<(Vec<u8>, StageSummary, CallLog), PipelineError>;

fn run_stage(ctx: &Ctx, stage: StageName, state: &mut State) -> StageResult {
    fn finish<T: Serialize>(out: &T, summary: StageSummary, log: CallLog) -> StageResult {
        let bytes = serde_json::to_vec_pretty(out).expect("stage output serializes");
        Ok((bytes, summary, log))
    }
    fn calls_summary(summary: &mut StageSummary, calls: &[CallRecord]) {
        summary.provider_calls = calls.len();
        summary.failed_calls = calls.iter().filter(|c| c.outcome != CallOutcome::Ok).count();
    }
    match stage {
        StageName::Vocabulary => {
            let (out, mut summary, log) = vocabulary_stage(ctx)?;
            calls_summary(&mut summary, &out.calls);
            let r = finish(&out, summary, log);
            state.vocabulary = Some(out);
            r
        }
        StageName::Layouts => {
            let vocab = &state.vocabulary.as_ref().expect("vocabulary before layouts").dedup.vocabulary;
            let (out, mut summary, log) = layouts_stage(ctx, vocab)?;
            calls_summary(&mut summary, &out.calls);
            let r = finish(&out, summary, log);
            state.layouts = Some(out);
            r
        }
        StageName::Images => {
            let layouts = state.layouts.as_ref().expect("layouts before images");
            let (out, mut summary, log) = images_stage(ctx, layouts)?;
            calls_summary(&mut summary, &out.calls);
            let r = finish(&out, summary, log);
            state.images = Some(out);
            r
        }
        StageName::ClipGate => {
            let vocab = &state.vocabulary.as_ref().expect("vocabulary before gate").dedup.vocabulary;
            let layouts = state.layouts.as_ref().expect("layouts before gate");
            let images = state.images.as_ref().expect("images before gate");
            let (out, mut summary, log) = clip_stage(ctx, vocab, layouts, images)?;
            calls_summary(&mut summary, &out.calls);
            let r = finish(&out, summary, log);
            state.clip = Some(out);
            r
        }
        StageName::Annotate => {
            let vocab = &state.vocabulary.as_ref().expect("vocabulary before annotation").dedup.vocabulary;
            let layouts = state.layouts.as_ref().expect("layouts before annotation");
            let images = state.images.as_ref().expect("images before annotation");
            let clip = state.clip.as_ref().expect("gate before annotation");
            let (out, mut summary, log) = annotate_stage(ctx, vocab, layouts, images, clip)?;
            calls_summary(&mut summary, &out.calls);
            let r = finish(&out, summary, log);
            state.annotate = Some(out);
            r
        }
        StageName::UncertaintyGate => {
            let annotate = state.annotate.as_ref().expect("annotation before gate");
            let (out, summary) = uncertainty_stage(ctx, annotate)?;
            let r = finish(&out, summary, CallLog::new());
            state.uncertainty = Some(out);
            r
        }
        StageName::Export => {
            let vocab = &state.vocabulary.as_ref().expect("vocabulary before export").dedup.vocabulary;
            let annotate = state.annotate.as_ref().expect("annotation before export");
            let gate = state.uncertainty.as_ref().expect("gate before export");
            let (out, summary) = export_stage(ctx, vocab, annotate, gate)?;
            let r = finish(&out, summary, CallLog::new());
            state.export = Some(out);
            r
        }
    }
}

fn cna_error(e: CnaError) -> PipelineError {
    match e {
        CnaError::TooFewRuns { .. } | CnaError::TrainEmbedding { .. } => PipelineError::Provider(e.to_string()),
        CnaError::NoTrainCategories | CnaError::InvalidParameter(_) => PipelineError::Config(e.to_string()),
    }
}

/// Exhausted retries fail the stage; any other provider error skips the sample.
fn is_fatal(e: &ProviderError) -> bool {
    matches!(e, ProviderError::Exhausted { .. })
}

fn vocabulary_stage(ctx: &Ctx) -> Result<(VocabularyStage, StageSummary, CallLog), PipelineError> {
    let c = ctx.config;
    let vocab = Vocabulary::from_train_names(&c.train_classes).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut log = CallLog::new();
    let seed = derive_seed(c.seed, "vocabulary", 0);
    let expansion = expand_vocabulary(&vocab, c.vocabulary.runs, seed, ctx.providers.llm.as_ref(), &ctx.policy, ctx.exec, &mut log)
        .map_err(cna_error)?;
    let consensus = consensus_filter(&expansion.candidates, c.vocabulary.min_hits).map_err(cna_error)?;
    let dedup = semantic_dedup(
        &consensus,
        &vocab,
        c.vocabulary.tau_dedup,
        ctx.providers.embedder.as_ref(),
        ctx.providers.tagger.as_ref(),
        &ctx.policy,
        &mut log,
    )
    .map_err(cna_error)?;
    let summary = StageSummary {
        items_in: expansion.candidates.len(),
        items_out: dedup.accepted.len(),
        provenance: dedup
            .accepted
            .iter()
            .map(|a| ItemProvenance {
                item: format!("category/{}", a.id),
                seed: None,
                checksum: checksum(a),
            })
            .collect(),
        ..Default::default()
    };
    let out = VocabularyStage {
        consensus: consensus.iter().map(|c| c.name.clone()).collect(),
        expansion,
        dedup,
        calls: log.records.clone(),
    };
    Ok((out, summary, log))
}

fn layouts_stage(ctx: &Ctx, vocab: &Vocabulary) -> Result<(LayoutsStage, StageSummary, CallLog), PipelineError> {
    let c = ctx.config;
    let rules = c.layouts.rules();
    let categories = vocab.categories();
    let ids: Vec<u64> = (0..c.layouts.count as u64).collect();
    let results = ctx.exec.map(&ids, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "layout-classes", i));
        let k = rng
            .random_range(c.layouts.min_classes..=c.layouts.max_classes)
            .min(categories.len());
        let sample: Vec<_> = rand::seq::index::sample(&mut rng, categories.len(), k)
            .into_iter()
            .map(|j| categories[j].clone())
            .collect();
        let seed = derive_seed(c.seed, "layout", i);
        let mut log = CallLog::new();
        let planned = plan_layout(
            &sample,
            seed,
            ctx.providers.llm.as_ref(),
            c.layouts.canvas,
            &rules,
            c.layouts.induction_retries,
            &ctx.policy,
            &mut log,
        );
        let outcome = match planned {
            Ok(layout) if layout.items.is_empty() => Err(Ok("layout has no objects".to_string())),
            Ok(layout) => match validate_layout(&layout, &rules, Some(vocab)) {
                Ok(()) => Ok(PlannedLayout {
                    image_id: i,
                    seed,
                    class_ids: sample.iter().map(|c| c.id).collect(),
                    layout,
                }),
                Err(rejection) => Err(Ok(format!("rejected: {rejection}"))),
            },
            Err(PlanError::Provider(e)) if is_fatal(&e) => Err(Err(e)),
            Err(e) => Err(Ok(e.to_string())),
        };
        (log, outcome)
    });

    let mut log = CallLog::new();
    let mut layouts = Vec::new();
    let mut failures = Vec::new();
    for (i, (local, outcome)) in ids.iter().zip(results) {
        log.extend(local);
        match outcome {
            Ok(p) => layouts.push(p),
            Err(Ok(reason)) => {
                log::warn!("layout {i} skipped: {reason}");
                failures.push(ItemFailure::image(*i, reason));
            }
            Err(Err(e)) => return Err(PipelineError::Provider(e.to_string())),
        }
    }
    let summary = StageSummary {
        items_in: ids.len(),
        items_out: layouts.len(),
        provenance: layouts
            .iter()
            .map(|p| ItemProvenance {
                item: format!("layout/{}", p.image_id),
                seed: Some(p.seed),
                checksum: p.layout.layout_id.clone(),
            })
            .collect(),
        ..Default::default()
    };
    Ok((
        LayoutsStage {
            layouts,
            failures,
            calls: log.records.clone(),
        },
        summary,
        log,
    ))
}

fn images_stage(ctx: &Ctx, layouts: &LayoutsStage) -> Result<(ImagesStage, StageSummary, CallLog), PipelineError> {
    let c = ctx.config;
    let results = ctx.exec.map(&layouts.layouts, |p| {
        let seed = derive_seed(c.seed, "image", p.image_id);
        let mut log = CallLog::new();
        let request = (&p.layout.layout_id, seed);
        let out = invoke(&mut log, ProviderKind::Layout2image, &request, &ctx.policy, || {
            ctx.providers.images.generate(&p.layout, seed)
        });
        (log, seed, out)
    });
    let mut log = CallLog::new();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for (p, (local, seed, out)) in layouts.layouts.iter().zip(results) {
        log.extend(local);
        match out {
            Ok(g) => images.push(GeneratedEntry {
                image_id: p.image_id,
                seed,
                layout_id: p.layout.layout_id.clone(),
                image: g.handle,
                regions: g.regions,
            }),
            Err(e) if is_fatal(&e) => return Err(PipelineError::Provider(e.to_string())),
            Err(e) => {
                log::warn!("image {} skipped: {e}", p.image_id);
                failures.push(ItemFailure::image(p.image_id, e.to_string()));
            }
        }
    }
    let summary = StageSummary {
        items_in: layouts.layouts.len(),
        items_out: images.len(),
        provenance: images
            .iter()
            .map(|g| ItemProvenance {
                item: format!("image/{}", g.image_id),
                seed: Some(g.seed),
                checksum: g.image.uri.clone(),
            })
            .collect(),
        ..Default::default()
    };
    Ok((
        ImagesStage {
            images,
            failures,
            calls: log.records.clone(),
        },
        summary,
        log,
    ))
}

fn layout_index(layouts: &LayoutsStage) -> BTreeMap<u64, &PlannedLayout> {
    layouts.layouts.iter().map(|p| (p.image_id, p)).collect()
}

fn clip_stage(
    ctx: &Ctx,
    vocab: &Vocabulary,
    layouts: &LayoutsStage,
    images: &ImagesStage,
) -> Result<(ClipGateStage, StageSummary, CallLog), PipelineError> {
    let by_id = layout_index(layouts);
    let results = ctx.exec.map(&images.images, |g| {
        let layout = &by_id[&g.image_id].layout;
        let names: Vec<(crate::dataset::BBox, &str)> = layout
            .items
            .iter()
            .map(|it| (it.bbox, vocab.get(it.category_id).map(|c| c.name.as_str()).unwrap_or("")))
            .collect();
        let mut log = CallLog::new();
        let out = score_image(&g.image, &names, ctx.providers.scorer.as_ref(), &ctx.policy, &mut log);
        (log, out)
    });
    let mut log = CallLog::new();
    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for (g, (local, out)) in images.images.iter().zip(results) {
        log.extend(local);
        match out {
            Ok((score, object_scores)) => scored.push(ScoredImage {
                image_id: g.image_id,
                score,
                object_scores,
                category_ids: by_id[&g.image_id].layout.items.iter().map(|it| it.category_id).collect(),
            }),
            Err(ScoreError::Provider(e)) if is_fatal(&e) => return Err(PipelineError::Provider(e.to_string())),
            Err(e) => {
                log::warn!("image {} not scored: {e}", g.image_id);
                failures.push(ItemFailure::image(g.image_id, e.to_string()));
            }
        }
    }
    let inputs: Vec<ImageScore> = scored
        .iter()
        .map(|s| ImageScore {
            image_id: s.image_id,
            score: s.score,
            category_ids: s.category_ids.clone(),
        })
        .collect();
    let enabled = ctx.config.curation.clip_gate;
    let (kept, report) = if enabled {
        select_by_clip_score(&inputs).map_err(|e| PipelineError::Data(format!("image score gate: {e}")))?
    } else {
        pass_all_images(&inputs)
    };
    let summary = StageSummary {
        items_in: inputs.len(),
        items_out: kept.len(),
        ..Default::default()
    };
    Ok((
        ClipGateStage {
            enabled,
            scored,
            failures,
            report,
            kept,
            calls: log.records.clone(),
        },
        summary,
        log,
    ))
}

fn pass_all_images(images: &[ImageScore]) -> (Vec<u64>, SelectionReport) {
    let mut sorted: Vec<&ImageScore> = images.iter().collect();
    sorted.sort_by_key(|i| i.image_id);
    let mut per_class_kept = BTreeMap::new();
    for i in &sorted {
        for c in &i.category_ids {
            *per_class_kept.entry(*c).or_insert(0) += 1;
        }
    }
    let report = SelectionReport {
        stage: Stage::Clip,
        kept: sorted.len(),
        dropped: 0,
        per_class_kept,
        threshold: 0.0,
        kept_entries: sorted
            .iter()
            .map(|i| AuditEntry {
                image_id: i.image_id,
                object_id: None,
                category_id: None,
                score: i.score,
            })
            .collect(),
        dropped_entries: Vec::new(),
    };
    (sorted.iter().map(|i| i.image_id).collect(), report)
}

fn annotate_stage(
    ctx: &Ctx,
    vocab: &Vocabulary,
    layouts: &LayoutsStage,
    images: &ImagesStage,
    clip: &ClipGateStage,
) -> Result<(AnnotateStage, StageSummary, CallLog), PipelineError> {
    let by_id = layout_index(layouts);
    let generated: BTreeMap<u64, &GeneratedEntry> = images.images.iter().map(|g| (g.image_id, g)).collect();
    let scores: BTreeMap<u64, &ScoredImage> = clip.scored.iter().map(|s| (s.image_id, s)).collect();
    let results = ctx.exec.map(&clip.kept, |id| {
        let mut log = CallLog::new();
        let out = annotate_objects(&generated[id].image, &by_id[id].layout, ctx.providers.masks.as_ref(), &ctx.policy, &mut log);
        (log, out)
    });
    let mut log = CallLog::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, (local, out)) in clip.kept.iter().zip(results) {
        log.extend(local);
        let annotation = match out {
            Ok(a) => a,
            Err(e) if is_fatal(&e) => return Err(PipelineError::Provider(e.to_string())),
            Err(e) => {
                failures.push(ItemFailure::image(*id, e.to_string()));
                continue;
            }
        };
        for f in &annotation.failures {
            log::debug!("image {id} object {} not annotated: {}", f.item, f.reason);
            failures.push(ItemFailure {
                image_id: *id,
                object_id: Some(f.item as u32),
                reason: f.reason.clone(),
            });
        }
        if annotation.objects.is_empty() {
            failures.push(ItemFailure::image(*id, "no object could be annotated"));
            continue;
        }
        let s = scores[id];
        let mut objects = annotation.objects;
        for o in &mut objects {
            o.clip_score = s.object_scores.get(o.object_id as usize).copied();
        }
        let g = generated[id];
        let record = ImageRecord {
            image_id: *id,
            width: g.image.width,
            height: g.image.height,
            source: Source::Synthetic,
            objects,
            image_uri: g.image.uri.clone(),
            layout_id: Some(g.layout_id.clone()),
            clip_score: Some(s.score),
        };
        record
            .validate(vocab)
            .map_err(|e| PipelineError::Data(format!("annotation produced an invalid record: {e}")))?;
        records.push(record);
    }
    let summary = StageSummary {
        items_in: clip.kept.len(),
        items_out: records.len(),
        provenance: records
            .iter()
            .map(|r| ItemProvenance {
                item: format!("record/{}", r.image_id),
                seed: None,
                checksum: checksum(r),
            })
            .collect(),
        ..Default::default()
    };
    Ok((
        AnnotateStage {
            records,
            failures,
            calls: log.records.clone(),
        },
        summary,
        log,
    ))
}

fn uncertainty_stage(ctx: &Ctx, annotate: &AnnotateStage) -> Result<(UncertaintyGateStage, StageSummary), PipelineError> {
    let per_record = ctx.exec.map(&annotate.records, |r| {
        r.objects
            .iter()
            .map(|o| (o.object_id, o.category_id, object_uncertainty(o)))
            .collect::<Vec<_>>()
    });
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (r, objs) in annotate.records.iter().zip(per_record) {
        for (object_id, category_id, u) in objs {
            match u {
                Ok(uncertainty) => scores.push(ObjectScore {
                    key: ObjectKey {
                        image_id: r.image_id,
                        object_id,
                    },
                    category_id,
                    uncertainty,
                }),
                Err(e) => failures.push(ItemFailure {
                    image_id: r.image_id,
                    object_id: Some(object_id),
                    reason: e.to_string(),
                }),
            }
        }
    }
    let cur = &ctx.config.curation;
    let classes: BTreeSet<u32> = scores.iter().map(|s| s.category_id).collect();
    let per_class_cap = cur
        .per_class_cap
        .unwrap_or_else(|| cur.target_objects.div_ceil(classes.len().max(1)));
    let enabled = cur.uncertainty_gate;
    let cap = if enabled { per_class_cap } else { usize::MAX };
    let (kept, mut report) =
        select_top_n_per_class(&scores, cap).map_err(|e| PipelineError::Data(format!("uncertainty gate: {e}")))?;
    report.threshold = per_class_cap as f64;
    let summary = StageSummary {
        items_in: scores.len() + failures.len(),
        items_out: kept.len(),
        ..Default::default()
    };
    Ok((
        UncertaintyGateStage {
            enabled,
            per_class_cap,
            scores,
            failures,
            report,
            kept,
        },
        summary,
    ))
}

/// Records restricted to objects that passed both gates, with their
/// uncertainty filled in. Images left without objects are dropped.
pub fn final_records(annotate: &AnnotateStage, gate: &UncertaintyGateStage) -> Vec<ImageRecord> {
    let kept: BTreeSet<ObjectKey> = gate.kept.iter().copied().collect();
    let uncertainty: BTreeMap<ObjectKey, f64> = gate.scores.iter().map(|s| (s.key, s.uncertainty)).collect();
    annotate
        .records
        .iter()
        .filter_map(|r| {
            let objects: Vec<_> = r
                .objects
                .iter()
                .filter_map(|o| {
                    let key = ObjectKey {
                        image_id: r.image_id,
                        object_id: o.object_id,
                    };
                    kept.contains(&key).then(|| {
                        let mut o = o.clone();
                        o.uncertainty = uncertainty.get(&key).copied();
                        o
                    })
                })
                .collect();
            (!objects.is_empty()).then(|| ImageRecord {
                objects,
                ..r.clone()
            })
        })
        .collect()
}

fn export_stage(
    ctx: &Ctx,
    vocab: &Vocabulary,
    annotate: &AnnotateStage,
    gate: &UncertaintyGateStage,
) -> Result<(ExportStage, StageSummary), PipelineError> {
    let records = final_records(annotate, gate);
    let objects = records.iter().map(|r| r.objects.len()).sum();
    if objects == 0 {
        log::warn!("no objects survived curation; exporting an empty dataset");
    }
    let dir = ctx.config.workdir.join(DATASET_DIR);
    let checksums = write_dataset(&dir, &records, vocab).map_err(|e| match e {
        crate::dataset::DatasetError::Io(e) => PipelineError::io(&dir, e),
        other => PipelineError::Data(other.to_string()),
    })?;
    let summary = StageSummary {
        items_in: annotate.records.len(),
        items_out: records.len(),
        provenance: checksums
            .files
            .iter()
            .map(|(f, c)| ItemProvenance {
                item: format!("dataset/{f}"),
                seed: None,
                checksum: c.clone(),
            })
            .collect(),
        ..Default::default()
    };
    Ok((
        ExportStage {
            images: records.len(),
            objects,
            checksums,
        },
        summary,
    ))
}

/// Reads a stage output from a work directory.
pub fn read_stage<T: DeserializeOwned>(workdir: &Path, stage: StageName) -> Result<T, PipelineError> {
    load_json(workdir, stage).map_err(PipelineError::Manifest)
}
