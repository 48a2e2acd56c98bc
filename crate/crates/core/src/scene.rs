//! Context-aware sample synthesis: layout planning with two LLM calls
//! (coarse scene description, then induction into strict JSON), layout
//! validation, and per-box largest-mask annotation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, Category, ObjectInstance, Vocabulary};
use crate::hashing::{checksum, derive_seed};
use crate::providers::{
    invoke, CallLog, ImageHandle, LanguageModel, MaskCandidate, MaskGenerator, ProviderError, ProviderKind, RetryPolicy,
};

pub const LAYOUT_SCHEMA_VERSION: u32 = 1;

const SCENE_DESCRIPTION_TEMPLATE: &str = include_str!("../assets/prompts/scene_description_v1.txt");
const LAYOUT_INDUCTION_TEMPLATE: &str = include_str!("../assets/prompts/layout_induction_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutItem {
    pub category_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Content hash of canvas, items and description.
    pub layout_id: String,
    pub canvas: Canvas,
    pub items: Vec<LayoutItem>,
    pub description: String,
}

impl Layout {
    pub fn new(canvas: Canvas, items: Vec<LayoutItem>, description: String) -> Self {
        let layout_id = checksum(&(LAYOUT_SCHEMA_VERSION, &canvas, &items, &description))[..16].to_string();
        Self {
            layout_id,
            canvas,
            items,
            description,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutRules {
    pub overlap_max: f64,
    pub min_box_px: u32,
    pub max_objects: usize,
}

impl Default for LayoutRules {
    fn default() -> Self {
        Self {
            overlap_max: 0.30,
            min_box_px: 32,
            max_objects: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    OutOfBounds { item: usize },
    Overlap { first: usize, second: usize, iou: f64 },
    Degenerate { detail: String },
    UnknownCategory { item: usize, category_id: u32 },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::OutOfBounds { item } => write!(f, "out-of-bounds: item {item}"),
            Rejection::Overlap { first, second, iou } => write!(f, "overlap: items {first} and {second} IoU {iou:.3}"),
            Rejection::Degenerate { detail } => write!(f, "degenerate: {detail}"),
            Rejection::UnknownCategory { item, category_id } => {
                write!(f, "unknown category {category_id} at item {item}")
            }
        }
    }
}

/// Checks the layout invariants. Rejection is a value, not an error.
pub fn validate_layout(layout: &Layout, rules: &LayoutRules, vocab: Option<&Vocabulary>) -> Result<(), Rejection> {
    if layout.items.is_empty() {
        return Err(Rejection::Degenerate {
            detail: "no items".into(),
        });
    }
    for (i, item) in layout.items.iter().enumerate() {
        if !item.bbox.fits_in(layout.canvas.width, layout.canvas.height) {
            return Err(Rejection::OutOfBounds { item: i });
        }
        if item.bbox.w < rules.min_box_px || item.bbox.h < rules.min_box_px {
            return Err(Rejection::Degenerate {
                detail: format!(
                    "item {i} is {}x{}, below the {} px minimum side",
                    item.bbox.w, item.bbox.h, rules.min_box_px
                ),
            });
        }
        if let Some(v) = vocab {
            if v.get(item.category_id).is_none() {
                return Err(Rejection::UnknownCategory {
                    item: i,
                    category_id: item.category_id,
                });
            }
        }
    }
    for i in 0..layout.items.len() {
        for j in i + 1..layout.items.len() {
            let iou = layout.items[i].bbox.iou(&layout.items[j].bbox);
            if iou > rules.overlap_max {
                return Err(Rejection::Overlap { first: i, second: j, iou });
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn scene_description_prompt(classes: &[&str]) -> String {
    SCENE_DESCRIPTION_TEMPLATE.replace("{classes}", &classes.join(", "))
}

pub fn layout_induction_prompt(classes: &[&str], description: &str) -> String {
    LAYOUT_INDUCTION_TEMPLATE
        .replace("{classes}", &classes.join(", "))
        .replace("{description}", &one_line(description))
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid class sample: {0}")]
    InvalidSample(String),
    #[error("layout induction unparseable after {attempts} attempts: {last}")]
    Unparseable { attempts: u32, last: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InducedLayout {
    objects: Vec<InducedObject>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InducedObject {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Parses induction output into layout items. Accepts the JSON object
/// optionally wrapped in surrounding prose or a code fence.
pub fn parse_induction(text: &str, class_sample: &[Category], canvas: Canvas) -> Result<Vec<LayoutItem>, String> {
    let start = text.find('{').ok_or("no JSON object in response")?;
    let end = text.rfind('}').ok_or("no JSON object in response")?;
    if end < start {
        return Err("no JSON object in response".into());
    }
    let parsed: InducedLayout = serde_json::from_str(&text[start..=end]).map_err(|e| format!("invalid layout JSON: {e}"))?;
    parsed
        .objects
        .iter()
        .map(|o| {
            let name = o.class.trim().to_lowercase();
            let cat = class_sample
                .iter()
                .find(|c| c.name.to_lowercase() == name)
                .ok_or_else(|| format!("class {:?} was not requested", o.class))?;
            if o.bbox.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(format!("box {:?} has coordinates outside [0, 1]", o.bbox));
            }
            let [x, y, w, h] = o.bbox;
            let sx = |v: f64| (v * f64::from(canvas.width)).round() as u32;
            let sy = |v: f64| (v * f64::from(canvas.height)).round() as u32;
            let bbox = BBox::new(sx(x), sy(y), sx(w), sy(h)).map_err(|e| e.to_string())?;
            Ok(LayoutItem {
                category_id: cat.id,
                bbox,
            })
        })
        .collect()
}

/// Plans a layout for `class_sample`: one coarse description call, then up
/// to `1 + induction_retries` induction calls, re-prompting with the parse
/// error after each failure.
#[allow(clippy::too_many_arguments)]
pub fn plan_layout(
    class_sample: &[Category],
    seed: u64,
    llm: &dyn LanguageModel,
    canvas: Canvas,
    rules: &LayoutRules,
    induction_retries: u32,
    policy: &RetryPolicy,
    log: &mut CallLog,
) -> Result<Layout, PlanError> {
    if class_sample.is_empty() || class_sample.len() > rules.max_objects {
        return Err(PlanError::InvalidSample(format!(
            "{} classes requested, expected 1..={}",
            class_sample.len(),
            rules.max_objects
        )));
    }
    let names: Vec<&str> = class_sample.iter().map(|c| c.name.as_str()).collect();
    let prompt = scene_description_prompt(&names);
    let description = invoke(log, ProviderKind::Llm, &(&prompt, seed), policy, || llm.complete(&prompt, seed))?;

    let base = layout_induction_prompt(&names, &description);
    let mut last = String::new();
    for attempt in 0..=induction_retries {
        let prompt = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}\nYour previous answer was rejected ({last}). Respond with the JSON object only.\n")
        };
        let s = derive_seed(seed, "induction", u64::from(attempt));
        let text = invoke(log, ProviderKind::Llm, &(&prompt, s), policy, || llm.complete(&prompt, s))?;
        match parse_induction(&text, class_sample, canvas) {
            Ok(items) => return Ok(Layout::new(canvas, items, one_line(&description))),
            Err(e) => {
                log::debug!("layout induction attempt {attempt} rejected: {e}");
                last = e;
            }
        }
    }
    Err(PlanError::Unparseable {
        attempts: induction_retries + 1,
        last,
    })
}

/// Index of the candidate with the largest area; ties go to the lowest index.
pub fn pick_largest(candidates: &[MaskCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if best.is_none_or(|b| c.area > candidates[b].area) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub item: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub objects: Vec<ObjectInstance>,
    pub failures: Vec<AnnotationFailure>,
}

/// Annotates each layout item with the largest proposed mask inside its box.
/// Object ids are layout item indices. Per-object rejections become
/// failures; exhausted retries abort the whole image.
pub fn annotate_objects(
    image: &ImageHandle,
    layout: &Layout,
    masks: &dyn MaskGenerator,
    policy: &RetryPolicy,
    log: &mut CallLog,
) -> Result<Annotation, ProviderError> {
    let mut objects = Vec::new();
    let mut failures = Vec::new();
    for (i, item) in layout.items.iter().enumerate() {
        let fail = |reason: String| AnnotationFailure { item: i, reason };
        let request = (&image.uri, &item.bbox);
        let candidates = match invoke(log, ProviderKind::Maskgen, &request, policy, || masks.propose(image, &item.bbox)) {
            Ok(c) => c,
            Err(e @ ProviderError::Exhausted { .. }) => return Err(e),
            Err(e) => {
                failures.push(fail(e.to_string()));
                continue;
            }
        };
        let Some(best) = pick_largest(&candidates) else {
            failures.push(fail("no mask candidates".into()));
            continue;
        };
        let chosen = candidates.into_iter().nth(best).expect("index from pick_largest");
        if chosen.area == 0 {
            failures.push(fail("largest candidate is empty".into()));
            continue;
        }
        let obj = ObjectInstance {
            object_id: i as u32,
            category_id: item.category_id,
            bbox: item.bbox,
            mask: chosen.mask,
            confidence: chosen.confidence,
            clip_score: None,
            uncertainty: None,
        };
        if let Err(reason) = obj.check(image.width, image.height) {
            failures.push(fail(reason));
            continue;
        }
        objects.push(obj);
    }
    Ok(Annotation { objects, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ConfidenceMap, Mask, Origin};
    use crate::providers::stub::{StubImageGenerator, StubLlm, StubMaskGenerator};
    use crate::providers::{ImageGenerator, PaintedImageStore};
    use std::sync::Arc;

    fn cat(id: u32, name: &str) -> Category {
        Category {
            id,
            name: name.into(),
            origin: Origin::Train,
        }
    }

    fn layout_of(boxes: &[BBox]) -> Layout {
        Layout::new(
            Canvas::default(),
            boxes
                .iter()
                .map(|&bbox| LayoutItem { category_id: 0, bbox })
                .collect(),
            String::new(),
        )
    }

    struct FixedLlm(&'static str);

    impl LanguageModel for FixedLlm {
        fn complete(&self, prompt: &str, _seed: u64) -> Result<String, ProviderError> {
            if prompt.contains("TASK: layout-induction") {
                Ok(self.0.to_string())
            } else {
                Ok("a scene".into())
            }
        }
    }

    #[test]
    fn stub_plans_single_class_layout() {
        let mut log = CallLog::new();
        let rules = LayoutRules::default();
        let layout = plan_layout(&[cat(0, "dog")], 3, &StubLlm, Canvas::default(), &rules, 3, &RetryPolicy::immediate(0), &mut log).unwrap();
        assert_eq!(layout.items.len(), 1);
        assert!(layout.items[0].bbox.fits_in(1024, 1024));
        assert_eq!(log.records.len(), 2);
        validate_layout(&layout, &rules, None).unwrap();
        let again = plan_layout(&[cat(0, "dog")], 3, &StubLlm, Canvas::default(), &rules, 3, &RetryPolicy::immediate(0), &mut log).unwrap();
        assert_eq!(again.layout_id, layout.layout_id);
    }

    #[test]
    fn foreign_class_is_rejected_after_retries() {
        let llm = FixedLlm(r#"{"objects":[{"class":"cat","box":[0.1,0.1,0.2,0.2]}]}"#);
        let mut log = CallLog::new();
        let err = plan_layout(&[cat(0, "dog")], 1, &llm, Canvas::default(), &LayoutRules::default(), 3, &RetryPolicy::immediate(0), &mut log).unwrap_err();
        assert!(matches!(err, PlanError::Unparseable { attempts: 4, .. }), "{err}");
        assert_eq!(log.records.len(), 5);
    }

    #[test]
    fn malformed_json_is_rejected() {
        let sample = [cat(0, "dog")];
        assert!(parse_induction("not json", &sample, Canvas::default()).is_err());
        assert!(parse_induction(r#"{"objects":[{"class":"dog","box":[0.1,0.1,1.2,0.2]}]}"#, &sample, Canvas::default()).is_err());
        assert!(parse_induction(r#"{"objects":[{"class":"dog","box":[0.1,0.1,0.2]}]}"#, &sample, Canvas::default()).is_err());
        assert!(parse_induction(r#"{"objects":[],"extra":1}"#, &sample, Canvas::default()).is_err());
        let items = parse_induction("```json\n{\"objects\":[{\"class\":\"Dog\",\"box\":[0.5,0.25,0.25,0.125]}]}\n```", &sample, Canvas::default()).unwrap();
        assert_eq!(items[0].bbox, BBox::new(512, 256, 256, 128).unwrap());
    }

    #[test]
    fn sample_size_bounds() {
        let mut log = CallLog::new();
        let too_many: Vec<Category> = (0..7).map(|i| cat(i, &format!("c{i}"))).collect();
        let p = RetryPolicy::immediate(0);
        assert!(matches!(
            plan_layout(&too_many, 0, &StubLlm, Canvas::default(), &LayoutRules::default(), 3, &p, &mut log),
            Err(PlanError::InvalidSample(_))
        ));
        assert!(plan_layout(&[], 0, &StubLlm, Canvas::default(), &LayoutRules::default(), 3, &p, &mut log).is_err());
    }

    #[test]
    fn validation_reasons() {
        let rules = LayoutRules::default();
        let out = layout_of(&[BBox::new(1000, 0, 64, 64).unwrap()]);
        assert_eq!(validate_layout(&out, &rules, None), Err(Rejection::OutOfBounds { item: 0 }));

        // 100x100 boxes offset by 100/3 horizontally: intersection 6700, union 13300.
        let a = BBox::new(0, 0, 100, 100).unwrap();
        let b = BBox::new(33, 0, 100, 100).unwrap();
        let iou = 6700.0 / 13300.0;
        match validate_layout(&layout_of(&[a, b]), &rules, None) {
            Err(Rejection::Overlap { iou: got, .. }) => assert!((got - iou).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(validate_layout(&layout_of(&[]), &rules, None), Err(Rejection::Degenerate { .. })));
        assert!(matches!(
            validate_layout(&layout_of(&[BBox::new(0, 0, 31, 64).unwrap()]), &rules, None),
            Err(Rejection::Degenerate { .. })
        ));
        let vocab = Vocabulary::from_train_names(&["x"]).unwrap();
        let mut l = layout_of(&[a]);
        l.items[0].category_id = 5;
        assert!(matches!(validate_layout(&l, &rules, Some(&vocab)), Err(Rejection::UnknownCategory { .. })));
        assert!(validate_layout(&layout_of(&[a, BBox::new(200, 0, 100, 100).unwrap()]), &rules, Some(&vocab)).is_ok());
    }

    fn candidate(area_px: u32) -> MaskCandidate {
        let b = BBox::new(0, 0, area_px, 1).unwrap();
        MaskCandidate::new(Mask::from_rect(300, 1, &b).unwrap(), ConfidenceMap::filled(1, 1, 1.0).unwrap())
    }

    #[test]
    fn largest_with_index_tie_break() {
        assert_eq!(pick_largest(&[candidate(100), candidate(250), candidate(40)]), Some(1));
        assert_eq!(pick_largest(&[candidate(40), candidate(250), candidate(250)]), Some(1));
        assert_eq!(pick_largest(&[]), None);
    }

    #[test]
    fn annotation_recovers_painted_patches() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let boxes = [BBox::new(10, 10, 64, 48).unwrap(), BBox::new(300, 200, 40, 90).unwrap()];
        let mut layout = layout_of(&boxes);
        layout.items[1].category_id = 1;
        let g = StubImageGenerator::new(store.clone()).generate(&layout, 4).unwrap();
        let mut log = CallLog::new();
        let ann = annotate_objects(&g.handle, &layout, &StubMaskGenerator::new(store, 4), &RetryPolicy::immediate(0), &mut log).unwrap();
        assert!(ann.failures.is_empty());
        assert_eq!(ann.objects.len(), 2);
        for (obj, b) in ann.objects.iter().zip(&boxes) {
            assert_eq!(obj.mask, Mask::from_rect(1024, 1024, b).unwrap());
            assert_eq!((obj.confidence.width(), obj.confidence.height()), (b.w, b.h));
        }
        assert_eq!(ann.objects[1].category_id, 1);
    }

    struct NoMasks;

    impl MaskGenerator for NoMasks {
        fn propose(&self, _: &ImageHandle, _: &BBox) -> Result<Vec<MaskCandidate>, ProviderError> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn boxes_without_candidates_are_omitted() {
        let layout = layout_of(&[BBox::new(10, 10, 64, 48).unwrap()]);
        let img = ImageHandle {
            uri: "x".into(),
            width: 1024,
            height: 1024,
        };
        let ann = annotate_objects(&img, &layout, &NoMasks, &RetryPolicy::immediate(0), &mut CallLog::new()).unwrap();
        assert!(ann.objects.is_empty());
        assert_eq!(ann.failures.len(), 1);
    }
}
