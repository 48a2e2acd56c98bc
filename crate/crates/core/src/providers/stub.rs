//! Deterministic in-process providers.
//!
//! Every stub is a pure function of its inputs and seed. The LLM stub
//! recognises the three prompt templates shipped with the crate by their
//! `TASK:` header and answers each with a fixed grammar:
//!
//! * `category-association`: comma-separated names drawn from a per-class pool
//!   (related nouns, an occasional synonym of the class, an occasional
//!   non-noun and occasionally the class itself). Each pool entry appears in a
//!   given run with probability 0.6, so repeats across runs are common.
//! * `scene-description`: one sentence naming the classes.
//! * `layout-induction`: strict JSON with one normalized box per class.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::image::{PaintedImage, PaintedImageStore, Patch};
use super::{
    CropScorer, GeneratedImage, ImageGenerator, ImageHandle, LanguageModel, MaskCandidate, MaskGenerator, NounTagger,
    ProviderError, RegionStat, TextEmbedder,
};
use crate::dataset::{BBox, ConfidenceMap, Mask};
use crate::hashing::{combine, hash_str, mix64, unit_f64};
use crate::scene::Layout;

pub const STUB_EMBED_DIM: usize = 64;

/// Probability that a pool entry is emitted in one association run.
const POOL_EMIT_P: f64 = 0.6;

const NOUN_POOL: &[&str] = &[
    "leash", "collar", "frisbee", "kennel", "bowl", "blanket", "pillow", "lamp", "bookshelf", "vase", "cushion",
    "curtain", "ottoman", "armchair", "fireplace", "painting", "mirror", "helmet", "saddle", "bridle", "barn",
    "fence", "tractor", "wheelbarrow", "lantern", "tent", "backpack", "canoe", "paddle", "lifebuoy", "anchor",
    "trolley", "suitcase", "umbrella", "scarf", "glove", "teapot", "kettle", "ladle", "whisk", "colander",
    "cutting board", "toaster", "blender", "napkin", "tablecloth", "candle", "chandelier", "easel", "piano",
    "violin", "drum", "trophy", "globe", "telescope", "microscope", "skateboard", "scooter", "kite", "hammock",
    "birdhouse", "feeder", "watering can", "shovel", "rake", "mailbox", "doormat", "coat rack", "hanger",
    "briefcase", "stapler", "calculator", "printer", "projector", "whiteboard", "stethoscope", "wheelchair",
    "crutch", "stroller", "crib", "rattle", "pacifier", "bib", "highchair", "aquarium", "terrarium", "cage",
    "perch", "carrier", "grooming brush", "scratching post", "litter box", "hay bale", "trough", "harness",
    "horseshoe", "windmill", "scarecrow", "beehive",
];

/// Non-nouns the stub may emit; also the stub tagger's word list.
pub const NON_NOUNS: &[&str] = &[
    "running", "walking", "sitting", "sleeping", "eating", "playing", "standing", "jumping", "flying", "swimming",
    "barking", "happy", "blue", "red", "green", "wooden", "bright", "dark", "small", "large", "big", "old", "new",
    "beautiful", "cute", "fast", "slow", "soft", "furry", "shiny", "tall", "heavy", "quickly", "loudly",
];

/// Groups of near-identical names; the stub embedder maps every member of a
/// group close to the group's first entry.
pub const SYNONYM_GROUPS: &[&[&str]] = &[
    &["sofa", "couch", "settee"],
    &["cup", "mug"],
    &["car", "automobile"],
    &["tv", "television"],
    &["bicycle", "bike"],
    &["person", "human"],
    &["dog", "puppy"],
    &["cat", "kitten"],
    &["rug", "carpet"],
    &["bag", "handbag"],
    &["potted plant", "houseplant"],
    &["dining table", "dinner table"],
    &["motorcycle", "motorbike"],
    &["airplane", "aeroplane"],
];

fn synonym_group(name: &str) -> Option<&'static [&'static str]> {
    SYNONYM_GROUPS.iter().copied().find(|g| g.contains(&name))
}

fn header_value<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix(key).map(str::trim))
}

fn task_of(prompt: &str) -> Option<&str> {
    header_value(prompt, "TASK:")
}

fn class_list(prompt: &str) -> Vec<String> {
    header_value(prompt, "Classes:")
        .map(|s| s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
        .unwrap_or_default()
}

/// The association pool for a class: related nouns plus the distractors.
pub fn association_pool(class: &str) -> Vec<String> {
    let class = class.trim().to_lowercase();
    let h = hash_str(&class);
    let mut pool: Vec<String> = Vec::new();
    let mut i = 0u64;
    while pool.len() < 8 {
        let pick = NOUN_POOL[(combine(h, i) % NOUN_POOL.len() as u64) as usize];
        if !pool.iter().any(|p| p == pick) {
            pool.push(pick.to_string());
        }
        i += 1;
    }
    if let Some(group) = synonym_group(&class) {
        if let Some(other) = group.iter().find(|n| **n != class) {
            pool.push(other.to_string());
        }
    }
    pool.push(NON_NOUNS[(combine(h, 101) % NON_NOUNS.len() as u64) as usize].to_string());
    pool.push(class);
    pool
}

/// Default stub language model.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubLlm;

impl StubLlm {
    fn associate(prompt: &str, seed: u64) -> String {
        let Some(class) = header_value(prompt, "Class:") else {
            return String::new();
        };
        let key = combine(hash_str(prompt), seed);
        association_pool(class)
            .into_iter()
            .filter(|name| unit_f64(combine(key, hash_str(name))) < POOL_EMIT_P)
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn describe(prompt: &str, seed: u64) -> String {
        let classes = class_list(prompt);
        const MOODS: &[&str] = &["sunlit", "quiet", "busy", "cozy", "open"];
        let mood = MOODS[(combine(hash_str(prompt), seed) % MOODS.len() as u64) as usize];
        let list = classes.iter().map(|c| format!("a {c}")).collect::<Vec<_>>().join(", ");
        format!("A {mood} scene showing {list}, each clearly separated from the others.")
    }

    fn induce(prompt: &str, seed: u64) -> String {
        let classes = class_list(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(combine(hash_str(prompt), seed));
        let mut placed: Vec<[f64; 4]> = Vec::new();
        let mut objects = Vec::new();
        for class in classes {
            let mut best = [0.0; 4];
            for _ in 0..40 {
                let w = 0.04 + 0.12 * rng.random::<f64>();
                let h = 0.04 + 0.12 * rng.random::<f64>();
                let x = rng.random::<f64>() * (1.0 - w);
                let y = rng.random::<f64>() * (1.0 - h);
                best = [x, y, w, h];
                if placed.iter().all(|p| norm_iou(p, &best) <= 0.2) {
                    break;
                }
            }
            let b = best.map(|v| (v * 10_000.0).floor() / 10_000.0);
            placed.push(b);
            objects.push(serde_json::json!({ "class": class, "box": b }));
        }
        serde_json::json!({ "objects": objects }).to_string()
    }
}

fn norm_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

impl LanguageModel for StubLlm {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, ProviderError> {
        if prompt.trim().is_empty() {
            return Err(ProviderError::Rejected("empty prompt".into()));
        }
        Ok(match task_of(prompt) {
            Some("category-association") => Self::associate(prompt, seed),
            Some("scene-description") => Self::describe(prompt, seed),
            Some("layout-induction") => Self::induce(prompt, seed),
            _ => format!("ack {:016x}", combine(hash_str(prompt), seed)),
        })
    }
}

/// Colour painted for a category; always has a channel >= 128 so it never
/// matches the (dark) background.
pub fn class_color(category_id: u32) -> [u8; 3] {
    let h = mix64(u64::from(category_id) ^ 0xC0105);
    [(h as u8) | 0x80, (h >> 8) as u8, (h >> 16) as u8]
}

fn background_color(seed: u64) -> [u8; 3] {
    let v = (mix64(seed ^ 0xB4C6) % 48) as u8;
    [v, v, v]
}

/// Paints each layout box with a solid class-keyed patch. Larger boxes are
/// painted first so smaller objects stay visible.
pub struct StubImageGenerator {
    store: Arc<PaintedImageStore>,
}

impl StubImageGenerator {
    pub fn new(store: Arc<PaintedImageStore>) -> Self {
        Self { store }
    }

    pub fn paint(layout: &Layout, seed: u64) -> PaintedImage {
        let mut order: Vec<usize> = (0..layout.items.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(layout.items[i].bbox.area()), i));
        PaintedImage {
            width: layout.canvas.width,
            height: layout.canvas.height,
            background: background_color(seed),
            patches: order
                .into_iter()
                .map(|i| Patch {
                    bbox: layout.items[i].bbox,
                    color: class_color(layout.items[i].category_id),
                })
                .collect(),
        }
    }
}

impl ImageGenerator for StubImageGenerator {
    fn generate(&self, layout: &Layout, seed: u64) -> Result<GeneratedImage, ProviderError> {
        let image = Self::paint(layout, seed);
        let regions = layout
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let color = class_color(item.category_id);
                let b = item.bbox;
                let mut visible = 0u64;
                for y in b.y..(b.y + b.h).min(image.height) {
                    for x in b.x..(b.x + b.w).min(image.width) {
                        visible += u64::from(image.pixel(x, y) == color);
                    }
                }
                RegionStat {
                    item: i,
                    visible_pixels: visible,
                }
            })
            .collect();
        let handle = ImageHandle {
            uri: String::new(),
            width: image.width,
            height: image.height,
        };
        let uri = self.store.put(image)?;
        Ok(GeneratedImage {
            handle: ImageHandle { uri, ..handle },
            regions,
        })
    }
}

/// Proposes the dominant painted region inside the box, plus a smaller
/// distractor (that region cut to the inner half of the box).
///
/// Confidences inside the region are `1 - q * u` with a per-object quality
/// `q` in `[0.02, 0.5]` and per-pixel `u` uniform in `[0, 1)`; outside the
/// region they are `0.2 * u`.
pub struct StubMaskGenerator {
    store: Arc<PaintedImageStore>,
    seed: u64,
}

impl StubMaskGenerator {
    pub fn new(store: Arc<PaintedImageStore>, seed: u64) -> Self {
        Self { store, seed }
    }
}

fn bbox_key(b: &BBox) -> u64 {
    combine(combine(combine(u64::from(b.x), u64::from(b.y)), u64::from(b.w)), u64::from(b.h))
}

impl MaskGenerator for StubMaskGenerator {
    fn propose(&self, image: &ImageHandle, bbox: &BBox) -> Result<Vec<MaskCandidate>, ProviderError> {
        if !bbox.fits_in(image.width, image.height) {
            return Err(ProviderError::Rejected(format!("box {bbox:?} outside image")));
        }
        let painted = self.store.get(&image.uri)?;
        let (w, h) = (bbox.w as usize, bbox.h as usize);
        let mut colors = Vec::with_capacity(w * h);
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                colors.push(painted.pixel(x, y));
            }
        }
        let mut counts: Vec<([u8; 3], u64)> = Vec::new();
        for c in colors.iter().filter(|c| **c != painted.background) {
            match counts.iter_mut().find(|(k, _)| k == c) {
                Some((_, n)) => *n += 1,
                None => counts.push((*c, 1)),
            }
        }
        let Some(&(dominant, _)) = counts.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) else {
            return Ok(Vec::new());
        };

        let object_key = combine(combine(hash_str(&image.uri), bbox_key(bbox)), self.seed);
        let quality = 0.02 + 0.48 * unit_f64(object_key);
        let in_region: Vec<bool> = colors.iter().map(|c| *c == dominant).collect();
        let values: Vec<f32> = in_region
            .iter()
            .enumerate()
            .map(|(i, &inside)| {
                let u = unit_f64(combine(object_key, i as u64));
                if inside {
                    (1.0 - quality * u) as f32
                } else {
                    (0.2 * u) as f32
                }
            })
            .collect();
        let confidence = ConfidenceMap::new(bbox.w, bbox.h, values).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;

        let spans = |keep: &dyn Fn(u32, u32) -> bool| {
            let mut out = Vec::new();
            for dy in 0..bbox.h {
                let mut start: Option<u32> = None;
                for dx in 0..=bbox.w {
                    let on = dx < bbox.w && in_region[dy as usize * w + dx as usize] && keep(dx, dy);
                    match (on, start) {
                        (true, None) => start = Some(dx),
                        (false, Some(s)) => {
                            out.push((bbox.y + dy, bbox.x + s, bbox.x + dx));
                            start = None;
                        }
                        _ => {}
                    }
                }
            }
            out
        };
        let to_err = |e: crate::dataset::DatasetError| ProviderError::InvalidResponse(e.to_string());
        let region = Mask::from_row_spans(image.width, image.height, spans(&|_, _| true)).map_err(to_err)?;
        let inner = bbox.inner_half();
        let (ix, iy) = (inner.x - bbox.x, inner.y - bbox.y);
        let distractor = Mask::from_row_spans(
            image.width,
            image.height,
            spans(&|dx, dy| dx >= ix && dx < ix + inner.w && dy >= iy && dy < iy + inner.h),
        )
        .map_err(to_err)?;

        let mut out = vec![MaskCandidate::new(region, confidence.clone())];
        let d = MaskCandidate::new(distractor, confidence);
        if d.area > 0 && d.area < out[0].area {
            out.push(d);
        }
        Ok(out)
    }
}

/// Uniform pseudo-random score keyed by (image, box, name, seed).
pub struct StubScorer {
    seed: u64,
}

impl StubScorer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl CropScorer for StubScorer {
    fn score(&self, image: &ImageHandle, bbox: &BBox, class_name: &str) -> Result<f64, ProviderError> {
        let key = combine(combine(hash_str(&image.uri), bbox_key(bbox)), hash_str(class_name));
        Ok(unit_f64(combine(key, self.seed)).clamp(0.0, 1.0))
    }
}

/// Hash-seeded directions on the unit sphere. Members of a synonym group
/// are the group head's direction plus a 0.15-scaled orthogonal offset, so any
/// two members have cosine >= (1 - 0.15^2) / (1 + 0.15^2) > 0.95.
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
}

impl StubEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "embedding dimension must be at least 2");
        Self { seed, dim }
    }

    fn direction(&self, key: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(combine(hash_str(key), self.seed));
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(v)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl TextEmbedder for StubEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let name = text.trim().to_lowercase();
        if name.is_empty() {
            return Err(ProviderError::Rejected("empty text".into()));
        }
        let Some(group) = synonym_group(&name) else {
            return Ok(self.direction(&name));
        };
        let base = self.direction(group[0]);
        if name == group[0] {
            return Ok(base);
        }
        let mut offset = self.direction(&format!("{name}#offset"));
        let dot: f64 = offset.iter().zip(&base).map(|(a, b)| a * b).sum();
        offset.iter_mut().zip(&base).for_each(|(o, b)| *o -= dot * b);
        let offset = normalize(offset);
        Ok(normalize(base.iter().zip(&offset).map(|(b, o)| b + 0.15 * o).collect()))
    }
}

/// Tags everything as a noun except the entries of [`NON_NOUNS`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StubTagger;

impl NounTagger for StubTagger {
    fn is_noun(&self, name: &str) -> Option<bool> {
        let name = name.trim().to_lowercase();
        Some(!name.split_whitespace().any(|w| NON_NOUNS.contains(&w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Canvas, LayoutItem};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn layout(items: Vec<(u32, BBox)>) -> Layout {
        Layout::new(
            Canvas { width: 256, height: 256 },
            items.into_iter().map(|(category_id, bbox)| LayoutItem { category_id, bbox }).collect(),
            "test".into(),
        )
    }

    #[test]
    fn llm_is_deterministic_and_seed_sensitive() {
        let p = crate::vocabulary::association_prompt("dog");
        let a = StubLlm.complete(&p, 1).unwrap();
        assert_eq!(a, StubLlm.complete(&p, 1).unwrap());
        let outs: Vec<String> = (1..=2).map(|s| StubLlm.complete(&p, s).unwrap()).collect();
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn association_answers_are_comma_separated_pool_names() {
        let p = crate::vocabulary::association_prompt("dog");
        let pool = association_pool("dog");
        let mut seen_any = false;
        for seed in 0..20 {
            let text = StubLlm.complete(&p, seed).unwrap();
            for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                seen_any = true;
                assert!(pool.iter().any(|p| p == name), "{name} not in pool");
            }
        }
        assert!(seen_any);
        assert!(pool.contains(&"puppy".to_string()));
    }

    #[test]
    fn empty_layout_paints_plain_background() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let generated = StubImageGenerator::new(store.clone()).generate(&layout(vec![]), 3).unwrap();
        let img = store.get(&generated.handle.uri).unwrap();
        assert!(img.patches.is_empty());
        assert_eq!(img.pixel(10, 10), img.background);
        assert_eq!((generated.handle.width, generated.handle.height), (256, 256));
    }

    #[test]
    fn disjoint_boxes_paint_distinguishable_patches() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let a = BBox::new(10, 10, 40, 40).unwrap();
        let b = BBox::new(100, 120, 50, 33).unwrap();
        let l = layout(vec![(0, a), (1, b)]);
        let g = StubImageGenerator::new(store.clone()).generate(&l, 3).unwrap();
        let img = store.get(&g.handle.uri).unwrap();
        assert_ne!(class_color(0), class_color(1));
        for y in 0..256 {
            for x in 0..256 {
                let expect = if a.contains(x, y) {
                    class_color(0)
                } else if b.contains(x, y) {
                    class_color(1)
                } else {
                    img.background
                };
                assert_eq!(img.pixel(x, y), expect);
            }
        }
        assert_eq!(g.regions[0].visible_pixels, a.area());
        assert_eq!(g.regions[1].visible_pixels, b.area());
    }

    #[test]
    fn same_layout_and_seed_give_identical_bytes() {
        let l = layout(vec![(0, BBox::new(3, 4, 40, 50).unwrap())]);
        let a = StubImageGenerator::paint(&l, 9).to_ppm();
        let b = StubImageGenerator::paint(&l, 9).to_ppm();
        assert_eq!(crate::hashing::sha256_hex(&a), crate::hashing::sha256_hex(&b));
        assert_ne!(a, StubImageGenerator::paint(&l, 10).to_ppm());
    }

    #[test]
    fn largest_candidate_is_the_painted_patch() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let bbox = BBox::new(20, 30, 64, 40).unwrap();
        let l = layout(vec![(4, bbox)]);
        let g = StubImageGenerator::new(store.clone()).generate(&l, 1).unwrap();
        let masks = StubMaskGenerator::new(store, 1);
        let cands = masks.propose(&g.handle, &bbox).unwrap();
        assert_eq!(cands.len(), 2);
        let largest = cands.iter().max_by_key(|c| c.area).unwrap();
        assert_eq!(largest.mask, Mask::from_rect(256, 256, &bbox).unwrap());
        assert!(cands.iter().all(|c| c.mask.within(&bbox)));
        assert!(cands[1].area < cands[0].area);
        assert_eq!(cands, masks.propose(&g.handle, &bbox).unwrap());
    }

    #[test]
    fn unit_box_gives_tiny_candidate() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let bbox = BBox::new(50, 50, 40, 40).unwrap();
        let g = StubImageGenerator::new(store.clone()).generate(&layout(vec![(0, bbox)]), 1).unwrap();
        let tiny = BBox::new(60, 60, 1, 1).unwrap();
        let cands = StubMaskGenerator::new(store, 1).propose(&g.handle, &tiny).unwrap();
        assert!(!cands.is_empty());
        assert!(cands.iter().all(|c| c.area <= 1));
    }

    #[test]
    fn background_box_has_no_candidates() {
        let store = Arc::new(PaintedImageStore::in_memory());
        let g = StubImageGenerator::new(store.clone()).generate(&layout(vec![]), 1).unwrap();
        let cands = StubMaskGenerator::new(store, 1)
            .propose(&g.handle, &BBox::new(0, 0, 8, 8).unwrap())
            .unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn scores_are_deterministic_and_uniform() {
        let s = StubScorer::new(5);
        let img = ImageHandle {
            uri: "stub://images/abc".into(),
            width: 1024,
            height: 1024,
        };
        let b = BBox::new(1, 2, 3, 4).unwrap();
        assert_eq!(s.score(&img, &b, "dog").unwrap(), s.score(&img, &b, "dog").unwrap());
        let n = 10_000;
        let mean = (0..n)
            .map(|i| {
                let b = BBox::new(i % 97, i / 97, 32, 32).unwrap();
                let v = s.score(&img, &b, "dog").unwrap();
                assert!((0.0..=1.0).contains(&v));
                v
            })
            .sum::<f64>()
            / f64::from(n);
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn embeddings_are_unit_and_respect_synonyms() {
        let e = StubEmbedder::new(0, STUB_EMBED_DIM);
        let dog = e.embed("dog").unwrap();
        let norm = dog.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!((cosine(&dog, &e.embed("dog").unwrap()) - 1.0).abs() < 1e-12);
        assert!(cosine(&e.embed("sofa").unwrap(), &e.embed("couch").unwrap()) >= 0.95);
        assert!(cosine(&e.embed("couch").unwrap(), &e.embed("settee").unwrap()) >= 0.95);
    }

    #[test]
    fn unrelated_pairs_are_far_apart_over_seeds() {
        let trials = 1000;
        let close = (0..trials)
            .filter(|&seed| {
                let e = StubEmbedder::new(seed, STUB_EMBED_DIM);
                cosine(&e.embed("leash").unwrap(), &e.embed("teapot").unwrap()) >= 0.9
            })
            .count();
        assert!(close as f64 / trials as f64 <= 0.01);
    }

    #[test]
    fn tagger_flags_non_nouns() {
        assert_eq!(StubTagger.is_noun("running"), Some(false));
        assert_eq!(StubTagger.is_noun("leash"), Some(true));
    }
}
