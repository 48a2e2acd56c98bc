//! Category name association: expand the training vocabulary into novel
//! class names by repeated LLM association, keep names that recur across
//! runs, and drop non-nouns, exact duplicates and near-synonyms.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Vocabulary;
use crate::exec::Execution;
use crate::hashing::derive_seed;
use crate::providers::{invoke, CallLog, LanguageModel, NounTagger, ProviderError, ProviderKind, RetryPolicy, TextEmbedder};

pub const DEFAULT_RUNS: u32 = 5;
pub const DEFAULT_MIN_HITS: usize = 2;
pub const DEFAULT_TAU_DEDUP: f64 = 0.90;
/// At least this many association runs must succeed.
pub const MIN_SUCCESSFUL_RUNS: usize = 2;

const ASSOCIATION_TEMPLATE: &str = include_str!("../assets/prompts/category_association_v1.txt");

/// Common verbs and adjectives rejected when the tagger has no opinion.
pub const FALLBACK_STOP_LIST: &[&str] = &[
    "running", "walking", "sitting", "sleeping", "eating", "drinking", "playing", "standing", "jumping", "flying",
    "swimming", "barking", "driving", "riding", "cooking", "reading", "writing", "holding", "looking", "waiting",
    "happy", "sad", "blue", "red", "green", "yellow", "black", "white", "wooden", "metal", "bright", "dark", "small",
    "large", "big", "little", "old", "new", "young", "beautiful", "pretty", "cute", "fast", "slow", "soft", "hard",
    "furry", "shiny", "tall", "short", "heavy", "light", "quickly", "slowly", "loudly", "quietly", "very", "and",
    "or", "the", "with",
];

#[derive(Debug, Error)]
pub enum CnaError {
    #[error("vocabulary has no training categories")]
    NoTrainCategories,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("only {successful} of {runs} association runs succeeded; at least {MIN_SUCCESSFUL_RUNS} are required")]
    TooFewRuns { successful: usize, runs: u32 },
    #[error("embedding training category {name:?} failed: {source}")]
    TrainEmbedding { name: String, source: ProviderError },
}

pub fn association_prompt(class: &str) -> String {
    ASSOCIATION_TEMPLATE.replace("{class}", class.trim())
}

/// Seed used for association run `run` (1-based).
pub fn run_seed(seed: u64, run: u32) -> u64 {
    derive_seed(seed, "cna-run", u64::from(run))
}

/// Lowercases, strips list markers, quotes and trailing punctuation, and
/// collapses whitespace. Returns `None` for names that are empty or contain
/// characters other than letters, digits, spaces, hyphens and apostrophes.
pub fn canonicalize(raw: &str) -> Option<String> {
    let s = raw.trim().to_lowercase();
    let s = s.trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*' | '•') || c.is_whitespace());
    let s = s.trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '.' | ';' | ':' | '!' | '?') || c.is_whitespace());
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if s.is_empty() || s.len() > 48 {
        return None;
    }
    s.chars()
        .all(|c| c.is_alphanumeric() || c == ' ' || c == '-' || c == '\'')
        .then_some(s)
}

/// Splits an association answer into canonical names (commas, semicolons
/// or newlines separate entries).
pub fn parse_association(text: &str) -> Vec<String> {
    text.split([',', ';', '\n'])
        .filter_map(canonicalize)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateName {
    pub name: String,
    /// Train category whose prompt first produced the name.
    pub source_class: u32,
    /// 1-based indices of the runs that produced the name.
    pub run_hits: BTreeSet<u32>,
    #[serde(skip)]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: u32,
    pub class_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub candidates: Vec<CandidateName>,
    pub successful_runs: Vec<u32>,
    pub failed_runs: Vec<RunFailure>,
}

/// Runs `runs` association rounds with one prompt per training class.
/// A run with any failed call is excluded entirely. Candidates are returned
/// sorted by name.
pub fn expand_vocabulary(
    vocab: &Vocabulary,
    runs: u32,
    seed: u64,
    llm: &dyn LanguageModel,
    policy: &RetryPolicy,
    exec: Execution,
    log: &mut CallLog,
) -> Result<Expansion, CnaError> {
    let train: Vec<_> = vocab.train().collect();
    if train.is_empty() {
        return Err(CnaError::NoTrainCategories);
    }
    if runs == 0 {
        return Err(CnaError::InvalidParameter("runs must be >= 1".into()));
    }
    let jobs: Vec<(u32, u32, String)> = (1..=runs)
        .flat_map(|run| train.iter().map(move |c| (run, c.id, association_prompt(&c.name))))
        .collect();
    let results = exec.map(&jobs, |(run, _, prompt)| {
        let mut local = CallLog::new();
        let s = run_seed(seed, *run);
        let out = invoke(&mut local, ProviderKind::Llm, &(prompt, s), policy, || llm.complete(prompt, s));
        (local, out)
    });

    let mut answers: BTreeMap<u32, Vec<(u32, String)>> = BTreeMap::new();
    let mut failed_runs = Vec::new();
    for ((run, class_id, _), (local, out)) in jobs.iter().zip(results) {
        log.extend(local);
        match out {
            Ok(text) => answers.entry(*run).or_default().push((*class_id, text)),
            Err(e) => failed_runs.push(RunFailure {
                run: *run,
                class_id: *class_id,
                error: e.to_string(),
            }),
        }
    }
    let failed: BTreeSet<u32> = failed_runs.iter().map(|f| f.run).collect();
    let successful_runs: Vec<u32> = (1..=runs).filter(|r| !failed.contains(r)).collect();
    for f in &failed_runs {
        log::warn!("association run {} failed for class {}: {}", f.run, f.class_id, f.error);
    }
    if successful_runs.len() < MIN_SUCCESSFUL_RUNS {
        return Err(CnaError::TooFewRuns {
            successful: successful_runs.len(),
            runs,
        });
    }

    let mut by_name: BTreeMap<String, CandidateName> = BTreeMap::new();
    for run in &successful_runs {
        for (class_id, text) in answers.get(run).into_iter().flatten() {
            for name in parse_association(text) {
                by_name
                    .entry(name.clone())
                    .or_insert_with(|| CandidateName {
                        name,
                        source_class: *class_id,
                        run_hits: BTreeSet::new(),
                        embedding: None,
                    })
                    .run_hits
                    .insert(*run);
            }
        }
    }
    Ok(Expansion {
        candidates: by_name.into_values().collect(),
        successful_runs,
        failed_runs,
    })
}

/// Keeps exactly the names produced in at least `min_hits` runs.
pub fn consensus_filter(cands: &[CandidateName], min_hits: usize) -> Result<Vec<CandidateName>, CnaError> {
    if min_hits < 2 {
        return Err(CnaError::InvalidParameter(format!("min_hits must be >= 2, got {min_hits}")));
    }
    Ok(cands.iter().filter(|c| c.run_hits.len() >= min_hits).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    ExactMatch { existing: String },
    NonNoun,
    SimilarToTrain { train: String, cosine: f64 },
    SimilarToNovel { novel: String, cosine: f64 },
    EmbeddingFailed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedName {
    pub name: String,
    pub source_class: u32,
    pub run_hits: BTreeSet<u32>,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedName {
    pub id: u32,
    pub name: String,
    pub source_class: u32,
    pub run_hits: BTreeSet<u32>,
    pub max_train_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub vocabulary: Vocabulary,
    pub accepted: Vec<AcceptedName>,
    pub dropped: Vec<DroppedName>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Noun check: the tagger decides when it has an opinion, otherwise the
/// head word (last word) must not be on [`FALLBACK_STOP_LIST`].
pub fn is_noun(tagger: &dyn NounTagger, name: &str) -> bool {
    tagger.is_noun(name).unwrap_or_else(|| {
        name.split_whitespace()
            .last()
            .is_some_and(|head| !FALLBACK_STOP_LIST.contains(&head))
    })
}

/// Filters consensus candidates against the vocabulary and appends the
/// survivors as novel categories with fresh ids.
///
/// Candidates are processed by descending hit count, then name. A candidate
/// is dropped if its name equals an existing category, if it is not a noun,
/// if its embedding fails, if its cosine to any training name is at least
/// `tau_dedup`, or if its cosine to an already accepted novel name is.
pub fn semantic_dedup(
    cands: &[CandidateName],
    vocab: &Vocabulary,
    tau_dedup: f64,
    embedder: &dyn TextEmbedder,
    tagger: &dyn NounTagger,
    policy: &RetryPolicy,
    log: &mut CallLog,
) -> Result<DedupOutcome, CnaError> {
    if !(tau_dedup > 0.0 && tau_dedup < 1.0) {
        return Err(CnaError::InvalidParameter(format!("tau_dedup must be in (0, 1), got {tau_dedup}")));
    }
    let embed = |text: &str, log: &mut CallLog| {
        invoke(log, ProviderKind::Embed, text, policy, || embedder.embed(text))
    };
    let mut train_vecs = Vec::new();
    for c in vocab.train() {
        let v = embed(&c.name, log).map_err(|source| CnaError::TrainEmbedding {
            name: c.name.clone(),
            source,
        })?;
        train_vecs.push((c.name.clone(), v));
    }

    let mut order: Vec<&CandidateName> = cands.iter().collect();
    order.sort_by(|a, b| b.run_hits.len().cmp(&a.run_hits.len()).then_with(|| a.name.cmp(&b.name)));

    let mut out_vocab = vocab.clone();
    let mut accepted = Vec::new();
    let mut accepted_vecs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut dropped = Vec::new();
    for cand in order {
        let drop = |reason: DropReason| {
            log::info!("dropping candidate {:?}: {:?}", cand.name, reason);
            DroppedName {
                name: cand.name.clone(),
                source_class: cand.source_class,
                run_hits: cand.run_hits.clone(),
                reason,
            }
        };
        if let Some(existing) = out_vocab.by_name(&cand.name) {
            dropped.push(drop(DropReason::ExactMatch {
                existing: existing.name.clone(),
            }));
            continue;
        }
        if !is_noun(tagger, &cand.name) {
            dropped.push(drop(DropReason::NonNoun));
            continue;
        }
        let v = match &cand.embedding {
            Some(v) => v.clone(),
            None => match embed(&cand.name, log) {
                Ok(v) => v,
                Err(e) => {
                    dropped.push(drop(DropReason::EmbeddingFailed { error: e.to_string() }));
                    continue;
                }
            },
        };
        let nearest = |pool: &[(String, Vec<f64>)]| {
            pool.iter()
                .map(|(n, t)| (n.clone(), cosine(&v, t)))
                .fold(None::<(String, f64)>, |best, (n, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((n, c)),
                })
        };
        let max_train = nearest(&train_vecs);
        if let Some((train, c)) = &max_train {
            if *c >= tau_dedup {
                dropped.push(drop(DropReason::SimilarToTrain {
                    train: train.clone(),
                    cosine: *c,
                }));
                continue;
            }
        }
        if let Some((novel, c)) = nearest(&accepted_vecs) {
            if c >= tau_dedup {
                dropped.push(drop(DropReason::SimilarToNovel { novel, cosine: c }));
                continue;
            }
        }
        let id = out_vocab
            .push_novel(&cand.name)
            .expect("name checked against the vocabulary above");
        accepted.push(AcceptedName {
            id,
            name: cand.name.clone(),
            source_class: cand.source_class,
            run_hits: cand.run_hits.clone(),
            max_train_cosine: max_train.map_or(0.0, |(_, c)| c),
        });
        accepted_vecs.push((cand.name.clone(), v));
    }
    Ok(DedupOutcome {
        vocabulary: out_vocab,
        accepted,
        dropped,
    })
}
