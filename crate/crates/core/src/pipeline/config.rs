//! Pipeline configuration: one JSON document, with provider URLs
//! overridable from the environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::hashing::checksum;
use crate::providers::{ProviderEndpoint, ProviderKind, RetryPolicy};
use crate::scene::{Canvas, LayoutRules};
use crate::vocabulary::{DEFAULT_MIN_HITS, DEFAULT_RUNS, DEFAULT_TAU_DEDUP};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Where stages, images, the dataset and reports are written. Relative
    /// paths resolve against the config file's directory.
    pub workdir: PathBuf,
    pub train_classes: Vec<String>,
    #[serde(default)]
    pub vocabulary: VocabularyConfig,
    #[serde(default)]
    pub layouts: LayoutConfig,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub runs: u32,
    pub min_hits: usize,
    pub tau_dedup: f64,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            min_hits: DEFAULT_MIN_HITS,
            tau_dedup: DEFAULT_TAU_DEDUP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// Number of layouts to plan.
    pub count: usize,
    pub canvas: Canvas,
    pub min_classes: usize,
    pub max_classes: usize,
    pub overlap_max: f64,
    pub min_box_px: u32,
    pub max_objects: usize,
    pub induction_retries: u32,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let rules = LayoutRules::default();
        Self {
            count: 100,
            canvas: Canvas::default(),
            min_classes: 1,
            max_classes: 6,
            overlap_max: rules.overlap_max,
            min_box_px: rules.min_box_px,
            max_objects: rules.max_objects,
            induction_retries: 3,
        }
    }
}

impl LayoutConfig {
    pub fn rules(&self) -> LayoutRules {
        LayoutRules {
            overlap_max: self.overlap_max,
            min_box_px: self.min_box_px,
            max_objects: self.max_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub clip_gate: bool,
    pub uncertainty_gate: bool,
    /// Objects kept per class by the uncertainty gate. When unset, the cap is
    /// `ceil(target_objects / classes present)`.
    pub per_class_cap: Option<usize>,
    pub target_objects: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            clip_gate: true,
            uncertainty_gate: true,
            per_class_cap: None,
            target_objects: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub lambda: f64,
    /// Memory bank capacity per class.
    pub bank_capacity: usize,
    /// Images per step.
    pub batch_size: usize,
    /// Synthetic objects per image in a step; a step samples
    /// `objects_per_image * batch_size` of them.
    pub objects_per_image: usize,
    pub feature_len: usize,
    pub learning_rate: f64,
    /// Scale of the initial perturbation of the synthetic-feature map.
    pub domain_shift: f64,
    /// Cap on synthetic objects used for the per-step distance metric.
    pub eval_objects: usize,
    /// Real dataset directory. When unset, a stub real set is generated.
    pub real_dataset: Option<PathBuf>,
    pub stub_real_images: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lambda: 0.8,
            bank_capacity: 64,
            batch_size: 16,
            objects_per_image: 2,
            feature_len: 256,
            learning_rate: 2.0,
            domain_shift: 1.0,
            eval_objects: 512,
            real_dataset: None,
            stub_real_images: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    /// Remote endpoints. Capabilities without one use the built-in stubs.
    pub endpoints: BTreeMap<ProviderKind, EndpointConfig>,
    /// Fail instead of falling back to stubs when an endpoint is missing.
    pub require_remote: bool,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    120.0
}

impl PipelineConfig {
    /// Config with defaults everywhere except the required fields.
    pub fn new(seed: u64, workdir: impl Into<PathBuf>, train_classes: &[&str]) -> Self {
        Self {
            seed,
            workdir: workdir.into(),
            train_classes: train_classes.iter().map(|s| s.to_string()).collect(),
            vocabulary: VocabularyConfig::default(),
            layouts: LayoutConfig::default(),
            curation: CurationConfig::default(),
            training: TrainingConfig::default(),
            providers: ProvidersConfig::default(),
            execution: Execution::default(),
        }
    }

    /// Reads, resolves, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.workdir.is_relative() {
            config.workdir = base.join(&config.workdir);
        }
        if let Some(real) = &config.training.real_dataset {
            if real.is_relative() {
                config.training.real_dataset = Some(base.join(real));
            }
        }
        config.apply_env(|k| std::env::var(k).ok());
        config.validate()?;
        Ok(config)
    }

    /// Sets endpoint base URLs from `DREAMFORGE_<KIND>_URL` variables.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for kind in ProviderKind::ALL {
            if let Some(url) = lookup(kind.env_var()).filter(|u| !u.trim().is_empty()) {
                self.providers
                    .endpoints
                    .entry(kind)
                    .and_modify(|e| e.base_url = url.clone())
                    .or_insert(EndpointConfig {
                        base_url: url,
                        timeout_secs: default_timeout(),
                    });
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.train_classes.is_empty() {
            return fail("train_classes must not be empty".into());
        }
        let v = &self.vocabulary;
        if v.runs < 2 {
            return fail(format!("vocabulary.runs must be >= 2, got {}", v.runs));
        }
        if v.min_hits < 2 || v.min_hits > v.runs as usize {
            return fail(format!("vocabulary.min_hits must be in 2..={}, got {}", v.runs, v.min_hits));
        }
        if !(v.tau_dedup > 0.0 && v.tau_dedup < 1.0) {
            return fail(format!("vocabulary.tau_dedup must be in (0, 1), got {}", v.tau_dedup));
        }
        let l = &self.layouts;
        if l.canvas.width == 0 || l.canvas.height == 0 {
            return fail("layouts.canvas must be non-empty".into());
        }
        if l.min_classes == 0 || l.min_classes > l.max_classes || l.max_classes > l.max_objects {
            return fail(format!(
                "need 1 <= min_classes <= max_classes <= max_objects, got {} / {} / {}",
                l.min_classes, l.max_classes, l.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&l.overlap_max) {
            return fail(format!("layouts.overlap_max must be in [0, 1], got {}", l.overlap_max));
        }
        let c = &self.curation;
        if c.per_class_cap == Some(0) || c.target_objects == 0 {
            return fail("curation caps must be >= 1".into());
        }
        let t = &self.training;
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return fail(format!("training.lambda must be >= 0, got {}", t.lambda));
        }
        if t.steps == 0 || t.bank_capacity == 0 || t.batch_size == 0 || t.objects_per_image == 0 || t.feature_len == 0 {
            return fail("training counts must be >= 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) || !(t.domain_shift >= 0.0 && t.domain_shift.is_finite()) {
            return fail("training.learning_rate must be > 0 and domain_shift >= 0".into());
        }
        if t.eval_objects == 0 {
            return fail("training.eval_objects must be >= 1".into());
        }
        if t.real_dataset.is_none() && t.stub_real_images == 0 {
            return fail("training.stub_real_images must be >= 1 without a real dataset".into());
        }
        for (kind, e) in &self.providers.endpoints {
            self.endpoint(*kind, e).validate().map_err(PipelineError::Config)?;
        }
        if self.providers.require_remote {
            if let Some(missing) = ProviderKind::ALL.iter().find(|k| !self.providers.endpoints.contains_key(k)) {
                return fail(format!("no endpoint for {missing:?} and require_remote is set"));
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, kind: ProviderKind, e: &EndpointConfig) -> ProviderEndpoint {
        ProviderEndpoint {
            kind,
            base_url: e.base_url.clone(),
            timeout_secs: e.timeout_secs,
            retries: self.providers.retry.retries,
        }
    }

    /// Hash of everything that determines synthesis output. The work
    /// directory, execution strategy, endpoint URLs and training settings
    /// are excluded, so moving a run or switching strategies keeps it
    /// resumable.
    pub fn synthesis_hash(&self) -> String {
        let remote: Vec<ProviderKind> = self.providers.endpoints.keys().copied().collect();
        checksum(&(
            self.seed,
            &self.train_classes,
            &self.vocabulary,
            &self.layouts,
            &self.curation,
            remote,
            self.providers.retry.retries,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PipelineConfig {
        PipelineConfig::new(7, "work", &["dog", "cat"])
    }

    #[test]
    fn defaults_validate() {
        base().validate().unwrap();
        let json = serde_json::to_string(&base()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, base());
    }

    #[test]
    fn minimal_document_parses() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "workdir": "w", "train_classes": ["dog"]}"#).unwrap();
        assert_eq!(c.vocabulary.runs, 5);
        assert_eq!(c.training.batch_size, 16);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"seed": 3, "workdir": "w", "train_classes": [], "bogus": 1}"#).is_err());
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        let mut c = base();
        c.vocabulary.tau_dedup = 1.0;
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        let mut c = base();
        c.training.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = base();
        c.layouts.max_classes = 9;
        assert!(c.validate().is_err());
        let mut c = base();
        c.providers.require_remote = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides_endpoints() {
        let mut c = base();
        c.apply_env(|k| (k == "DREAMFORGE_LLM_URL").then(|| "http://127.0.0.1:9".to_string()));
        assert_eq!(c.providers.endpoints[&ProviderKind::Llm].base_url, "http://127.0.0.1:9");
        assert_eq!(c.providers.endpoints.len(), 1);
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_workdir_and_execution() {
        let a = base();
        let mut b = base();
        b.workdir = "elsewhere".into();
        b.execution = Execution::Sequential;
        b.training.steps = 5;
        assert_eq!(a.synthesis_hash(), b.synthesis_hash());
        b.seed = 8;
        assert_ne!(a.synthesis_hash(), b.synthesis_hash());
    }
}
