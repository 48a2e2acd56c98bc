//! Desk-scale training simulation.
//!
//! A toy extractor stands in for the segmentation backbone. Every object
//! gets a fixed descriptor `[class one-hot, x/W, y/H, w/W, h/H, mean mask
//! confidence]`, projected to `feature_len` dimensions by a fixed Gaussian
//! matrix `P`. Real features are `P d`. Synthetic features pass through an
//! extra learnable map, `W P d`, where `W` starts as the identity plus a
//! random perturbation that plays the role of the synthetic-real domain
//! shift. The segmentation loss is a constant, so the alignment term is the
//! only thing that moves `W`.
//!
//! Each step samples objects and images, computes the loss against the
//! prototypes as they were before the step, pushes the step's real features
//! into the banks, then takes a gradient step on `W`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{sra_grad, sra_loss, total_loss, AlignmentError, FeatureVec, MemoryBanks};
use crate::curation::object_uncertainty;
use crate::dataset::{ImageRecord, ObjectInstance, Source, Vocabulary};
use crate::exec::Execution;
use crate::hashing::derive_seed;

use super::config::TrainingConfig;
use super::PipelineError;

/// Constant stand-in for the segmentation loss.
pub const SURROGATE_SEG_LOSS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("synthetic dataset has no objects; run `dreamforge synth` first")]
    EmptySynthetic,
    #[error("loss diverged at step {step}")]
    Diverged { step: usize, trace: Box<TrainingTrace> },
    #[error("invalid training parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidParameter(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

/// Position of an object in a record slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectRef {
    pub image: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchImage {
    pub source: Source,
    /// Index into the real or synthetic record slice.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub synthetic: Vec<ObjectRef>,
    pub images: Vec<BatchImage>,
}

/// Samples `objects_per_image * batch_size` synthetic objects and
/// `batch_size` images from the union of both sets, uniformly and without
/// replacement. Smaller pools are returned whole.
pub fn sample_batch(
    real: &[ImageRecord],
    synth: &[ImageRecord],
    objects_per_image: usize,
    batch_size: usize,
    step_seed: u64,
) -> Result<Batch, TrainError> {
    if batch_size == 0 || objects_per_image == 0 {
        return Err(TrainError::InvalidParameter("batch size and objects per image must be >= 1".into()));
    }
    let objects: Vec<ObjectRef> = synth
        .iter()
        .enumerate()
        .flat_map(|(image, r)| (0..r.objects.len()).map(move |object| ObjectRef { image, object }))
        .collect();
    if objects.is_empty() {
        return Err(TrainError::EmptySynthetic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let want = objects_per_image * batch_size;
    if objects.len() < want {
        log::warn!("only {} synthetic objects available, {want} requested", objects.len());
    }
    let synthetic = rand::seq::index::sample(&mut rng, objects.len(), want.min(objects.len()))
        .into_iter()
        .map(|i| objects[i])
        .collect();
    let pool = real.len() + synth.len();
    let images = rand::seq::index::sample(&mut rng, pool, batch_size.min(pool))
        .into_iter()
        .map(|i| {
            if i < real.len() {
                BatchImage {
                    source: Source::Real,
                    index: i,
                }
            } else {
                BatchImage {
                    source: Source::Synthetic,
                    index: i - real.len(),
                }
            }
        })
        .collect();
    Ok(Batch { synthetic, images })
}

/// Fixed per-object descriptor; `None` if the mask is empty.
pub fn descriptor(obj: &ObjectInstance, width: u32, height: u32, vocab: &Vocabulary) -> Option<Vec<f64>> {
    let class = vocab.index_of(obj.category_id)?;
    let confidence = 1.0 - object_uncertainty(obj).ok()?;
    let mut d = vec![0.0; vocab.len() + 5];
    d[class] = 1.0;
    let (w, h) = (f64::from(width), f64::from(height));
    let tail = &mut d[vocab.len()..];
    tail[0] = f64::from(obj.bbox.x) / w;
    tail[1] = f64::from(obj.bbox.y) / h;
    tail[2] = f64::from(obj.bbox.w) / w;
    tail[3] = f64::from(obj.bbox.h) / h;
    tail[4] = confidence;
    Some(d)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn gaussian(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `self * other`, rows computed under `exec`.
    fn mul(&self, other: &Matrix, exec: Execution) -> Matrix {
        let mut data = vec![0.0; self.rows * other.cols];
        exec.for_each_chunk_mut(&mut data, other.cols, |r, out| {
            for (k, a) in self.row(r).iter().enumerate() {
                if *a != 0.0 {
                    out.iter_mut().zip(other.row(k)).for_each(|(o, b)| *o += a * b);
                }
            }
        });
        Matrix {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean alignment loss over synthetic objects whose class had a prototype.
    pub sra_loss: f64,
    pub total_loss: f64,
    pub sra_objects: usize,
    pub real_features: usize,
    /// Mean over classes of the mean synthetic-to-prototype cosine distance
    /// on the evaluation objects, after this step's updates.
    pub mean_cosine_distance: Option<f64>,
    pub classes_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub lambda: f64,
    pub feature_len: usize,
    pub eval_objects: usize,
    pub steps: Vec<StepMetrics>,
    /// Frobenius norm of the change in the learnable map.
    pub parameter_delta: f64,
}

impl TrainingTrace {
    pub fn first_distance(&self) -> Option<f64> {
        self.steps.iter().find_map(|s| s.mean_cosine_distance)
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.mean_cosine_distance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sra_loss,total_loss,sra_objects,real_features,mean_cosine_distance,classes_evaluated\n");
        for s in &self.steps {
            let d = s.mean_cosine_distance.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step, s.sra_loss, s.total_loss, s.sra_objects, s.real_features, d, s.classes_evaluated
            ));
        }
        out
    }
}

struct Prepared {
    class_id: u32,
    /// Descriptor.
    d: Vec<f64>,
    /// `P d`.
    x: Vec<f64>,
}

fn prepare(records: &[ImageRecord], vocab: &Vocabulary, projection: &Matrix, exec: Execution) -> Vec<Vec<Option<Prepared>>> {
    exec.map(records, |r| {
        r.objects
            .iter()
            .map(|o| {
                descriptor(o, r.width, r.height, vocab).map(|d| Prepared {
                    class_id: o.category_id,
                    x: projection.apply(&d),
                    d,
                })
            })
            .collect()
    })
}

/// Runs `config.steps` steps. Deterministic for a given seed regardless of
/// the execution strategy.
pub fn simulate_training(
    real: &[ImageRecord],
    synth: &[ImageRecord],
    vocab: &Vocabulary,
    config: &TrainingConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainingTrace, TrainError> {
    if config.steps == 0 || config.feature_len == 0 || config.bank_capacity == 0 || config.eval_objects == 0 {
        return Err(TrainError::InvalidParameter("steps, feature_len, bank_capacity and eval_objects must be >= 1".into()));
    }
    if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
        return Err(TrainError::InvalidParameter(format!("lambda must be >= 0, got {}", config.lambda)));
    }
    let l = config.feature_len;
    let dim = vocab.len() + 5;
    let projection = Matrix::gaussian(l, dim, 1.0 / (dim as f64).sqrt(), derive_seed(seed, "projection", 0));
    let mut map = Matrix::gaussian(l, l, config.domain_shift / (l as f64).sqrt(), derive_seed(seed, "domain-shift", 0));
    for i in 0..l {
        map.data[i * l + i] += 1.0;
    }
    let initial_map = map.clone();

    let real_prep = prepare(real, vocab, &projection, exec);
    let synth_prep = prepare(synth, vocab, &projection, exec);

    // Evaluation set: synthetic objects of training classes.
    let train_ids: std::collections::BTreeSet<u32> = vocab.train().map(|c| c.id).collect();
    let mut eval: Vec<&Prepared> = synth_prep
        .iter()
        .flatten()
        .flatten()
        .filter(|p| train_ids.contains(&p.class_id))
        .collect();
    if eval.len() > config.eval_objects {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval-subset", 0));
        let mut picked = rand::seq::index::sample(&mut rng, eval.len(), config.eval_objects).into_vec();
        picked.sort_unstable();
        eval = picked.into_iter().map(|i| eval[i]).collect();
    }

    let mut banks = MemoryBanks::new(config.bank_capacity, l)?;
    let mut trace = TrainingTrace {
        lambda: config.lambda,
        feature_len: l,
        eval_objects: eval.len(),
        steps: Vec::with_capacity(config.steps),
        parameter_delta: 0.0,
    };

    for step in 1..=config.steps {
        let batch = sample_batch(
            real,
            synth,
            config.objects_per_image,
            config.batch_size,
            derive_seed(seed, "train-step", step as u64),
        )?;
        let prototypes = banks.prototypes();
        let effective = map.mul(&projection, exec);

        // Alignment loss against the prototypes from before this step.
        let mut losses = Vec::new();
        let mut grads: Vec<(Vec<f64>, &[f64])> = Vec::new();
        for r in &batch.synthetic {
            let Some(p) = &synth_prep[r.image][r.object] else { continue };
            let Some(proto) = prototypes.get(&p.class_id) else { continue };
            let f = effective.apply(&p.d);
            match (sra_loss(&f, &proto.values), sra_grad(&f, &proto.values)) {
                (Ok(loss), Ok(g)) => {
                    losses.push(loss);
                    grads.push((g, &p.x));
                }
                (Err(AlignmentError::ZeroNorm), _) => log::debug!("step {step}: zero-norm feature skipped"),
                (Err(e), _) | (_, Err(e)) => {
                    log::error!("step {step}: {e}");
                    losses.push(f64::NAN);
                }
            }
        }
        let sra = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let total = total_loss(SURROGATE_SEG_LOSS, sra, config.lambda);

        // Bank update from the real images of the batch.
        let mut real_features = 0;
        for img in batch.images.iter().filter(|i| i.source == Source::Real) {
            for p in real_prep[img.index].iter().flatten() {
                banks.update(FeatureVec::real(p.x.clone(), p.class_id)?)?;
                real_features += 1;
            }
        }

        // Gradient step on the synthetic map; the surrogate segmentation
        // loss contributes nothing.
        if config.lambda > 0.0 && !grads.is_empty() && total.is_finite() {
            let scale = config.learning_rate * config.lambda / grads.len() as f64;
            for (g, x) in &grads {
                for (i, gi) in g.iter().enumerate() {
                    let row = &mut map.data[i * l..(i + 1) * l];
                    row.iter_mut().zip(x.iter()).for_each(|(w, xj)| *w -= scale * gi * xj);
                }
            }
        }

        let (distance, classes_evaluated) = evaluate(&map, &projection, &banks, &eval, exec);
        trace.steps.push(StepMetrics {
            step,
            sra_loss: sra,
            total_loss: total,
            sra_objects: losses.len(),
            real_features,
            mean_cosine_distance: distance,
            classes_evaluated,
        });
        let diverged = !total.is_finite() || distance.is_some_and(|d| !d.is_finite()) || map.data.iter().any(|w| !w.is_finite());
        if diverged {
            trace.parameter_delta = f64::NAN;
            return Err(TrainError::Diverged {
                step,
                trace: Box::new(trace),
            });
        }
    }
    trace.parameter_delta = map
        .data
        .iter()
        .zip(&initial_map.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(trace)
}

fn evaluate(map: &Matrix, projection: &Matrix, banks: &MemoryBanks, eval: &[&Prepared], exec: Execution) -> (Option<f64>, usize) {
    let prototypes = banks.prototypes();
    let effective = map.mul(projection, exec);
    let distances = exec.map(eval, |p| {
        let proto = prototypes.get(&p.class_id)?;
        match sra_loss(&effective.apply(&p.d), &proto.values) {
            Ok(d) => Some(d),
            Err(AlignmentError::ZeroNorm) => None,
            Err(_) => Some(f64::NAN),
        }
    });
    let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (p, d) in eval.iter().zip(distances) {
        if let Some(d) = d {
            let e = per_class.entry(p.class_id).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
        }
    }
    if per_class.is_empty() {
        return (None, 0);
    }
    let mean = per_class.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_class.len() as f64;
    (Some(mean), per_class.len())
}
