//! Episodic few-shot evaluation: episode sampling, Nearest-Class-Mean
//! classification in float and quantized variants, and accuracy statistics.
//!
//! A class center is the mean of its support feature vectors; a query goes to
//! the class whose center is nearest in Euclidean distance, ties to the
//! lowest class index. In quantized mode inputs, means, and difference
//! vectors are rounded onto the activation grid while squared-distance
//! accumulation stays exact.

use crate::backbone::{forward, BackboneModel, ForwardMode};
use crate::error::{QfxError, Result};
use crate::fixedpoint::{self, QFormat};
use crate::io::ImageDataset;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One n-way k-shot task in feature space.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// `support[i]` holds the `shot` feature vectors of class i.
    pub support: Vec<Vec<Tensor>>,
    /// (feature vector, true class index in 0..way).
    pub queries: Vec<(Tensor, usize)>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 {
            return Err(QfxError::Config("episode needs way >= 1 and shot >= 1".into()));
        }
        if self.support.len() != self.way {
            return Err(QfxError::Config(format!(
                "episode has {} support sets for way {}",
                self.support.len(),
                self.way
            )));
        }
        let dim = self.feature_dim();
        for (i, set) in self.support.iter().enumerate() {
            if set.len() != self.shot {
                return Err(QfxError::Config(format!(
                    "class {i} has {} support vectors, expected {}",
                    set.len(),
                    self.shot
                )));
            }
            for v in set {
                if v.shape() != [dim] {
                    return Err(QfxError::ShapeMismatch {
                        op: "Episode".into(),
                        detail: format!("support vector shape {:?} != [{dim}]", v.shape()),
                    });
                }
            }
        }
        for (v, label) in &self.queries {
            if v.shape() != [dim] {
                return Err(QfxError::ShapeMismatch {
                    op: "Episode".into(),
                    detail: format!("query vector shape {:?} != [{dim}]", v.shape()),
                });
            }
            if *label >= self.way {
                return Err(QfxError::Config(format!(
                    "query label {label} out of range for way {}",
                    self.way
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.support
            .first()
            .and_then(|s| s.first())
            .map(|t| t.len())
            .unwrap_or(0)
    }
}

/// Per-class barycenters, one row per class.
#[derive(Debug, Clone)]
pub struct ClassCenters {
    pub centers: Tensor,
}

/// Accuracy over an episode stream: mean percentage and 95% normal-
/// approximation half-width (1.96 * s / sqrt(episodes), sample std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStat {
    pub mean: f64,
    pub half_width: f64,
    pub episodes: usize,
    pub runs: usize,
}

impl fmt::Display for AccuracyStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}\u{b1}{:.2}", self.mean, self.half_width)
    }
}

/// Compute the class barycenters of an episode. In quantized mode the support
/// vectors are rounded onto the grid first and the means are rounded after
/// exact averaging.
pub fn class_means(episode: &Episode, quant: Option<QFormat>) -> Result<ClassCenters> {
    episode.validate()?;
    let d = episode.feature_dim();
    let mut centers = Tensor::zeros(&[episode.way, d]);
    for (i, set) in episode.support.iter().enumerate() {
        let row = &mut centers.data_mut()[i * d..][..d];
        for v in set {
            match quant {
                Some(fmt) => {
                    for (acc, &x) in row.iter_mut().zip(v.data()) {
                        *acc += fixedpoint::quantize(x, fmt)?;
                    }
                }
                None => {
                    for (acc, &x) in row.iter_mut().zip(v.data()) {
                        *acc += x;
                    }
                }
            }
        }
        for acc in row.iter_mut() {
            *acc /= episode.shot as f64;
        }
    }
    if let Some(fmt) = quant {
        centers = tensor::quantize_tensor(&centers, fmt)?;
    }
    Ok(ClassCenters { centers })
}

/// Nearest-center classification: argmin over squared Euclidean distance,
/// ties broken toward the lowest class index. In quantized mode the query and
/// the per-element differences are rounded onto the grid; squares and sums
/// stay exact.
pub fn classify(z: &Tensor, centers: &ClassCenters, quant: Option<QFormat>) -> Result<usize> {
    let d = z.len();
    let n = centers.centers.shape()[0];
    if centers.centers.shape() != [n, d] {
        return Err(QfxError::ShapeMismatch {
            op: "classify".into(),
            detail: format!(
                "query dim {d} vs centers shape {:?}",
                centers.centers.shape()
            ),
        });
    }
    let zq: Vec<f64> = match quant {
        Some(fmt) => {
            let mut out = Vec::with_capacity(d);
            for &x in z.data() {
                out.push(fixedpoint::quantize(x, fmt)?);
            }
            out
        }
        None => z.data().to_vec(),
    };
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let crow = &centers.centers.data()[i * d..][..d];
        let mut dist = 0.0;
        for (&a, &b) in zq.iter().zip(crow) {
            let diff = match quant {
                Some(fmt) => fixedpoint::quantize(a - b, fmt)?,
                None => a - b,
            };
            dist += diff * diff;
        }
        if dist < best.0 {
            best = (dist, i);
        }
    }
    Ok(best.1)
}

/// Fraction of queries classified correctly, in [0, 1].
pub fn episode_accuracy(episode: &Episode, quant: Option<QFormat>) -> Result<f64> {
    let centers = class_means(episode, quant)?;
    if episode.queries.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (z, label) in &episode.queries {
        if classify(z, &centers, quant)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.queries.len() as f64)
}

/// Aggregate NCM accuracy over an episode stream.
pub fn evaluate_episodes(episodes: &[Episode], quant: Option<QFormat>) -> Result<AccuracyStat> {
    if episodes.is_empty() {
        return Err(QfxError::Config("episode stream is empty".into()));
    }
    let accs: Vec<f64> = episodes
        .iter()
        .map(|e| episode_accuracy(e, quant))
        .collect::<Result<_>>()?;
    let e = accs.len();
    let mean = accs.iter().sum::<f64>() / e as f64;
    let half_width = if e > 1 {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1) as f64;
        1.96 * (var / e as f64).sqrt()
    } else {
        0.0
    };
    Ok(AccuracyStat {
        mean: 100.0 * mean,
        half_width: 100.0 * half_width,
        episodes: e,
        runs: 1,
    })
}

/// Labeled feature vectors grouped by class; the pool episodes sample from.
#[derive(Debug, Clone)]
pub struct FeaturePool {
    /// `features[c]` holds the vectors of class c.
    pub features: Vec<Vec<Tensor>>,
}

impl FeaturePool {
    /// Group a feature matrix [m, d] by label.
    pub fn from_rows(rows: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let (m, d) = match rows.shape() {
            [m, d] => (*m, *d),
            other => {
                return Err(QfxError::ShapeMismatch {
                    op: "FeaturePool".into(),
                    detail: format!("expected [m, d] feature rows, got {other:?}"),
                })
            }
        };
        if labels.len() != m {
            return Err(QfxError::Config(format!(
                "{} labels for {m} feature rows",
                labels.len()
            )));
        }
        let mut features = vec![Vec::new(); classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(QfxError::Config(format!("label {label} >= classes {classes}")));
            }
            features[label].push(Tensor::from_vec(
                &[d],
                rows.data()[i * d..][..d].to_vec(),
            )?);
        }
        Ok(FeaturePool { features })
    }

    pub fn classes(&self) -> usize {
        self.features.len()
    }
}

/// Index plan for one episode: which classes and which within-class samples.
/// Plans depend only on (class sizes, protocol, seed), so different models
/// evaluate on identical episode streams.
#[derive(Debug, Clone)]
pub struct EpisodePlan {
    pub classes: Vec<usize>,
    /// `picks[i]` are shot+query sample indices drawn without replacement
    /// from class `classes[i]`; the first `shot` are support.
    pub picks: Vec<Vec<usize>>,
}

/// Deterministic episode index plans for an n-way k-shot q-query protocol.
pub fn plan_episodes(
    class_sizes: &[usize],
    way: usize,
    shot: usize,
    queries: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<EpisodePlan>> {
    if way == 0 || shot == 0 || queries == 0 || count == 0 {
        return Err(QfxError::Config(
            "way, shot, queries, and episode count must be positive".into(),
        ));
    }
    if class_sizes.len() < way {
        return Err(QfxError::Config(format!(
            "{} classes cannot form {way}-way episodes",
            class_sizes.len()
        )));
    }
    let need = shot + queries;
    for (c, &size) in class_sizes.iter().enumerate() {
        if size < need {
            return Err(QfxError::Config(format!(
                "class {c} has {size} samples, episodes need shot+queries = {need}"
            )));
        }
    }
    let mut plans = Vec::with_capacity(count);
    for ep in 0..count {
        let mut rng = Rng::substream(seed, 0xE915_0DE0 ^ ep as u64);
        let classes = rng.sample_without_replacement(class_sizes.len(), way);
        let picks = classes
            .iter()
            .map(|&c| rng.sample_without_replacement(class_sizes[c], need))
            .collect();
        plans.push(EpisodePlan { classes, picks });
    }
    Ok(plans)
}

/// Instantiate a plan against a feature pool.
pub fn materialize_episode(plan: &EpisodePlan, pool: &FeaturePool, shot: usize) -> Episode {
    let way = plan.classes.len();
    let mut support = Vec::with_capacity(way);
    let mut queries = Vec::new();
    for (slot, (&class, picks)) in plan.classes.iter().zip(&plan.picks).enumerate() {
        let vectors = &pool.features[class];
        support.push(picks[..shot].iter().map(|&i| vectors[i].clone()).collect());
        for &i in &picks[shot..] {
            queries.push((vectors[i].clone(), slot));
        }
    }
    Episode {
        way,
        shot,
        support,
        queries,
    }
}

/// Sample `count` episodes from a feature pool, uniformly without
/// replacement within each episode, deterministically per seed.
pub fn sample_episodes(
    pool: &FeaturePool,
    way: usize,
    shot: usize,
    queries: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let sizes: Vec<usize> = pool.features.iter().map(Vec::len).collect();
    let plans = plan_episodes(&sizes, way, shot, queries, count, seed)?;
    Ok(plans
        .iter()
        .map(|p| materialize_episode(p, pool, shot))
        .collect())
}

/// A transformation applied to the [m, d] feature matrix before episode
/// sampling (e.g. the PTQ standardization).
pub trait FeatureTransform {
    fn apply(&self, features: &Tensor) -> Result<Tensor>;
}

/// Run the backbone over every dataset image (in dataset order, batched) and
/// return the [m, feature_dim] feature matrix.
pub fn extract_features(
    model: &BackboneModel,
    data: &ImageDataset,
    mode: ForwardMode,
    batch_size: usize,
) -> Result<Tensor> {
    if data.is_empty() {
        return Err(QfxError::Dataset("feature extraction over empty dataset".into()));
    }
    let d = model.feature_dim;
    let mut rows = Vec::with_capacity(data.len() * d);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let feats = forward(model, &batch, mode)?;
        rows.extend_from_slice(feats.data());
    }
    Tensor::from_vec(&[data.len(), d], rows)
}

/// Few-shot evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            way: 5,
            shot: 5,
            queries: 15,
            episodes: 2000,
        }
    }
}

/// End-to-end evaluation: extract features of the novel split once (forwards
/// are deterministic, so per-image features are shared across the episodes
/// that reuse a sample), apply the optional preprocess, sample the seeded
/// episode stream, and aggregate NCM accuracy.
pub fn evaluate(
    model: &BackboneModel,
    data: &ImageDataset,
    mode: ForwardMode,
    preprocess: Option<&dyn FeatureTransform>,
    protocol: &Protocol,
    seed: u64,
) -> Result<AccuracyStat> {
    let mut features = extract_features(model, data, mode, 32)?;
    if let Some(t) = preprocess {
        features = t.apply(&features)?;
    }
    let pool = FeaturePool::from_rows(&features, &data.labels, data.meta.classes)?;
    let episodes = sample_episodes(
        &pool,
        protocol.way,
        protocol.shot,
        protocol.queries,
        protocol.episodes,
        seed,
    )?;
    let quant = match mode {
        ForwardMode::Quantized(qc) if qc.enabled => Some(qc.activation_format),
        _ => None,
    };
    evaluate_episodes(&episodes, quant)
}
