//! Pseudo-label production for unlabeled target data.
//!
//! Two producers exist. [`kmeans_pseudo_labels`] follows the two-step
//! weighted scheme: class centroids are first computed as prediction-
//! probability-weighted feature means and every sample is assigned to its
//! nearest centroid; the centroids are then recomputed as plain means of
//! those assignments and samples are assigned once more. The second step
//! tightens centroids around the samples that actually landed on them.
//!
//! [`model_pseudo_labels`] simply takes a trained model's argmax
//! predictions. Which producer (and which model) supplies labels is a
//! pipeline decision; the [`PseudoSource`] tag records the provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{argmax_rows, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    Kmeans,
    StandardModel,
    RobustModel,
}

impl PseudoSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PseudoSource::Kmeans => "kmeans",
            PseudoSource::StandardModel => "standard_model",
            PseudoSource::RobustModel => "robust_model",
        }
    }
}

/// Labels for a whole dataset, stamped with provenance and the epoch at
/// which they were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub source: PseudoSource,
    pub epoch: usize,
}

impl PseudoLabelSet {
    /// Looks up labels for a batch of dataset indices. Indexing past the
    /// covered range is a coverage error, never a silent wrap.
    pub fn gather(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or(Error::PseudoCoverage {
                    have: self.labels.len(),
                    index: i,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Cosine distance between the vectors with a constant 1 appended,
    /// which keeps zero vectors well-defined.
    Cosine,
    Euclidean,
}

impl Default for DistanceMetric {
    fn default() -> Self {
        DistanceMetric::Cosine
    }
}

fn distance(metric: DistanceMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        DistanceMetric::Cosine => {
            let mut dot = 1.0; // the appended constant 1 * 1
            let mut na = 1.0;
            let mut nb = 1.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
        DistanceMetric::Euclidean => {
            let mut d2 = 0.0;
            for (x, y) in a.iter().zip(b) {
                let diff = x - y;
                d2 += diff * diff;
            }
            d2.sqrt()
        }
    }
}

/// Class centroids in feature space. Classes whose centroid could not be
/// formed are flagged in `empty` and never win an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    /// `[classes x feature_dim]`; rows listed in `empty` hold zeros.
    pub centroids: Tensor,
    pub empty: Vec<usize>,
    pub metric: DistanceMetric,
}

impl CentroidSet {
    /// Nearest non-empty centroid; exact ties go to the lowest class index.
    pub fn assign(&self, feature: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..self.centroids.rows() {
            if self.empty.contains(&c) {
                continue;
            }
            let d = distance(self.metric, feature, self.centroids.row(c));
            if !d.is_finite() {
                return Err(Error::NonFinite {
                    context: "centroid distance".into(),
                    index: None,
                });
            }
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((c, d)),
            }
        }
        best.map(|(c, _)| c).ok_or(Error::DegenerateClusters)
    }

    /// Mean distance from each feature row to its assigned centroid.
    pub fn mean_assignment_distance(&self, features: &Tensor, labels: &[usize]) -> f64 {
        let mut acc = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            acc += distance(self.metric, features.row(i), self.centroids.row(c));
        }
        acc / labels.len().max(1) as f64
    }
}

/// Outcome of one two-step clustering pass.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub labels: PseudoLabelSet,
    pub centroids: CentroidSet,
}

/// Two-step weighted k-means over `[n x d]` features with `[n x classes]`
/// prediction probabilities.
pub fn kmeans_pseudo_labels(
    features: &Tensor,
    probs: &Tensor,
    metric: DistanceMetric,
    epoch: usize,
) -> Result<KmeansOutcome> {
    let n = features.rows();
    let d = features.cols();
    let classes = probs.cols();
    if n == 0 {
        return Err(Error::EmptyData {
            context: "kmeans_pseudo_labels".into(),
        });
    }
    if probs.rows() != n {
        return Err(Error::Shape {
            context: "kmeans_pseudo_labels probabilities".into(),
            expected: vec![n, classes],
            got: probs.shape().to_vec(),
        });
    }
    features.ensure_finite("kmeans_pseudo_labels features")?;
    probs.ensure_finite("kmeans_pseudo_labels probabilities")?;

    // Step 1: probability-weighted centroids.
    let mut cent = vec![0.0; classes * d];
    let mut mass = vec![0.0; classes];
    for i in 0..n {
        for c in 0..classes {
            let w = probs.at(i, c);
            mass[c] += w;
            let row = features.row(i);
            for k in 0..d {
                cent[c * d + k] += w * row[k];
            }
        }
    }
    let mut empty = Vec::new();
    for c in 0..classes {
        if mass[c] == 0.0 {
            empty.push(c);
            cent[c * d..(c + 1) * d].fill(0.0);
        } else {
            for k in 0..d {
                cent[c * d + k] /= mass[c];
            }
        }
    }
    if empty.len() == classes {
        return Err(Error::DegenerateClusters);
    }
    if !empty.is_empty() {
        log::warn!(
            "weighted k-means step 1: classes {:?} have zero probability mass and are excluded",
            empty
        );
    }
    let step1 = CentroidSet {
        centroids: Tensor::new(vec![classes, d], cent)?,
        empty,
        metric,
    };
    let assign1: Vec<usize> = (0..n)
        .map(|i| step1.assign(features.row(i)))
        .collect::<Result<_>>()?;

    // Step 2: plain means of the step-1 assignments.
    let mut cent2 = vec![0.0; classes * d];
    let mut count = vec![0usize; classes];
    for (i, &c) in assign1.iter().enumerate() {
        count[c] += 1;
        let row = features.row(i);
        for k in 0..d {
            cent2[c * d + k] += row[k];
        }
    }
    let mut empty2 = Vec::new();
    for c in 0..classes {
        if count[c] == 0 {
            empty2.push(c);
            cent2[c * d..(c + 1) * d].fill(0.0);
        } else {
            for k in 0..d {
                cent2[c * d + k] /= count[c] as f64;
            }
        }
    }
    if empty2.len() == classes {
        return Err(Error::DegenerateClusters);
    }
    if !empty2.is_empty() {
        log::warn!(
            "weighted k-means step 2: classes {:?} received no assignments and are excluded",
            empty2
        );
    }
    let step2 = CentroidSet {
        centroids: Tensor::new(vec![classes, d], cent2)?,
        empty: empty2,
        metric,
    };
    let labels: Vec<usize> = (0..n)
        .map(|i| step2.assign(features.row(i)))
        .collect::<Result<_>>()?;

    Ok(KmeansOutcome {
        labels: PseudoLabelSet {
            labels,
            source: PseudoSource::Kmeans,
            epoch,
        },
        centroids: step2,
    })
}

/// Runs the model's features and probabilities through
/// [`kmeans_pseudo_labels`] in evaluation batches.
pub fn kmeans_from_model(
    model: &Model,
    x: &Tensor,
    metric: DistanceMetric,
    epoch: usize,
) -> Result<KmeansOutcome> {
    let (features, logits) = forward_batched(model, x)?;
    let probs = softmax_rows(&logits);
    kmeans_pseudo_labels(&features, &probs, metric, epoch)
}

/// Argmax predictions of `model` over `x`, tagged with `source`.
pub fn model_pseudo_labels(
    model: &Model,
    x: &Tensor,
    source: PseudoSource,
    epoch: usize,
) -> Result<PseudoLabelSet> {
    let (_, logits) = forward_batched(model, x)?;
    Ok(PseudoLabelSet {
        labels: argmax_rows(&logits)?,
        source,
        epoch,
    })
}

/// Fraction of pseudo-labels that agree with the reference labels.
pub fn pseudo_label_accuracy(pseudo: &PseudoLabelSet, truth: &[usize]) -> Result<f64> {
    if pseudo.labels.len() != truth.len() {
        return Err(Error::Shape {
            context: "pseudo_label_accuracy".into(),
            expected: vec![truth.len()],
            got: vec![pseudo.labels.len()],
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyData {
            context: "pseudo_label_accuracy".into(),
        });
    }
    let hits = pseudo
        .labels
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Forward pass in fixed-size chunks; row results are independent of the
/// chunking, this just bounds peak tape size.
pub(crate) fn forward_batched(model: &Model, x: &Tensor) -> Result<(Tensor, Tensor)> {
    const CHUNK: usize = 256;
    let n = x.rows();
    if n <= CHUNK {
        return model.forward(x);
    }
    let mut features = Vec::with_capacity(n * model.feature_dim());
    let mut logits = Vec::with_capacity(n * model.class_count());
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (f, l) = model.forward(&x.gather_rows(&idx))?;
        features.extend_from_slice(f.data());
        logits.extend_from_slice(l.data());
        start = end;
    }
    Ok((
        Tensor::new(vec![n, model.feature_dim()], features)?,
        Tensor::new(vec![n, model.class_count()], logits)?,
    ))
}
