//! Retrieval (mAP, Precision@k) and classification evaluation.

use std::cmp::Ordering;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::mi_divergence_measure;
use crate::nn::Model;
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating a model over a dataset.
pub const EVAL_BATCH: usize = 256;

/// Default retrieval cutoff for 10-class datasets.
pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
}

/// Row-major `n × d` embeddings with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    rows: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * labels.len() {
            return Err(Error::shape(
                "embedding set",
                format!("{} values for {} labels of dim {dim}", rows.len(), labels.len()),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embeddings".into()));
        }
        Ok(EmbeddingSet { rows, dim, labels })
    }

    /// From an `[n, d]` tensor.
    pub fn from_tensor(t: &Tensor, labels: Vec<usize>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("embedding set", format!("expected [n, d], got {:?}", t.shape())));
        }
        Self::new(t.data().iter().map(|&v| v as f64).collect(), t.dim(1), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Gallery order for query `q`: every other index by descending
    /// similarity, ties by ascending index.
    pub fn ranking(&self, q: usize, similarity: Similarity) -> Vec<usize> {
        let scores = self.scores(q, similarity);
        let mut order: Vec<usize> = (0..self.len()).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
            Some(Ordering::Equal) | None => a.cmp(&b),
            Some(o) => o,
        });
        order
    }

    fn scores(&self, q: usize, similarity: Similarity) -> Vec<f64> {
        let query = self.row(q);
        match similarity {
            Similarity::Cosine => {
                let unit = |r: &[f64]| {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        1.0 / norm
                    } else {
                        0.0
                    }
                };
                let qs = unit(query);
                (0..self.len())
                    .map(|j| {
                        let r = self.row(j);
                        let dot: f64 = query.iter().zip(r).map(|(a, b)| a * b).sum();
                        dot * qs * unit(r)
                    })
                    .collect()
            }
            Similarity::Euclidean => (0..self.len())
                .map(|j| {
                    -query
                        .iter()
                        .zip(self.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        }
    }
}

/// mAP and Precision@k from one ranking pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub precision_at_k: f64,
    pub k: usize,
    /// Queries that had at least one relevant gallery item.
    pub map_queries: usize,
}

/// Leave-one-out retrieval over the set. Queries with no relevant gallery
/// item are excluded from mAP; Precision@k averages over every query and
/// divides by `min(k, gallery size)`.
pub fn retrieval_scores(emb: &EmbeddingSet, k: usize, similarity: Similarity) -> Result<RetrievalScores> {
    let n = emb.len();
    if n < 2 {
        return Err(Error::Parameter(format!("retrieval needs at least 2 samples, got {n}")));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    let mut ap_sum = 0.0;
    let mut map_queries = 0usize;
    let mut p_sum = 0.0;
    let cutoff = k.min(n - 1);
    for q in 0..n {
        let label = emb.labels[q];
        let ranking = emb.ranking(q, similarity);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut hits_at_k = 0usize;
        for (rank, &j) in ranking.iter().enumerate() {
            if emb.labels[j] == label {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
            if rank + 1 == cutoff {
                hits_at_k = hits;
            }
        }
        p_sum += hits_at_k as f64 / cutoff as f64;
        if hits > 0 {
            ap_sum += precision_sum / hits as f64;
            map_queries += 1;
        }
    }
    if map_queries == 0 {
        return Err(Error::Parameter("no query has a relevant gallery item".into()));
    }
    Ok(RetrievalScores {
        map: ap_sum / map_queries as f64,
        precision_at_k: p_sum / n as f64,
        k,
        map_queries,
    })
}

pub fn mean_average_precision(emb: &EmbeddingSet) -> Result<f64> {
    Ok(retrieval_scores(emb, 1, Similarity::Cosine)?.map)
}

pub fn precision_at_k(emb: &EmbeddingSet, k: usize) -> Result<f64> {
    Ok(retrieval_scores(emb, k, Similarity::Cosine)?.precision_at_k)
}

/// Top-1 accuracy of `[n, C]` logits; argmax ties go to the lowest class.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "accuracy",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.dim(1);
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Eval-mode accuracy over the dataset.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let logits = map_batches(dataset, |x| model.logits(x))?;
    accuracy_from_logits(&logits, dataset.labels())
}

/// Eval-mode penultimate embeddings of the whole dataset.
pub fn embed_dataset(model: &Model, dataset: &Dataset) -> Result<EmbeddingSet> {
    let feats = map_batches(dataset, |x| model.embed(x))?;
    EmbeddingSet::from_tensor(&feats, dataset.labels().to_vec())
}

fn map_batches(dataset: &Dataset, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = dataset.len();
    let mut out = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let images = dataset.images().slice_rows(start, (start + EVAL_BATCH).min(n))?;
        let r = f(&images)?;
        width = r.dim(1);
        out.extend_from_slice(r.data());
    }
    Tensor::new(vec![n, width], out)
}

/// Everything reported for one trained student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub map: f64,
    pub precision_at_k: f64,
    pub k: usize,
    pub accuracy: f64,
    /// PKT divergence to the reference model's penultimate features.
    pub mi_divergence: Option<f64>,
    pub parameters: usize,
    /// Mean eval-mode forward time per sample, milliseconds.
    pub latency_ms: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "samples,map,precision_at_k,k,accuracy,mi_divergence,parameters,latency_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.6},{},{},{:.6}",
            self.samples,
            self.map,
            self.precision_at_k,
            self.k,
            self.accuracy,
            self.mi_divergence.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.parameters,
            self.latency_ms
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "map={:.6}", self.map)?;
        writeln!(f, "precision_at_{}={:.6}", self.k, self.precision_at_k)?;
        writeln!(f, "accuracy={:.6}", self.accuracy)?;
        if let Some(mi) = self.mi_divergence {
            writeln!(f, "mi_divergence={mi:.6}")?;
        }
        writeln!(f, "parameters={}", self.parameters)?;
        write!(f, "latency_ms={:.6}", self.latency_ms)
    }
}

/// Retrieval metrics, accuracy, parameter count and latency of `student`,
/// plus its information-flow divergence from `teacher` when one is given.
pub fn evaluate_all(student: &Model, teacher: Option<&Model>, dataset: &Dataset, k: usize) -> Result<EvalReport> {
    let started = Instant::now();
    let feats = map_batches(dataset, |x| student.embed(x))?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3 / dataset.len().max(1) as f64;
    let emb = EmbeddingSet::from_tensor(&feats, dataset.labels().to_vec())?;
    let scores = retrieval_scores(&emb, k, Similarity::Cosine)?;
    let acc = accuracy(student, dataset)?;
    let mi = teacher.map(|t| mi_divergence_measure(t, student, dataset)).transpose()?;
    Ok(EvalReport {
        samples: dataset.len(),
        map: scores.map,
        precision_at_k: scores.precision_at_k,
        k,
        accuracy: acc,
        mi_divergence: mi,
        parameters: student.param_count(),
        latency_ms,
    })
}
