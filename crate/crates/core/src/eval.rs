//! Retrieval evaluation: per-domain and ensemble embeddings, Recall@K.
//!
//! Protocol: every item queries every other item (self excluded), ranked by
//! dot-product similarity, ties broken in favour of the lower item index.
//! Ensemble embeddings concatenate per-domain embeddings; their similarity
//! is evaluated segment by segment (the sum of per-domain dot products, in
//! domain order), so ensemble rankings coincide exactly with rankings by
//! summed per-domain cosine similarity.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_tensors, write_tensors, CheckpointError};
use crate::data::Dataset;
use crate::model::{EmbeddingModel, ModelError};
use crate::tensor::{gemm, Tensor};
use crate::transforms::transform_batch;

/// Identifier written into every [`RecallReport`].
pub const PROTOCOL: &str = "all-queries/self-excluded/dot/lower-index-ties";

/// Row norms must be 1 within this tolerance (per segment for ensembles).
pub const UNIT_NORM_TOL: f64 = 1e-9;

const EMBED_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("Recall@{k} needs at least {} items, got {n}", k + 1)]
    TooFewItems { k: usize, n: usize },
    #[error("Recall@K needs at least one K >= 1")]
    NoKs,
    #[error("embedding matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Where an embedding matrix came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    /// One model (`model` indexes a model list) on one domain.
    Domain {
        model: usize,
        rotation: u8,
        head: usize,
    },
    /// Concatenation of per-domain embeddings, in the listed order.
    Ensemble { rotations: Vec<u8> },
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Domain { rotation, .. } => format!("{}deg", 90 * *rotation as usize),
            Provenance::Ensemble { .. } => "ensemble".into(),
        }
    }
}

/// N×D embeddings whose rows consist of `D / segment_width` unit-norm
/// segments, with item labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Tensor,
    labels: Vec<usize>,
    segment_width: usize,
    provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn new(
        values: Tensor,
        labels: Vec<usize>,
        segment_width: usize,
        provenance: Provenance,
    ) -> Result<Self, EvalError> {
        let bad = |m: String| Err(EvalError::Matrix(m));
        if values.ndim() != 2 || values.shape()[0] != labels.len() {
            return bad(format!(
                "{} labels for values of shape {:?}",
                labels.len(),
                values.shape()
            ));
        }
        let d = values.shape()[1];
        if segment_width == 0 || d % segment_width != 0 {
            return bad(format!(
                "width {d} is not a multiple of segment width {segment_width}"
            ));
        }
        for (i, row) in values.data().chunks(d).enumerate() {
            for (s, seg) in row.chunks(segment_width).enumerate() {
                let norm = seg.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return bad(format!("row {i} segment {s} has norm {norm}"));
                }
            }
        }
        Ok(Self {
            values,
            labels,
            segment_width,
            provenance,
        })
    }

    /// Concatenates per-domain matrices (same items, same order) row-wise.
    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<Self, EvalError> {
        let first = parts
            .first()
            .ok_or_else(|| EvalError::Matrix("nothing to concatenate".into()))?;
        let width = first.segment_width;
        let mut rotations = Vec::with_capacity(parts.len());
        for p in parts {
            if p.labels != first.labels || p.segment_width != width || p.num_segments() != 1 {
                return Err(EvalError::Matrix(
                    "ensemble parts must be single-segment matrices over the same items".into(),
                ));
            }
            match p.provenance {
                Provenance::Domain { rotation, .. } => rotations.push(rotation),
                Provenance::Ensemble { .. } => {
                    return Err(EvalError::Matrix("cannot nest ensembles".into()));
                }
            }
        }
        let n = first.len();
        let mut data = Vec::with_capacity(n * width * parts.len());
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        let values = Tensor::new(vec![n, width * parts.len()], data).expect("ensemble shape");
        Ok(Self {
            values,
            labels: first.labels.clone(),
            segment_width: width,
            provenance: Provenance::Ensemble { rotations },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn segment_width(&self) -> usize {
        self.segment_width
    }

    pub fn num_segments(&self) -> usize {
        self.width() / self.segment_width
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Contiguous N×segment_width copy of segment `s`.
    pub fn segment(&self, s: usize) -> Tensor {
        let (w, d) = (self.segment_width, self.width());
        let data = self
            .values
            .data()
            .chunks(d)
            .flat_map(|row| row[s * w..(s + 1) * w].iter().copied())
            .collect();
        Tensor::new(vec![self.len(), w], data).expect("segment shape")
    }

    /// N×N similarities: the per-segment Gram matrices summed in segment
    /// order.
    pub fn similarity_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let w = self.segment_width;
        let mut total = vec![0.0; n * n];
        let mut part = vec![0.0; n * n];
        for s in 0..self.num_segments() {
            let seg = self.segment(s);
            gemm(
                n,
                w,
                n,
                seg.data(),
                false,
                seg.data(),
                true,
                &mut part,
                false,
            );
            if s == 0 {
                total.copy_from_slice(&part);
            } else {
                for (t, p) in total.iter_mut().zip(&part) {
                    *t += *p;
                }
            }
        }
        total
    }
}

/// True when gallery item `a` ranks ahead of `b` for a query.
#[inline]
fn outranks(sim_a: f64, a: usize, sim_b: f64, b: usize) -> bool {
    sim_a > sim_b || (sim_a == sim_b && a < b)
}

/// Gallery (every item but `query`) in rank order for one row of a
/// similarity matrix.
pub fn rank_gallery(similarities: &[f64], query: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).filter(|&j| j != query).collect();
    order.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub protocol: String,
    /// "0deg", "90deg", ... or "ensemble".
    pub label: String,
    pub provenance: Provenance,
    pub num_queries: usize,
    /// Recall@K for each requested K.
    pub recall: BTreeMap<usize, f64>,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Recall@K for every K in `ks`.
///
/// For each query the best-ranked same-label item is found, and the query
/// counts as a hit for every K larger than that item's rank.
pub fn recall_at_k(emb: &EmbeddingMatrix, ks: &[usize]) -> Result<RecallReport, EvalError> {
    let n = emb.len();
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::NoKs);
    }
    if let Some(&k) = ks.iter().find(|&&k| k >= n) {
        return Err(EvalError::TooFewItems { k, n });
    }
    let sim = emb.similarity_matrix();
    let labels = emb.labels();
    // first_hit_rank[q] = 0-based rank of the best positive, None if none
    let mut hits_at_rank = vec![0usize; n];
    for q in 0..n {
        let row = &sim[q * n..(q + 1) * n];
        let best = (0..n)
            .filter(|&j| j != q && labels[j] == labels[q])
            .reduce(|a, b| if outranks(row[b], b, row[a], a) { b } else { a });
        if let Some(p) = best {
            let rank = (0..n)
                .filter(|&j| j != q && outranks(row[j], j, row[p], p))
                .count();
            hits_at_rank[rank] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0;
    for h in &hits_at_rank {
        acc += h;
        cumulative.push(acc);
    }
    let recall = ks
        .iter()
        .map(|&k| (k, cumulative[k - 1] as f64 / n as f64))
        .collect();
    Ok(RecallReport {
        protocol: PROTOCOL.into(),
        label: emb.provenance().label(),
        provenance: emb.provenance().clone(),
        num_queries: n,
        recall,
    })
}

/// Embeds every item of `dataset` rotated by `rotation` through the head
/// serving `head`. Row `i` is item `i`.
pub fn embed_dataset(
    model: &EmbeddingModel,
    model_id: usize,
    dataset: &Dataset,
    rotation: u8,
    head: usize,
) -> Result<EmbeddingMatrix, EvalError> {
    let n = dataset.len();
    let mut data = Vec::with_capacity(n * model.config().head_dim());
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let (batch, _) = dataset.batch(chunk);
        let e = model.embed(&transform_batch(&batch, rotation), head)?;
        data.extend_from_slice(e.data());
    }
    let width = model.config().head_dim();
    let values = Tensor::new(vec![n, width], data).expect("embedding shape");
    EmbeddingMatrix::new(
        values,
        dataset.labels().to_vec(),
        width,
        Provenance::Domain {
            model: model_id,
            rotation,
            head,
        },
    )
}

/// One ensemble member: which model, which rotation, which head.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub model: &'a EmbeddingModel,
    pub model_id: usize,
    pub rotation: u8,
    pub head: usize,
}

/// Per-member matrices and their concatenation.
pub fn ensemble_embed(
    members: &[Member<'_>],
    dataset: &Dataset,
) -> Result<(Vec<EmbeddingMatrix>, EmbeddingMatrix), EvalError> {
    let parts = members
        .iter()
        .map(|m| embed_dataset(m.model, m.model_id, dataset, m.rotation, m.head))
        .collect::<Result<Vec<_>, _>>()?;
    let ensemble = EmbeddingMatrix::concat(&parts)?;
    Ok((parts, ensemble))
}

/// Per-domain reports (Recall@K at every K) followed by the ensemble report.
pub fn evaluate_members(
    members: &[Member<'_>],
    dataset: &Dataset,
    ks: &[usize],
) -> Result<Vec<RecallReport>, EvalError> {
    let (parts, ensemble) = ensemble_embed(members, dataset)?;
    let mut reports = parts
        .iter()
        .map(|p| recall_at_k(p, ks))
        .collect::<Result<Vec<_>, _>>()?;
    reports.push(recall_at_k(&ensemble, ks)?);
    Ok(reports)
}

/// Stores an embedding matrix (plus labels) as a tensor archive.
pub fn save_embeddings(dir: &Path, stem: &str, emb: &EmbeddingMatrix) -> Result<(), EvalError> {
    let labels = Tensor::from_vec(emb.labels.iter().map(|&y| y as f64).collect());
    let meta = serde_json::json!({
        "segment_width": emb.segment_width,
        "provenance": emb.provenance,
    });
    write_tensors(
        dir,
        stem,
        &[
            ("embeddings".into(), &emb.values),
            ("labels".into(), &labels),
        ],
        meta,
    )?;
    Ok(())
}

pub fn load_embeddings(dir: &Path, stem: &str) -> Result<EmbeddingMatrix, EvalError> {
    let (manifest, tensors) = read_tensors(dir, stem)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| EvalError::Matrix(format!("archive has no tensor {name:?}")))
    };
    let values = find("embeddings")?;
    let labels = find("labels")?.data().iter().map(|&v| v as usize).collect();
    let width = manifest.metadata["segment_width"]
        .as_u64()
        .ok_or_else(|| EvalError::Matrix("missing segment_width".into()))? as usize;
    let provenance = serde_json::from_value(manifest.metadata["provenance"].clone())
        .map_err(|e| EvalError::Matrix(format!("bad provenance: {e}")))?;
    EmbeddingMatrix::new(values, labels, width, provenance)
}
