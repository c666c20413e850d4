//! Pair-based metric learning objectives over a mini-batch of unit-norm
//! embeddings, and the per-domain sum used by independent domain training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::model::{BoundParams, EmbeddingModel, ModelError};
use crate::tensor::{Result, Tensor, TensorError};
use crate::transforms::{transform_batch, DomainSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Contrastive,
    Triplet,
    MultiSimilarity,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "triplet" => Ok(Self::Triplet),
            "multi-similarity" | "ms" => Ok(Self::MultiSimilarity),
            other => Err(format!(
                "unknown loss `{other}` (expected contrastive, triplet or multi-similarity)"
            )),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Contrastive => "contrastive",
            Self::Triplet => "triplet",
            Self::MultiSimilarity => "multi-similarity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub triplet_margin: f64,
    pub triplet_reduction: Reduction,
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub ms_scale_pos: f64,
    pub ms_scale_neg: f64,
    pub ms_threshold: f64,
    pub ms_mining_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MultiSimilarity,
            triplet_margin: 0.2,
            triplet_reduction: Reduction::Mean,
            pos_margin: 1.0,
            neg_margin: 0.5,
            ms_scale_pos: 2.0,
            ms_scale_neg: 50.0,
            ms_threshold: 1.0,
            ms_mining_margin: 0.1,
        }
    }
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let margins = [
            ("triplet_margin", self.triplet_margin),
            ("pos_margin", self.pos_margin),
            ("neg_margin", self.neg_margin),
            ("ms_mining_margin", self.ms_mining_margin),
        ];
        for (name, v) in margins {
            if !(v >= 0.0) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("ms_scale_pos", self.ms_scale_pos),
            ("ms_scale_neg", self.ms_scale_neg),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// A scalar loss on a tape. `degenerate` is set when the batch offered no
/// valid tuple at all, in which case the value is a constant zero.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub value: Var,
    pub degenerate: bool,
}

fn zero(tape: &mut Tape) -> LossValue {
    LossValue {
        value: tape.constant(Tensor::scalar(0.0)),
        degenerate: true,
    }
}

fn rows(tape: &Tape, emb: Var) -> Result<usize> {
    let t = tape.value(emb);
    if t.ndim() != 2 {
        return Err(TensorError::InvalidShape {
            op: "loss",
            shape: t.shape().to_vec(),
            reason: "embeddings must be N×d".into(),
        });
    }
    Ok(t.shape()[0])
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "loss labels",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Cosine similarity matrix `E Eᵀ` of unit rows.
pub fn similarity(tape: &mut Tape, emb: Var) -> Result<Var> {
    let et = tape.transpose(emb)?;
    tape.matmul(emb, et)
}

/// Flat `(a·N + p, a·N + n)` index pairs of every valid triplet.
pub fn triplet_indices(labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for (neg, &ln) in labels.iter().enumerate() {
                if ln != labels[a] {
                    out.push((a * n + p, a * n + neg));
                }
            }
        }
    }
    out
}

/// Hinge `[d(a,p) - d(a,n) + margin]₊` over every valid triplet, with
/// Euclidean distance between embeddings.
pub fn triplet_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    margin: f64,
    reduction: Reduction,
) -> Result<LossValue> {
    let n = rows(tape, emb)?;
    check_labels(n, labels)?;
    let triplets = triplet_indices(labels);
    if triplets.is_empty() {
        log::warn!("triplet loss: batch has no valid triplet");
        return Ok(zero(tape));
    }
    let (ap, an): (Vec<usize>, Vec<usize>) = triplets.into_iter().unzip();
    let sq = tape.pairwise_sq_dist(emb)?;
    let dist = tape.sqrt(sq)?;
    let d_ap = tape.gather(dist, &ap)?;
    let d_an = tape.gather(dist, &an)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    let value = match reduction {
        Reduction::Mean => tape.reduce_mean(hinge)?,
        Reduction::Sum => tape.reduce_sum(hinge)?,
    };
    Ok(LossValue {
        value,
        degenerate: false,
    })
}

/// Mean of `[pos_margin - S]₊` over positive pairs plus mean of
/// `[S - neg_margin]₊` over negative pairs, on cosine similarity `S`.
pub fn contrastive_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let n = rows(tape, emb)?;
    check_labels(n, labels)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                pos.push(i * n + j);
            } else {
                neg.push(i * n + j);
            }
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Ok(zero(tape));
    }
    let sim = similarity(tape, emb)?;
    let mut terms = Vec::new();
    if !pos.is_empty() {
        let s = tape.gather(sim, &pos)?;
        let s = tape.scale(s, -1.0)?;
        let s = tape.add_scalar(s, cfg.pos_margin)?;
        let h = tape.relu(s)?;
        terms.push(tape.reduce_mean(h)?);
    }
    if !neg.is_empty() {
        let s = tape.gather(sim, &neg)?;
        let s = tape.add_scalar(s, -cfg.neg_margin)?;
        let h = tape.relu(s)?;
        terms.push(tape.reduce_mean(h)?);
    }
    let value = match terms[..] {
        [only] => only,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!(),
    };
    Ok(LossValue {
        value,
        degenerate: false,
    })
}

/// Positive and negative partners of anchor `a` kept by multi-similarity
/// pair mining, as column indices.
pub fn ms_mine(
    sim: &[f64],
    n: usize,
    labels: &[usize],
    a: usize,
    margin: f64,
) -> (Vec<usize>, Vec<usize>) {
    let row = &sim[a * n..(a + 1) * n];
    let pos: Vec<usize> = (0..n)
        .filter(|&j| j != a && labels[j] == labels[a])
        .collect();
    let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
    if pos.is_empty() || neg.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let min_pos = pos.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
    let max_neg = neg
        .iter()
        .map(|&j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let kept_neg = neg
        .into_iter()
        .filter(|&j| row[j] + margin > min_pos)
        .collect();
    let kept_pos = pos
        .into_iter()
        .filter(|&j| row[j] - margin < max_neg)
        .collect();
    (kept_pos, kept_neg)
}

/// Multi-similarity loss with its hard pair mining. Anchors left with an
/// empty mined positive or negative set are skipped; the loss is the mean
/// over the remaining anchors.
pub fn ms_loss(tape: &mut Tape, emb: Var, labels: &[usize], cfg: &LossConfig) -> Result<LossValue> {
    let n = rows(tape, emb)?;
    check_labels(n, labels)?;
    let sim = similarity(tape, emb)?;
    let sim_values = tape.value(sim).data().to_vec();
    let (alpha, beta, lambda) = (cfg.ms_scale_pos, cfg.ms_scale_neg, cfg.ms_threshold);

    let mut anchors = Vec::new();
    for a in 0..n {
        let (pos, neg) = ms_mine(&sim_values, n, labels, a, cfg.ms_mining_margin);
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        // (1/α) log(1 + Σ exp(-α (S - λ)))
        let p = tape.gather(sim, &pos.iter().map(|&j| a * n + j).collect::<Vec<_>>())?;
        let p = tape.scale(p, -alpha)?;
        let p = tape.add_scalar(p, alpha * lambda)?;
        let p = tape.exp(p)?;
        let p = tape.reduce_sum(p)?;
        let p = tape.add_scalar(p, 1.0)?;
        let p = tape.log(p)?;
        let p = tape.scale(p, 1.0 / alpha)?;
        // (1/β) log(1 + Σ exp(β (S - λ)))
        let q = tape.gather(sim, &neg.iter().map(|&j| a * n + j).collect::<Vec<_>>())?;
        let q = tape.scale(q, beta)?;
        let q = tape.add_scalar(q, -beta * lambda)?;
        let q = tape.exp(q)?;
        let q = tape.reduce_sum(q)?;
        let q = tape.add_scalar(q, 1.0)?;
        let q = tape.log(q)?;
        let q = tape.scale(q, 1.0 / beta)?;
        anchors.push(tape.add(p, q)?);
    }
    if anchors.is_empty() {
        return Ok(LossValue {
            value: tape.constant(Tensor::scalar(0.0)),
            degenerate: false,
        });
    }
    let mut acc = anchors[0];
    for &v in &anchors[1..] {
        acc = tape.add(acc, v)?;
    }
    let value = tape.scale(acc, 1.0 / anchors.len() as f64)?;
    Ok(LossValue {
        value,
        degenerate: false,
    })
}

/// Dispatches to the configured objective.
pub fn base_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    match cfg.kind {
        LossKind::Triplet => {
            triplet_loss(tape, emb, labels, cfg.triplet_margin, cfg.triplet_reduction)
        }
        LossKind::Contrastive => contrastive_loss(tape, emb, labels, cfg),
        LossKind::MultiSimilarity => ms_loss(tape, emb, labels, cfg),
    }
}

/// Counts of positive and negative pairs a loss call would form, split by
/// whether both rows come from the same domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub same_domain_pos: usize,
    pub same_domain_neg: usize,
    pub cross_domain_pos: usize,
    pub cross_domain_neg: usize,
}

impl PairProvenance {
    /// Tallies unordered row pairs given each row's label and domain.
    pub fn of_rows(labels: &[usize], row_domains: &[usize]) -> Self {
        let mut p = Self::default();
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                let same_dom = row_domains[i] == row_domains[j];
                match (labels[i] == labels[j], same_dom) {
                    (true, true) => p.same_domain_pos += 1,
                    (false, true) => p.same_domain_neg += 1,
                    (true, false) => p.cross_domain_pos += 1,
                    (false, false) => p.cross_domain_neg += 1,
                }
            }
        }
        p
    }

    pub fn cross_domain(&self) -> usize {
        self.cross_domain_pos + self.cross_domain_neg
    }

    pub fn merge(&mut self, other: Self) {
        self.same_domain_pos += other.same_domain_pos;
        self.same_domain_neg += other.same_domain_neg;
        self.cross_domain_pos += other.cross_domain_pos;
        self.cross_domain_neg += other.cross_domain_neg;
    }
}

/// Result of [`ideal_loss`]: the summed loss and each domain's term.
#[derive(Debug, Clone)]
pub struct DomainLosses {
    pub total: Var,
    pub per_domain: Vec<Var>,
    pub provenance: PairProvenance,
}

/// Sum over domains of the base loss on the batch rotated into that domain
/// and embedded through that domain's head. Rows from different domains
/// never meet in one loss term.
pub fn ideal_loss(
    tape: &mut Tape,
    model: &EmbeddingModel,
    bound: &BoundParams,
    batch: &Tensor,
    labels: &[usize],
    domains: &DomainSet,
    cfg: &LossConfig,
) -> std::result::Result<DomainLosses, ModelError> {
    let views: Vec<Tensor> = domains
        .rotations()
        .iter()
        .map(|&rot| transform_batch(batch, rot))
        .collect();
    ideal_loss_on_views(tape, model, bound, &views, labels, cfg)
}

/// Like [`ideal_loss`], with the domain-`i` input batch given directly as
/// `views[i]` (already transformed).
pub fn ideal_loss_on_views(
    tape: &mut Tape,
    model: &EmbeddingModel,
    bound: &BoundParams,
    views: &[Tensor],
    labels: &[usize],
    cfg: &LossConfig,
) -> std::result::Result<DomainLosses, ModelError> {
    if views.is_empty() {
        return Err(ModelError::Config(
            "at least one domain view is required".into(),
        ));
    }
    let mut per_domain = Vec::with_capacity(views.len());
    let mut provenance = PairProvenance::default();
    for (i, view) in views.iter().enumerate() {
        let emb = model.embed_on_tape(tape, bound, view, i)?;
        per_domain.push(base_loss(tape, emb, labels, cfg)?.value);
        provenance.merge(PairProvenance::of_rows(labels, &vec![i; labels.len()]));
    }
    let mut total = per_domain[0];
    for &term in &per_domain[1..] {
        total = tape.add(total, term)?;
    }
    Ok(DomainLosses {
        total,
        per_domain,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap(), true)
    }

    #[test]
    fn triplet_inactive_hinge_is_zero() {
        let mut tape = Tape::new();
        let e = emb(
            &mut tape,
            &[
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![-1.0, 0.0],
            ],
        );
        let l = triplet_loss(&mut tape, e, &[0, 0, 1, 1], 0.2, Reduction::Mean).unwrap();
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn triplet_coincident_points_give_margin() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]);
        let l = triplet_loss(&mut tape, e, &[0, 0, 1], 0.2, Reduction::Mean).unwrap();
        assert!((tape.value(l.value).item() - 0.2).abs() < 1e-15);
        tape.backward(l.value).unwrap();
        assert!(tape.grad(e).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn triplet_without_triplets_is_degenerate() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let l = triplet_loss(&mut tape, e, &[0, 1, 2], 0.2, Reduction::Mean).unwrap();
        assert!(l.degenerate);
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn contrastive_identical_same_class_is_zero() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &vec![vec![0.6, 0.8]; 4]);
        let l = contrastive_loss(&mut tape, e, &[3, 3, 3, 3], &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn contrastive_orthogonal_negative_is_zero() {
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_loss(&mut tape, e, &[0, 1], &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn ms_separated_batch_mines_nothing() {
        let mut tape = Tape::new();
        let e = emb(
            &mut tape,
            &[
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ],
        );
        let l = ms_loss(&mut tape, e, &[0, 0, 1, 1], &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn ms_positive_at_threshold_gives_log2_over_alpha() {
        // anchors 0 and 1 coincide (S = 1 = λ); the negative is close enough
        // (S = 0.95 > 1 - ε) for the positive to be mined.
        let s = 0.95f64;
        let n = vec![s, (1.0 - s * s).sqrt()];
        let mut tape = Tape::new();
        let e = emb(&mut tape, &[vec![1.0, 0.0], vec![1.0, 0.0], n]);
        let cfg = LossConfig::default();
        let l = ms_loss(&mut tape, e, &[0, 0, 1], &cfg).unwrap();
        let neg_term = (1.0 + (cfg.ms_scale_neg * (s - 1.0)).exp()).ln() / cfg.ms_scale_neg;
        let expected = 2f64.ln() / cfg.ms_scale_pos + neg_term;
        assert!((tape.value(l.value).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("ms".parse::<LossKind>().unwrap(), LossKind::MultiSimilarity);
        assert!("proxy".parse::<LossKind>().is_err());
        assert_eq!(LossKind::Triplet.to_string(), "triplet");
    }

    #[test]
    fn provenance_counts_pairs() {
        let p = PairProvenance::of_rows(&[0, 0, 1], &[0, 1, 1]);
        assert_eq!(p.cross_domain_pos, 1);
        assert_eq!(p.cross_domain_neg, 1);
        assert_eq!(p.same_domain_neg, 1);
        assert_eq!(p.same_domain_pos, 0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            ms_scale_neg: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
