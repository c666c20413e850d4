//! Exact properties checked against brute-force oracles. Each check returns
//! a one-line summary on success and a description of the first violation
//! otherwise.

use std::collections::HashMap;
use std::fs;

use domaug_core::autodiff::Tape;
use domaug_core::data::{generate_synthetic, split_train_test, GlyphConfig};
use domaug_core::eval::{rank_gallery, recall_at_k, EmbeddingMatrix, Provenance};
use domaug_core::losses::{base_loss, ideal_loss, LossConfig, LossKind};
use domaug_core::model::{ConvStage, EmbeddingModel, ModelConfig, ParamGroup};
use domaug_core::sampling::{PkConfig, PkSampler};
use domaug_core::tensor::Tensor;
use domaug_core::trainer::{EvalConfig, MechanismConfig, TrainRun, HISTORY_FILE};
use domaug_core::transforms::{rotate90, transform_batch, DomainSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const ALL_LOSSES: [LossKind; 3] = [
    LossKind::Triplet,
    LossKind::Contrastive,
    LossKind::MultiSimilarity,
];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(vec![c, h, w], data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------- rotation

/// `rotate90(rotate90(x, a), b) == rotate90(x, a + b mod 4)` bit for bit,
/// and `rotate90(x, 0) == x`, on random images of random shapes.
pub fn rotation_group(images: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 0..images {
        let (c, h, w) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
        );
        let x = random_image(&mut rng, c, h, w);
        ensure!(rotate90(&x, 0) == x, "image {n}: rotate90(x, 0) != x");
        for a in 0..4u8 {
            let ra = rotate90(&x, a);
            for b in 0..4u8 {
                ensure!(
                    rotate90(&ra, b) == rotate90(&x, (a + b) % 4),
                    "image {n} ({c}x{h}x{w}): {a} then {b} quarter turns"
                );
            }
        }
    }
    Ok(format!("{images} images, 16 compositions each"))
}

// ---------------------------------------------------------- head isolation

pub fn tiny_model(split: bool, seed: u64) -> EmbeddingModel {
    let config = ModelConfig {
        input_shape: [1, 8, 8],
        conv_stages: vec![
            ConvStage {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvStage {
                out_channels: 6,
                kernel: 3,
                stride: 2,
            },
        ],
        embedding_dim: 16,
        num_domains: 4,
        split_heads: split,
    };
    EmbeddingModel::build(config, seed).unwrap()
}

pub fn tiny_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let images: Vec<Tensor> = (0..8).map(|_| random_image(rng, 1, 8, 8)).collect();
    (
        Tensor::stack(&images).unwrap(),
        vec![0, 0, 1, 1, 2, 2, 3, 3],
    )
}

/// A loss on domain `i` alone gives exactly zero gradient to every other
/// head of a four-head model, and a non-zero one to head `i`.
pub fn head_isolation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = tiny_model(true, 7);
    let domains = DomainSet::all_rotations();
    for kind in ALL_LOSSES {
        let cfg = LossConfig::of_kind(kind);
        for i in 0..4 {
            let (batch, labels) = tiny_batch(&mut rng);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let rotated = transform_batch(&batch, domains.rotation(i));
            let emb = model.embed_on_tape(&mut tape, &bound, &rotated, i).unwrap();
            let loss = base_loss(&mut tape, emb, &labels, &cfg).unwrap();
            tape.backward(loss.value).unwrap();
            let mut own_nonzero = false;
            for (p, &v) in model.params().iter().zip(bound.vars()) {
                let g = tape.grad(v).unwrap();
                match p.group {
                    ParamGroup::Head(h) if h != i => {
                        ensure!(
                            g.iter().all(|&x| x == 0.0),
                            "{kind} domain {i}: {} has gradient",
                            p.name
                        );
                    }
                    ParamGroup::Head(_) => own_nonzero |= g.iter().any(|&x| x != 0.0),
                    ParamGroup::Backbone => {}
                }
            }
            ensure!(
                own_nonzero,
                "{kind} domain {i}: own head received no gradient"
            );
        }
    }
    Ok("k=4, every domain, 3 losses".into())
}

// --------------------------------------------------------- ensemble identity

/// Ranking by the concatenated embedding equals ranking by the summed
/// per-domain similarity matrices, with identical tie-breaks.
pub fn ensemble_identity(n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w, k) = (8, 4);
    let labels: Vec<usize> = (0..n).map(|i| i % 17).collect();
    let parts: Vec<EmbeddingMatrix> = (0..k)
        .map(|s| {
            // a tiny codebook in half the segments forces exact ties
            let rows = if s % 2 == 0 {
                unit_rows(&mut rng, n, w)
            } else {
                let book = unit_rows(&mut rng, 3, w);
                (0..n).map(|_| book[rng.gen_range(0..3)].clone()).collect()
            };
            let provenance = Provenance::Domain {
                model: 0,
                rotation: s as u8,
                head: s,
            };
            EmbeddingMatrix::new(
                Tensor::from_rows(&rows).unwrap(),
                labels.clone(),
                w,
                provenance,
            )
            .unwrap()
        })
        .collect();
    let ensemble = EmbeddingMatrix::concat(&parts).unwrap();
    let combined = ensemble.similarity_matrix();

    let mut summed = vec![0.0; n * n];
    for (s, part) in parts.iter().enumerate() {
        // each domain's cosine similarities, computed on their own
        for i in 0..n {
            for j in 0..n {
                let v = dot(part.row(i), part.row(j));
                summed[i * n + j] = if s == 0 { v } else { summed[i * n + j] + v };
            }
        }
    }
    for q in 0..n {
        let a = rank_gallery(&combined[q * n..(q + 1) * n], q);
        let b = rank_gallery(&summed[q * n..(q + 1) * n], q);
        ensure!(a == b, "query {q}: rankings differ");
        for j in 0..n {
            let naive = dot(ensemble.row(q), ensemble.row(j));
            ensure!(
                (naive - combined[q * n + j]).abs() < 1e-12,
                "query {q} item {j}: dot product disagrees"
            );
        }
    }
    Ok(format!("{n} items, {k} domains"))
}

// ------------------------------------------------------------ recall oracle

/// Recall@k by fully sorting every gallery, ties to the lower index.
pub fn brute_recall(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = rows.len();
    let mut hits = 0;
    for q in 0..n {
        let mut gallery: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (dot(&rows[q], &rows[j]), j))
            .collect();
        gallery.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if gallery.iter().take(k).any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

pub fn recall_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for instance in 0..instances {
        let n = rng.gen_range(10..=200);
        let classes = rng.gen_range(2..=12);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        // every other instance draws from a tiny codebook to force ties
        let rows = if instance % 2 == 0 {
            unit_rows(&mut rng, n, 6)
        } else {
            let book = unit_rows(&mut rng, 5, 6);
            (0..n).map(|_| book[rng.gen_range(0..5)].clone()).collect()
        };
        let provenance = Provenance::Domain {
            model: 0,
            rotation: 0,
            head: 0,
        };
        let emb = EmbeddingMatrix::new(
            Tensor::from_rows(&rows).unwrap(),
            labels.clone(),
            6,
            provenance,
        )
        .unwrap();
        let ks = [1, 2, 4, 8];
        let report = recall_at_k(&emb, &ks).map_err(|e| e.to_string())?;
        for k in ks {
            let (got, want) = (report.at(k).unwrap(), brute_recall(&rows, &labels, k));
            ensure!(
                got == want,
                "instance {instance} (N={n}) R@{k}: {got} vs oracle {want}"
            );
        }
    }
    Ok(format!("{instances} instances, N ≤ 200, K ∈ {{1,2,4,8}}"))
}

// ------------------------------------------------------------ loss oracles

pub fn triplet_oracle(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for a in 0..rows.len() {
        for p in 0..rows.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..rows.len() {
                if labels[n] != labels[a] {
                    total +=
                        (dist(&rows[a], &rows[p]) - dist(&rows[a], &rows[n]) + margin).max(0.0);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn contrastive_oracle(rows: &[Vec<f64>], labels: &[usize], cfg: &LossConfig) -> f64 {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let s = dot(&rows[i], &rows[j]);
            if labels[i] == labels[j] {
                pos.push((cfg.pos_margin - s).max(0.0));
            } else {
                neg.push((s - cfg.neg_margin).max(0.0));
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(&pos) + mean(&neg)
}

pub fn ms_oracle(rows: &[Vec<f64>], labels: &[usize], cfg: &LossConfig) -> f64 {
    let n = rows.len();
    let (alpha, beta, lambda, eps) = (
        cfg.ms_scale_pos,
        cfg.ms_scale_neg,
        cfg.ms_threshold,
        cfg.ms_mining_margin,
    );
    let mut terms = Vec::new();
    for a in 0..n {
        let s: Vec<f64> = rows.iter().map(|r| dot(&rows[a], r)).collect();
        let pos: Vec<usize> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let hardest_pos = pos.iter().map(|&j| s[j]).fold(f64::INFINITY, f64::min);
        let hardest_neg = neg.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        let kept_neg: Vec<f64> = neg
            .iter()
            .map(|&j| s[j])
            .filter(|&v| v + eps > hardest_pos)
            .collect();
        let kept_pos: Vec<f64> = pos
            .iter()
            .map(|&j| s[j])
            .filter(|&v| v - eps < hardest_neg)
            .collect();
        if kept_pos.is_empty() || kept_neg.is_empty() {
            continue;
        }
        let lp = (1.0
            + kept_pos
                .iter()
                .map(|v| (-alpha * (v - lambda)).exp())
                .sum::<f64>())
        .ln()
            / alpha;
        let ln = (1.0
            + kept_neg
                .iter()
                .map(|v| (beta * (v - lambda)).exp())
                .sum::<f64>())
        .ln()
            / beta;
        terms.push(lp + ln);
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

pub fn oracle(kind: LossKind, rows: &[Vec<f64>], labels: &[usize], cfg: &LossConfig) -> f64 {
    match kind {
        LossKind::Triplet => triplet_oracle(rows, labels, cfg.triplet_margin),
        LossKind::Contrastive => contrastive_oracle(rows, labels, cfg),
        LossKind::MultiSimilarity => ms_oracle(rows, labels, cfg),
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.gen_range(4..=24);
    let classes = rng.gen_range(2..=5);
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    // low dimension keeps similarities spread so mining keeps pairs
    (unit_rows(rng, n, 3), labels)
}

pub fn loss_value(rows: &[Vec<f64>], labels: &[usize], cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let e = tape.leaf(Tensor::from_rows(rows).unwrap(), true);
    let l = base_loss(&mut tape, e, labels, cfg).unwrap();
    tape.value(l.value).item()
}

pub fn loss_oracles(batches: usize) -> Check {
    let mut worst: f64 = 0.0;
    for kind in ALL_LOSSES {
        let cfg = LossConfig::of_kind(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 40);
        let mut nonzero = 0;
        for b in 0..batches {
            let (rows, labels) = random_batch(&mut rng);
            let got = loss_value(&rows, &labels, &cfg);
            let want = oracle(kind, &rows, &labels, &cfg);
            ensure!(
                (got - want).abs() <= 1e-9,
                "{kind} batch {b}: {got} vs oracle {want}"
            );
            worst = worst.max((got - want).abs());
            nonzero += usize::from(want > 0.0);
        }
        ensure!(
            2 * nonzero >= batches,
            "{kind}: only {nonzero} of {batches} batches had a non-zero loss"
        );
    }
    Ok(format!("{batches} batches per loss, max |Δ| {worst:.1e}"))
}

// ---------------------------------------------------- ideal decomposition

/// The joint IDEAL objective equals the sum of per-domain losses computed
/// independently (separate forward passes, brute-force losses).
pub fn ideal_decomposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let domains = DomainSet::all_rotations();
    let mut worst: f64 = 0.0;
    for split in [true, false] {
        let model = tiny_model(split, 4);
        for kind in ALL_LOSSES {
            let cfg = LossConfig::of_kind(kind);
            for _ in 0..5 {
                let (batch, labels) = tiny_batch(&mut rng);
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let joint =
                    ideal_loss(&mut tape, &model, &bound, &batch, &labels, &domains, &cfg).unwrap();
                let total = tape.value(joint.total).item();
                ensure!(
                    joint.provenance.cross_domain() == 0,
                    "{kind}: cross-domain pairs formed"
                );
                let mut separate = 0.0;
                for (i, &rot) in domains.rotations().iter().enumerate() {
                    let emb = model.embed(&transform_batch(&batch, rot), i).unwrap();
                    let rows: Vec<Vec<f64>> =
                        (0..emb.shape()[0]).map(|r| emb.row(r).to_vec()).collect();
                    separate += oracle(kind, &rows, &labels, &cfg);
                }
                ensure!(
                    (total - separate).abs() <= 1e-9,
                    "{kind} split={split}: {total} vs {separate}"
                );
                worst = worst.max((total - separate).abs());
            }
        }
    }
    Ok(format!(
        "3 losses, split and shared heads, max |Δ| {worst:.1e}"
    ))
}

// -------------------------------------------------------------- PK sampler

/// Every batch has exactly P distinct classes with K items each (distinct
/// items when the class has at least K), and classes are drawn uniformly.
pub fn pk_contract(batches: usize) -> Check {
    let per_class = [3usize, 4, 5, 9, 12, 4, 6, 7, 10, 2, 8, 5];
    let labels: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect();
    let cfg = PkConfig { p: 8, k: 4 };
    let sampler = PkSampler::new(&labels, cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut class_draws = vec![0usize; per_class.len()];
    for b in 0..batches {
        let batch = sampler.next_batch(&mut rng);
        ensure!(batch.len() == 32, "batch {b} has {} items", batch.len());
        let mut counts: HashMap<usize, Vec<usize>> = HashMap::new();
        for &i in &batch {
            counts.entry(labels[i]).or_default().push(i);
        }
        ensure!(counts.len() == 8, "batch {b} has {} classes", counts.len());
        for (&c, items) in &counts {
            ensure!(
                items.len() == 4,
                "batch {b} class {c} has {} items",
                items.len()
            );
            if per_class[c] >= 4 {
                let mut unique = items.clone();
                unique.sort_unstable();
                unique.dedup();
                ensure!(unique.len() == 4, "batch {b} class {c} repeated an item");
            }
            class_draws[c] += 1;
        }
    }
    // each class is picked with probability 8/12 per batch
    let p = 8.0 / 12.0;
    let expected = batches as f64 * p;
    let sigma = (batches as f64 * p * (1.0 - p)).sqrt();
    for (c, &n) in class_draws.iter().enumerate() {
        ensure!(
            (n as f64 - expected).abs() < 5.0 * sigma,
            "class {c} drawn {n} times, expected {expected:.0}"
        );
    }
    Ok(format!("{batches} batches of P=8 × K=4"))
}

// ------------------------------------------------------------ determinism

/// Two complete training runs per mechanism with the same seed and config
/// write byte-identical history files.
pub fn training_determinism() -> Check {
    let data = generate_synthetic(&GlyphConfig {
        num_base_shapes: 4,
        samples_per_class: 6,
        image_size: 16,
        translate_px: 1,
        ..GlyphConfig::default()
    })
    .unwrap();
    let (train, test) = split_train_test(&data).unwrap();
    let template = ModelConfig {
        input_shape: [1, 16, 16],
        conv_stages: vec![
            ConvStage {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvStage {
                out_channels: 8,
                kernel: 3,
                stride: 2,
            },
        ],
        embedding_dim: 16,
        num_domains: 4,
        split_heads: false,
    };
    let base = MechanismConfig {
        epochs: 3,
        seed: 5,
        sampler: PkConfig { p: 4, k: 3 },
        ..MechanismConfig::default()
    };
    let mut names = Vec::new();
    for name in domaug_core::trainer::VARIANTS {
        let mech = base.variant(name).map_err(|e| e.to_string())?;
        let mut histories = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut run = TrainRun::new(mech.clone(), EvalConfig::default(), &template)
                .map_err(|e| e.to_string())?;
            run.train(&train, Some(&test), Some(dir.path()))
                .map_err(|e| e.to_string())?;
            histories.push(fs::read(dir.path().join(HISTORY_FILE)).map_err(|e| e.to_string())?);
        }
        ensure!(histories[0] == histories[1], "{name}: history files differ");
        ensure!(!histories[0].is_empty(), "{name}: empty history");
        names.push(name);
    }
    Ok(format!("{} mechanisms, 3 epochs each", names.len()))
}
