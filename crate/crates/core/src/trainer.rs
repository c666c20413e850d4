//! Training mechanisms for exploiting rotated domains, the epoch loop, and
//! resumable checkpoints.
//!
//! * `DataAug`: every image gets a random rotation from the domain set and
//!   one loss is computed over the mixed batch. With the identity-only
//!   domain set this is plain training.
//! * `MultiModel`: one independent model per domain, each trained on the
//!   batch rotated into its domain.
//! * `Ideal`: one shared backbone; each domain has its own loss term (and,
//!   with split heads, its own projection head); the terms are summed and
//!   optimized with a single step.
//!
//! Every epoch draws its randomness from a generator derived from
//! `(seed, epoch)`, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would have.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::checkpoint::{read_tensors, write_tensors, CheckpointError};
use crate::data::{DataError, Dataset};
use crate::eval::{evaluate_members, EvalError, Member, RecallReport};
use crate::losses::{base_loss, ideal_loss_on_views, LossConfig, PairProvenance};
use crate::model::{BoundParams, EmbeddingModel, ModelConfig, ModelError};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::sampling::{PkConfig, PkSampler, SamplerError};
use crate::tensor::{Tensor, TensorError};
use crate::transforms::{apply_data_aug, rotate90, transform_batch, DataAugConfig, DomainSet};

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl TrainError {
    /// True for problems with the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            TrainError::Config(_)
                | TrainError::Sampler(_)
                | TrainError::Model(ModelError::Config(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    DataAug,
    MultiModel,
    Ideal,
}

impl std::str::FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "data-aug" => Ok(Self::DataAug),
            "multi-model" => Ok(Self::MultiModel),
            "ideal" => Ok(Self::Ideal),
            other => Err(format!(
                "unknown mechanism `{other}` (expected data-aug, multi-model or ideal)"
            )),
        }
    }
}

/// Names accepted by [`MechanismConfig::variant`].
pub const VARIANTS: [&str; 5] = [
    "plain",
    "data-aug",
    "multi-model",
    "ideal-split",
    "ideal-shared",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismConfig {
    pub mode: Mechanism,
    /// Rotations used during training.
    pub domains: DomainSet,
    /// One disjoint projection head per domain (`Ideal` only).
    pub split_heads: bool,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub sampler: PkConfig,
    /// Crop/flip applied to training images; before any rotation unless
    /// `data_aug.after_rotation` is set.
    pub data_aug: DataAugConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            mode: Mechanism::Ideal,
            domains: DomainSet::all_rotations(),
            split_heads: true,
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            sampler: PkConfig::default(),
            data_aug: DataAugConfig::disabled(),
            epochs: 20,
            seed: 0,
        }
    }
}

impl MechanismConfig {
    /// Single model trained on upright images only.
    pub fn plain() -> Self {
        Self {
            mode: Mechanism::DataAug,
            domains: DomainSet::identity(),
            split_heads: false,
            ..Self::default()
        }
    }

    pub fn data_aug() -> Self {
        Self {
            mode: Mechanism::DataAug,
            split_heads: false,
            ..Self::default()
        }
    }

    pub fn multi_model() -> Self {
        Self {
            mode: Mechanism::MultiModel,
            split_heads: false,
            ..Self::default()
        }
    }

    pub fn ideal(split_heads: bool) -> Self {
        Self {
            mode: Mechanism::Ideal,
            split_heads,
            ..Self::default()
        }
    }

    /// Short name used in reports: `plain`, `data-aug`, `multi-model`,
    /// `ideal-split` or `ideal-shared`.
    pub fn name(&self) -> &'static str {
        match self.mode {
            Mechanism::DataAug if self.domains.len() == 1 => "plain",
            Mechanism::DataAug => "data-aug",
            Mechanism::MultiModel => "multi-model",
            Mechanism::Ideal if self.split_heads => "ideal-split",
            Mechanism::Ideal => "ideal-shared",
        }
    }

    /// This configuration switched to the named variant (see [`Self::name`]),
    /// keeping loss, optimizer, sampler, epochs and seed. Variants other
    /// than `plain` train on every rotation when `self` has a single domain.
    pub fn variant(&self, name: &str) -> Result<Self, TrainError> {
        let (mode, split_heads) = match name {
            "plain" | "data-aug" => (Mechanism::DataAug, false),
            "multi-model" => (Mechanism::MultiModel, false),
            "ideal-split" => (Mechanism::Ideal, true),
            "ideal-shared" => (Mechanism::Ideal, false),
            other => {
                return Err(TrainError::Config(format!(
                    "unknown mechanism `{other}` (expected {})",
                    VARIANTS.join(", ")
                )))
            }
        };
        let domains = if name == "plain" {
            DomainSet::identity()
        } else if self.domains.len() == 1 {
            DomainSet::all_rotations()
        } else {
            self.domains.clone()
        };
        Ok(Self {
            mode,
            domains,
            split_heads,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let cfg = |m: String| Err(TrainError::Config(m));
        if self.split_heads && self.mode != Mechanism::Ideal {
            return cfg("split_heads requires the ideal mechanism".into());
        }
        self.loss.validate().map_err(TrainError::Config)?;
        self.optimizer.validate().map_err(TrainError::Config)?;
        self.data_aug.validate().map_err(TrainError::Config)?;
        self.sampler.validate()?;
        Ok(())
    }

    /// Model configurations this mechanism trains, derived from `template`
    /// (whose domain count and head layout are overridden).
    pub fn model_configs(&self, template: &ModelConfig) -> Vec<ModelConfig> {
        let single = ModelConfig {
            num_domains: 1,
            split_heads: false,
            ..template.clone()
        };
        match self.mode {
            Mechanism::DataAug => vec![single],
            Mechanism::MultiModel => vec![single; self.domains.len()],
            Mechanism::Ideal => vec![ModelConfig {
                num_domains: self.domains.len(),
                split_heads: self.split_heads,
                ..template.clone()
            }],
        }
    }
}

/// What to evaluate after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-time rotations; their concatenated embeddings form the ensemble.
    pub domains: DomainSet,
    pub ks: Vec<usize>,
    /// Evaluate every this many epochs (the last epoch always); 0 = only
    /// after the last epoch.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            domains: DomainSet::all_rotations(),
            ks: vec![1, 2, 4, 8],
            every: 1,
        }
    }
}

/// Evaluation summary stored with an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub rotations: Vec<u8>,
    /// Recall@1 per test rotation, aligned with `rotations`.
    pub per_domain_r1: Vec<f64>,
    /// Recall@K of the ensemble embedding for every configured K.
    pub ensemble: std::collections::BTreeMap<usize, f64>,
}

impl EvalRecord {
    fn from_reports(rotations: &[u8], reports: &[RecallReport]) -> Self {
        let (ensemble, domains) = reports.split_last().expect("ensemble report");
        Self {
            rotations: rotations.to_vec(),
            per_domain_r1: domains
                .iter()
                .map(|r| r.at(1).unwrap_or(f64::NAN))
                .collect(),
            ensemble: ensemble.recall.clone(),
        }
    }

    pub fn ensemble_r1(&self) -> Option<f64> {
        self.ensemble.get(&1).copied()
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of completed epochs, starting at 1.
    pub epoch: usize,
    pub mechanism: String,
    pub batches: usize,
    /// Mean training loss over the epoch's batches (averaged over models
    /// for `MultiModel`).
    pub loss: f64,
    /// Mean per-domain loss terms (`Ideal`) or per-model losses
    /// (`MultiModel`); empty for `DataAug`.
    pub domain_losses: Vec<f64>,
    /// Pairs formed by the loss over the epoch, by domain provenance.
    pub pairs: PairProvenance,
    pub eval: Option<EvalRecord>,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub domain_losses: Vec<f64>,
    pub pairs: PairProvenance,
}

fn optimizer_step(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    tape: &Tape,
    bound: &BoundParams,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    let grads: Vec<&[f64]> = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).expect("trainable parameter has a gradient"))
        .collect();
    let mut params: Vec<&mut [f64]> = model
        .params_mut()
        .iter_mut()
        .map(|p| p.value.data_mut())
        .collect();
    state.step(&mut params, &grads, cfg)
}

/// Fresh optimizer state for `model`.
pub fn adam_for(model: &EmbeddingModel) -> AdamState {
    AdamState::new(model.params().iter().map(|p| p.value.len()))
}

fn finite_or_diverged(loss: f64) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::Diverged {
            epoch: 0,
            batch: 0,
            detail: format!("loss is {loss}"),
        })
    }
}

fn nonfinite_grad(e: OptimError) -> TrainError {
    match e {
        OptimError::NonFiniteGradient { .. } => TrainError::Diverged {
            epoch: 0,
            batch: 0,
            detail: e.to_string(),
        },
        other => TrainError::Config(other.to_string()),
    }
}

/// One loss over a batch whose row `i` is rotated by `rotations[i]`.
pub fn train_step_mixed(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    batch: &Tensor,
    labels: &[usize],
    rotations: &[u8],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<StepStats, TrainError> {
    let n = labels.len();
    let rotated: Vec<Tensor> = (0..n)
        .map(|i| {
            let [c, h, w] = [batch.shape()[1], batch.shape()[2], batch.shape()[3]];
            let img = Tensor::new(vec![c, h, w], batch.item_slice(i).to_vec()).expect("image");
            rotate90(&img, rotations[i])
        })
        .collect();
    let row_domains: Vec<usize> = rotations.iter().map(|&r| r as usize).collect();
    mixed_step(
        model,
        state,
        &Tensor::stack(&rotated)?,
        labels,
        &row_domains,
        loss,
        adam,
    )
}

/// One loss over `inputs` (already transformed); `row_domains` only feeds
/// the pair provenance.
fn mixed_step(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    mixed: &Tensor,
    labels: &[usize],
    row_domains: &[usize],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<StepStats, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let emb = model.embed_on_tape(&mut tape, &bound, mixed, 0)?;
    let value = base_loss(&mut tape, emb, labels, loss)?.value;
    let l = finite_or_diverged(tape.value(value).item())?;
    tape.backward(value)?;
    optimizer_step(model, state, &tape, &bound, adam).map_err(nonfinite_grad)?;
    Ok(StepStats {
        loss: l,
        domain_losses: Vec::new(),
        pairs: PairProvenance::of_rows(labels, row_domains),
    })
}

/// Data-augmentation step: each image is rotated by a rotation drawn
/// uniformly from `domains`, then one loss covers the mixed batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step_dataaug<R: Rng + ?Sized>(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    batch: &Tensor,
    labels: &[usize],
    domains: &DomainSet,
    loss: &LossConfig,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<StepStats, TrainError> {
    let rotations: Vec<u8> = (0..labels.len())
        .map(|_| domains.rotation(rng.gen_range(0..domains.len())))
        .collect();
    train_step_mixed(model, state, batch, labels, &rotations, loss, adam)
}

/// Multiple-model step: model `i` trains on the batch rotated by
/// `rotations[i]`, with its own loss and optimizer state.
pub fn train_step_multimodel(
    models: &mut [EmbeddingModel],
    states: &mut [AdamState],
    batch: &Tensor,
    labels: &[usize],
    rotations: &[u8],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<Vec<f64>, TrainError> {
    let views: Vec<Tensor> = rotations
        .iter()
        .map(|&rot| transform_batch(batch, rot))
        .collect();
    train_step_multimodel_views(models, states, &views, labels, loss, adam)
}

/// Like [`train_step_multimodel`], with model `i`'s input batch given
/// directly as `views[i]`.
pub fn train_step_multimodel_views(
    models: &mut [EmbeddingModel],
    states: &mut [AdamState],
    views: &[Tensor],
    labels: &[usize],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<Vec<f64>, TrainError> {
    if models.len() != views.len() || states.len() != views.len() {
        return Err(TrainError::Config(format!(
            "{} models and {} optimizer states for {} domains",
            models.len(),
            states.len(),
            views.len()
        )));
    }
    let mut losses = Vec::with_capacity(models.len());
    for ((model, state), view) in models.iter_mut().zip(states.iter_mut()).zip(views) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let emb = model.embed_on_tape(&mut tape, &bound, view, 0)?;
        let value = base_loss(&mut tape, emb, labels, loss)?.value;
        losses.push(finite_or_diverged(tape.value(value).item())?);
        tape.backward(value)?;
        optimizer_step(model, state, &tape, &bound, adam).map_err(nonfinite_grad)?;
    }
    Ok(losses)
}

/// Independent-domain step: the sum of per-domain losses, one optimizer
/// step on the shared parameters.
pub fn train_step_ideal(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    batch: &Tensor,
    labels: &[usize],
    domains: &DomainSet,
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<StepStats, TrainError> {
    let views: Vec<Tensor> = domains
        .rotations()
        .iter()
        .map(|&rot| transform_batch(batch, rot))
        .collect();
    train_step_ideal_views(model, state, &views, labels, loss, adam)
}

/// Like [`train_step_ideal`], with the domain-`i` input batch given
/// directly as `views[i]`.
pub fn train_step_ideal_views(
    model: &mut EmbeddingModel,
    state: &mut AdamState,
    views: &[Tensor],
    labels: &[usize],
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<StepStats, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let terms = ideal_loss_on_views(&mut tape, model, &bound, views, labels, loss)?;
    let l = finite_or_diverged(tape.value(terms.total).item())?;
    let domain_losses = terms
        .per_domain
        .iter()
        .map(|&v| tape.value(v).item())
        .collect();
    tape.backward(terms.total)?;
    optimizer_step(model, state, &tape, &bound, adam).map_err(nonfinite_grad)?;
    Ok(StepStats {
        loss: l,
        domain_losses,
        pairs: terms.provenance,
    })
}

/// Generator for epoch `epoch` (0-based) of a run seeded with `seed`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// A training run: configuration, model(s), optimizer state(s) and the
/// per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    config: MechanismConfig,
    eval: EvalConfig,
    models: Vec<EmbeddingModel>,
    states: Vec<AdamState>,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    mechanism: MechanismConfig,
    eval: EvalConfig,
    models: Vec<ModelConfig>,
    adam_steps: Vec<u64>,
    epochs_completed: usize,
}

impl TrainRun {
    /// Builds freshly initialized models: model `i` is seeded with
    /// `seed + i`.
    pub fn new(
        config: MechanismConfig,
        eval: EvalConfig,
        template: &ModelConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if eval.ks.is_empty() || eval.ks.contains(&0) {
            return Err(TrainError::Config("eval.ks must list K values >= 1".into()));
        }
        let [_, h, w] = template.input_shape;
        let rotates = config
            .domains
            .rotations()
            .iter()
            .chain(eval.domains.rotations())
            .any(|r| r % 2 == 1);
        if rotates && h != w {
            return Err(TrainError::Config(format!(
                "quarter-turn domains need square images, got {h}x{w}"
            )));
        }
        if let Some(c) = config.data_aug.crop_size {
            if c != h || c != w {
                return Err(TrainError::Config(format!(
                    "data_aug.crop_size {c} must equal the model input size {h}x{w}"
                )));
            }
        }
        let models = config
            .model_configs(template)
            .into_iter()
            .enumerate()
            .map(|(i, mc)| EmbeddingModel::build(mc, config.seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let run = Self {
            states: models.iter().map(adam_for).collect(),
            models,
            config,
            eval,
            history: Vec::new(),
        };
        run.eval_members()?;
        Ok(run)
    }

    pub fn config(&self) -> &MechanismConfig {
        &self.config
    }

    pub fn eval_config(&self) -> &EvalConfig {
        &self.eval
    }

    pub fn models(&self) -> &[EmbeddingModel] {
        &self.models
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_completed(&self) -> usize {
        self.history.len()
    }

    /// Changes the epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Replaces the evaluation settings, e.g. to test other rotations.
    pub fn set_eval(&mut self, eval: EvalConfig) -> Result<(), TrainError> {
        if eval.ks.is_empty() || eval.ks.contains(&0) {
            return Err(TrainError::Config("eval.ks must list K values >= 1".into()));
        }
        let previous = std::mem::replace(&mut self.eval, eval);
        let check = self.eval_members().map(|_| ());
        if let Err(e) = check {
            self.eval = previous;
            return Err(e);
        }
        Ok(())
    }

    /// Ensemble members for each test rotation.
    pub fn eval_members(&self) -> Result<Vec<Member<'_>>, TrainError> {
        let train_rot = self.config.domains.rotations();
        self.eval
            .domains
            .rotations()
            .iter()
            .map(|&rot| {
                let pos = train_rot.iter().position(|&r| r == rot);
                let (model_id, head) = match self.config.mode {
                    Mechanism::DataAug => (0, 0),
                    Mechanism::Ideal if !self.config.split_heads => (0, 0),
                    Mechanism::MultiModel => (pos.ok_or_else(|| untrained(rot))?, 0),
                    Mechanism::Ideal => (0, pos.ok_or_else(|| untrained(rot))?),
                };
                Ok(Member {
                    model: &self.models[model_id],
                    model_id,
                    rotation: rot,
                    head,
                })
            })
            .collect()
    }

    /// Per-domain reports followed by the ensemble report.
    pub fn evaluate(&self, test: &Dataset) -> Result<Vec<RecallReport>, TrainError> {
        Ok(evaluate_members(
            &self.eval_members()?,
            test,
            &self.eval.ks,
        )?)
    }

    fn batch_images<R: Rng + ?Sized>(
        &self,
        train: &Dataset,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<Tensor, TrainError> {
        if self.config.data_aug.is_identity() {
            return Ok(train.batch(indices).0);
        }
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| apply_data_aug(&train.image(i), &self.config.data_aug, rng))
            .collect();
        Ok(Tensor::stack(&images)?)
    }

    /// Trains one epoch and evaluates if due. On divergence the run is left
    /// at its state before the failing step and nothing is appended.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
    ) -> Result<&EpochRecord, TrainError> {
        let epoch = self.history.len();
        let sampler = PkSampler::new(train.labels(), self.config.sampler)?;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let batches = sampler.batches_per_epoch();
        let mut loss_sum = 0.0;
        let mut domain_sums: Vec<f64> = Vec::new();
        let mut pairs = PairProvenance::default();
        let cfg = self.config.clone();
        for b in 0..batches {
            let indices = sampler.next_batch(&mut rng);
            let labels: Vec<usize> = indices.iter().map(|&i| train.labels()[i]).collect();
            let stats = if cfg.data_aug.after_rotation && !cfg.data_aug.is_identity() {
                self.step_augmenting_after_rotation(&cfg, train, &indices, &labels, &mut rng)
            } else {
                self.step(&cfg, train, &indices, &labels, &mut rng)
            }
            .map_err(|e| match e {
                TrainError::Diverged { detail, .. } => TrainError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail,
                },
                other => other,
            })?;
            loss_sum += stats.loss;
            domain_sums.resize(stats.domain_losses.len(), 0.0);
            for (s, l) in domain_sums.iter_mut().zip(&stats.domain_losses) {
                *s += l;
            }
            pairs.merge(stats.pairs);
        }
        let completed = epoch + 1;
        let due = match self.eval.every {
            0 => completed == self.config.epochs,
            n => completed % n == 0 || completed == self.config.epochs,
        };
        let eval = match test {
            Some(t) if due => Some(EvalRecord::from_reports(
                self.eval.domains.rotations(),
                &self.evaluate(t)?,
            )),
            _ => None,
        };
        self.history.push(EpochRecord {
            epoch: completed,
            mechanism: self.config.name().into(),
            batches,
            loss: loss_sum / batches as f64,
            domain_losses: domain_sums.iter().map(|s| s / batches as f64).collect(),
            pairs,
            eval,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// One step with crop/flip applied to the source images, before any
    /// domain transformation.
    fn step<R: Rng + ?Sized>(
        &mut self,
        cfg: &MechanismConfig,
        train: &Dataset,
        indices: &[usize],
        labels: &[usize],
        rng: &mut R,
    ) -> Result<StepStats, TrainError> {
        let images = self.batch_images(train, indices, rng)?;
        match cfg.mode {
            Mechanism::DataAug => train_step_dataaug(
                &mut self.models[0],
                &mut self.states[0],
                &images,
                labels,
                &cfg.domains,
                &cfg.loss,
                &cfg.optimizer,
                rng,
            ),
            Mechanism::Ideal => train_step_ideal(
                &mut self.models[0],
                &mut self.states[0],
                &images,
                labels,
                &cfg.domains,
                &cfg.loss,
                &cfg.optimizer,
            ),
            Mechanism::MultiModel => train_step_multimodel(
                &mut self.models,
                &mut self.states,
                &images,
                labels,
                cfg.domains.rotations(),
                &cfg.loss,
                &cfg.optimizer,
            )
            .map(|losses| StepStats {
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                pairs: PairProvenance::of_rows(labels, &vec![0; labels.len()]),
                domain_losses: losses,
            }),
        }
    }

    /// One step with crop/flip drawn independently inside each domain,
    /// i.e. applied to the already transformed images.
    fn step_augmenting_after_rotation<R: Rng + ?Sized>(
        &mut self,
        cfg: &MechanismConfig,
        train: &Dataset,
        indices: &[usize],
        labels: &[usize],
        rng: &mut R,
    ) -> Result<StepStats, TrainError> {
        let view = |rot: u8, rng: &mut R| -> Result<Tensor, TrainError> {
            let images: Vec<Tensor> = indices
                .iter()
                .map(|&i| apply_data_aug(&rotate90(&train.image(i), rot), &cfg.data_aug, rng))
                .collect();
            Ok(Tensor::stack(&images)?)
        };
        match cfg.mode {
            Mechanism::DataAug => {
                let rotations: Vec<u8> = (0..indices.len())
                    .map(|_| cfg.domains.rotation(rng.gen_range(0..cfg.domains.len())))
                    .collect();
                let images: Vec<Tensor> = indices
                    .iter()
                    .zip(&rotations)
                    .map(|(&i, &rot)| {
                        apply_data_aug(&rotate90(&train.image(i), rot), &cfg.data_aug, rng)
                    })
                    .collect();
                let row_domains: Vec<usize> = rotations.iter().map(|&r| r as usize).collect();
                mixed_step(
                    &mut self.models[0],
                    &mut self.states[0],
                    &Tensor::stack(&images)?,
                    labels,
                    &row_domains,
                    &cfg.loss,
                    &cfg.optimizer,
                )
            }
            Mechanism::Ideal => {
                let views = cfg
                    .domains
                    .rotations()
                    .iter()
                    .map(|&rot| view(rot, rng))
                    .collect::<Result<Vec<_>, _>>()?;
                train_step_ideal_views(
                    &mut self.models[0],
                    &mut self.states[0],
                    &views,
                    labels,
                    &cfg.loss,
                    &cfg.optimizer,
                )
            }
            Mechanism::MultiModel => {
                let views = cfg
                    .domains
                    .rotations()
                    .iter()
                    .map(|&rot| view(rot, rng))
                    .collect::<Result<Vec<_>, _>>()?;
                let losses = train_step_multimodel_views(
                    &mut self.models,
                    &mut self.states,
                    &views,
                    labels,
                    &cfg.loss,
                    &cfg.optimizer,
                )?;
                Ok(StepStats {
                    loss: losses.iter().sum::<f64>() / losses.len() as f64,
                    pairs: PairProvenance::of_rows(labels, &vec![0; labels.len()]),
                    domain_losses: losses,
                })
            }
        }
    }

    /// Runs the remaining epochs. With `out`, the checkpoint and history
    /// are written before the first epoch and after every epoch, so a
    /// diverged or interrupted run leaves its last good state on disk.
    pub fn train(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        out: Option<&Path>,
    ) -> Result<(), TrainError> {
        train.check_trainable()?;
        if let Some(dir) = out {
            self.save(dir)?;
        }
        while self.history.len() < self.config.epochs {
            let started = std::time::Instant::now();
            let target = self.config.epochs;
            let rec = self.run_epoch(train, test)?;
            log::info!(
                "{} epoch {}/{}: loss {:.5}{} ({:.1}s)",
                rec.mechanism,
                rec.epoch,
                target,
                rec.loss,
                rec.eval
                    .as_ref()
                    .and_then(|e| e.ensemble_r1())
                    .map(|r| format!(", ensemble R@1 {r:.4}"))
                    .unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// Writes `checkpoint.{json,bin}` and `history.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (i, (model, state)) in self.models.iter().zip(&self.states).enumerate() {
            for (j, p) in model.params().iter().enumerate() {
                owned.push((format!("model{i}/{}", p.name), p.value.clone()));
                let shape = p.value.shape().to_vec();
                owned.push((
                    format!("adam{i}/m/{j}"),
                    Tensor::new(shape.clone(), state.m[j].clone())?,
                ));
                owned.push((
                    format!("adam{i}/v/{j}"),
                    Tensor::new(shape, state.v[j].clone())?,
                ));
            }
        }
        let named: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = CheckpointMeta {
            mechanism: self.config.clone(),
            eval: self.eval.clone(),
            models: self.models.iter().map(|m| m.config().clone()).collect(),
            adam_steps: self.states.iter().map(|s| s.step).collect(),
            epochs_completed: self.history.len(),
        };
        let meta = serde_json::to_value(&meta).expect("checkpoint metadata serializes");
        write_tensors(dir, CHECKPOINT_STEM, &named, meta)?;
        let path = dir.join(HISTORY_FILE);
        let io = |source| TrainError::Io {
            path: path.clone(),
            source,
        };
        let mut file = fs::File::create(&path).map_err(io)?;
        for rec in &self.history {
            let line = serde_json::to_string(rec).expect("history record serializes");
            writeln!(file, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// Restores a run written by [`TrainRun::save`].
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let (manifest, tensors) = read_tensors(dir, CHECKPOINT_STEM)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| TrainError::Config(format!("checkpoint metadata: {e}")))?;
        let mut tensors: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| TrainError::Config(format!("checkpoint lacks tensor {name}")))
        };
        let mut models = Vec::new();
        let mut states = Vec::new();
        for (i, mc) in meta.models.iter().enumerate() {
            let template = EmbeddingModel::build(mc.clone(), 0)?;
            let mut named = Vec::new();
            let mut state = adam_for(&template);
            state.step = meta.adam_steps.get(i).copied().unwrap_or(0);
            for (j, p) in template.params().iter().enumerate() {
                named.push((p.name.clone(), take(format!("model{i}/{}", p.name))?));
                state.m[j] = take(format!("adam{i}/m/{j}"))?.into_data();
                state.v[j] = take(format!("adam{i}/v/{j}"))?.into_data();
            }
            models.push(EmbeddingModel::from_named(mc.clone(), named)?);
            states.push(state);
        }
        let path = dir.join(HISTORY_FILE);
        let text = fs::read_to_string(&path).map_err(|source| TrainError::Io {
            path: path.clone(),
            source,
        })?;
        let mut history = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let rec: EpochRecord = serde_json::from_str(line)
                .map_err(|e| TrainError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            history.push(rec);
        }
        if history.len() < meta.epochs_completed {
            return Err(TrainError::Config(format!(
                "{} has {} records but the checkpoint completed {} epochs",
                path.display(),
                history.len(),
                meta.epochs_completed
            )));
        }
        history.truncate(meta.epochs_completed);
        Ok(Self {
            config: meta.mechanism,
            eval: meta.eval,
            models,
            states,
            history,
        })
    }
}

fn untrained(rotation: u8) -> TrainError {
    TrainError::Config(format!(
        "test rotation {}° has no trained model or head; add it to the training domains",
        90 * rotation as usize
    ))
}

/// Reads a history file written by a run.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::Config(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}
