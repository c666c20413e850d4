//! Convolutional embedding model: a backbone shared by every domain plus one
//! projection head, or one disjoint head per domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Conv2dAttrs, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("domain index {index} out of range for {num_domains} domains")]
    DomainOutOfRange { index: usize, num_domains: usize },
    #[error("batch shape {got:?} does not match model input {expected:?}")]
    BatchShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// (channels, height, width) of input images.
    pub input_shape: [usize; 3],
    pub conv_stages: Vec<ConvStage>,
    pub embedding_dim: usize,
    pub num_domains: usize,
    pub split_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [1, 32, 32],
            conv_stages: [16, 32, 64]
                .into_iter()
                .map(|out_channels| ConvStage {
                    out_channels,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            embedding_dim: 512,
            num_domains: 4,
            split_heads: false,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for synthetic experiments: 128-d
    /// embeddings, i.e. 32 per head when split four ways.
    pub fn desk(input_shape: [usize; 3], num_domains: usize, split_heads: bool) -> Self {
        Self {
            input_shape,
            embedding_dim: 128,
            num_domains,
            split_heads,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.input_shape.iter().any(|&d| d == 0) {
            return err(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            ));
        }
        if self.conv_stages.is_empty() {
            return err("conv_stages must not be empty".into());
        }
        if self.embedding_dim == 0 || self.num_domains == 0 {
            return err("embedding_dim and num_domains must be positive".into());
        }
        if self.split_heads && self.embedding_dim % self.num_domains != 0 {
            return err(format!(
                "embedding_dim {} is not divisible by num_domains {} with split_heads",
                self.embedding_dim, self.num_domains
            ));
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return err(format!("conv stage {i} has a zero field"));
            }
            let pad = s.kernel / 2;
            if h + 2 * pad < s.kernel || w + 2 * pad < s.kernel {
                return err(format!(
                    "conv stage {i}: kernel {} does not fit {h}×{w}",
                    s.kernel
                ));
            }
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
        }
        Ok(())
    }

    /// Output width of one embedding call.
    pub fn head_dim(&self) -> usize {
        if self.split_heads {
            self.embedding_dim / self.num_domains
        } else {
            self.embedding_dim
        }
    }

    pub fn num_heads(&self) -> usize {
        if self.split_heads {
            self.num_domains
        } else {
            1
        }
    }

    fn feature_dim(&self) -> usize {
        self.conv_stages.last().map_or(0, |s| s.out_channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head(usize),
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Parameters of a model recorded on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("parameter shape")
}

impl EmbeddingModel {
    /// Initializes every weight He-uniform and every bias to zero from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut in_ch = config.input_shape[0];
        for (i, s) in config.conv_stages.iter().enumerate() {
            let fan_in = in_ch * s.kernel * s.kernel;
            params.push(Param {
                name: format!("backbone.conv{i}.weight"),
                value: he_uniform(
                    &[s.out_channels, in_ch, s.kernel, s.kernel],
                    fan_in,
                    &mut rng,
                ),
                group: ParamGroup::Backbone,
            });
            params.push(Param {
                name: format!("backbone.conv{i}.bias"),
                value: Tensor::zeros(&[s.out_channels]),
                group: ParamGroup::Backbone,
            });
            in_ch = s.out_channels;
        }
        let features = config.feature_dim();
        let head_dim = config.head_dim();
        for h in 0..config.num_heads() {
            let prefix = if config.split_heads {
                format!("head{h}")
            } else {
                "head".to_string()
            };
            params.push(Param {
                name: format!("{prefix}.weight"),
                value: he_uniform(&[head_dim, features], features, &mut rng),
                group: ParamGroup::Head(h),
            });
            params.push(Param {
                name: format!("{prefix}.bias"),
                value: Tensor::zeros(&[head_dim]),
                group: ParamGroup::Head(h),
            });
        }
        Ok(Self { config, params })
    }

    /// Reassembles a model from named tensors, checking them against the
    /// shapes `config` implies.
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::build(config, 0)?;
        if named.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Ordered `(name, tensor)` view of every parameter.
    pub fn parameters(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect()
    }

    pub fn backbone_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .filter(|p| p.group == ParamGroup::Backbone)
            .map(|p| (p.name.as_str(), &p.value))
            .collect()
    }

    /// Parameters of the head that serves `domain`. Without split heads every
    /// domain shares the single head.
    pub fn head_parameters(&self, domain: usize) -> Result<Vec<(&str, &Tensor)>, ModelError> {
        let head = self.head_for(domain)?;
        Ok(self
            .params
            .iter()
            .filter(|p| p.group == ParamGroup::Head(head))
            .map(|p| (p.name.as_str(), &p.value))
            .collect())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn head_for(&self, domain: usize) -> Result<usize, ModelError> {
        if domain >= self.config.num_domains {
            return Err(ModelError::DomainOutOfRange {
                index: domain,
                num_domains: self.config.num_domains,
            });
        }
        Ok(if self.config.split_heads { domain } else { 0 })
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), ModelError> {
        let ok = batch.ndim() == 4 && batch.shape()[1..] == self.config.input_shape;
        if !ok {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.config.input_shape);
            return Err(ModelError::BatchShape {
                expected,
                got: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Backbone features (N×F) of an N×C×H×W batch already on the tape.
    pub fn features(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: Var,
    ) -> Result<Var, ModelError> {
        self.check_batch(tape.value(batch))?;
        let mut x = batch;
        for (i, s) in self.config.conv_stages.iter().enumerate() {
            let attrs = Conv2dAttrs {
                stride: s.stride,
                padding: s.kernel / 2,
            };
            x = tape.conv2d(x, bound.vars[2 * i], bound.vars[2 * i + 1], attrs)?;
            x = tape.relu(x)?;
        }
        Ok(tape.global_avg_pool(x)?)
    }

    /// Projects features through the head serving `domain` and normalizes.
    pub fn project(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        domain: usize,
    ) -> Result<Var, ModelError> {
        let head = self.head_for(domain)?;
        let base = 2 * self.config.conv_stages.len() + 2 * head;
        let z = tape.affine(features, bound.vars[base], bound.vars[base + 1])?;
        Ok(tape.l2_normalize(z)?)
    }

    /// Unit-norm embeddings of `batch` through the head serving `domain`,
    /// recorded on `tape`. The batch is used as given; rotating it into the
    /// domain is the caller's job.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &Tensor,
        domain: usize,
    ) -> Result<Var, ModelError> {
        self.head_for(domain)?;
        let x = tape.constant(batch.clone());
        let f = self.features(tape, bound, x)?;
        self.project(tape, bound, f, domain)
    }

    /// Gradient-free embedding of `batch` (N×d_eff, unit rows).
    pub fn embed(&self, batch: &Tensor, domain: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.embed_on_tape(&mut tape, &bound, batch, domain)?;
        Ok(tape.value(out).clone())
    }
}
