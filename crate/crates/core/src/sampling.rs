//! Class-balanced mini-batches: P classes with K instances each.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("PK sampler needs P >= 2 and K >= 2, got P={p}, K={k}")]
    Config { p: usize, k: usize },
    #[error("PK sampler needs {p} classes but the dataset has {available}")]
    TooFewClasses { p: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PkConfig {
    /// Classes per batch.
    pub p: usize,
    /// Instances per class.
    pub k: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self { p: 8, k: 4 }
    }
}

impl PkConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.p < 2 || self.k < 2 {
            return Err(SamplerError::Config {
                p: self.p,
                k: self.k,
            });
        }
        Ok(())
    }
}

/// Dataset indices grouped by class, in ascending label order.
#[derive(Debug, Clone)]
pub struct PkSampler {
    cfg: PkConfig,
    classes: Vec<(usize, Vec<usize>)>,
    num_items: usize,
}

impl PkSampler {
    pub fn new(labels: &[usize], cfg: PkConfig) -> Result<Self, SamplerError> {
        cfg.validate()?;
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        if by_class.len() < cfg.p {
            return Err(SamplerError::TooFewClasses {
                p: cfg.p,
                available: by_class.len(),
            });
        }
        Ok(Self {
            cfg,
            classes: by_class.into_iter().collect(),
            num_items: labels.len(),
        })
    }

    pub fn config(&self) -> PkConfig {
        self.cfg
    }

    /// Batches per epoch: `ceil(N / (P·K))`.
    pub fn batches_per_epoch(&self) -> usize {
        self.num_items.div_ceil(self.cfg.batch_size())
    }

    /// Draws P classes uniformly without replacement, then K items from each:
    /// without replacement when the class has at least K items, with
    /// replacement otherwise. Items of one class are contiguous.
    pub fn next_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let PkConfig { p, k } = self.cfg;
        let mut batch = Vec::with_capacity(p * k);
        for ci in sample(rng, self.classes.len(), p) {
            let items = &self.classes[ci].1;
            if items.len() >= k {
                batch.extend(sample(rng, items.len(), k).into_iter().map(|j| items[j]));
            } else {
                batch.extend((0..k).map(|_| items[rng.gen_range(0..items.len())]));
            }
        }
        batch
    }
}
