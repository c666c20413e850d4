//! Labelled image collections: synthetic generation, image-folder I/O and
//! the class-disjoint train/test split used for retrieval.

mod folder;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use folder::{export_image_folder, load_image_folder, DatasetMetadata, METADATA_FILE};
pub use synthetic::{canonical_glyph, generate_synthetic, GlyphConfig, GlyphStyle};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("class directory {0} has no readable images")]
    EmptyClass(std::path::PathBuf),
    #[error("dataset is unusable: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Images (N×C×H×W, values in [0, 1]) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        split: Split,
        class_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(DataError::Invalid(format!(
                "label {bad} has no entry in a table of {} class names",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// (C, H, W) shared by every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![c, h, w], self.images.item_slice(i).to_vec()).expect("image shape")
    }

    /// Gathers the given items into an N×C×H×W batch plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.item_slice(i));
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Every class must have at least two items for positives to exist.
    pub fn check_trainable(&self) -> Result<(), DataError> {
        for class in self.classes() {
            let n = self.labels.iter().filter(|&&y| y == class).count();
            if n < 2 {
                return Err(DataError::Invalid(format!(
                    "class {class} ({}) has {n} item(s); training needs at least 2",
                    self.class_names[class]
                )));
            }
        }
        Ok(())
    }

    fn subset(&self, keep: impl Fn(usize) -> bool, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            split,
            class_names: self.class_names.clone(),
        }
    }
}

/// Class-disjoint split: the first `ceil(C / 2)` class ids (ascending) train,
/// the remaining ones test. Labels keep their original ids.
pub fn split_train_test(dataset: &Dataset) -> Result<(Dataset, Dataset), DataError> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(DataError::Invalid(format!(
            "splitting needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let cut = classes.len().div_ceil(2);
    let train: BTreeSet<usize> = classes[..cut].iter().copied().collect();
    Ok((
        dataset.subset(|y| train.contains(&y), Split::Train),
        dataset.subset(|y| !train.contains(&y), Split::Test),
    ))
}
