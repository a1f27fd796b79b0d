//! Datasets, synthetic task generation and client partitioning.

mod cifar;
mod partition;
mod synth;

pub use cifar::{ingest_cifar10, CIFAR10_CLASSES, CIFAR10_RECORD};
pub use partition::{apply_client_shift, partition_by_classes, split_local, Heterogeneity, LocalSplit, PartitionSpec};
pub use synth::synth_task;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images, `N × C × H × W` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task_id: usize,
    pub num_classes: usize,
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, task_id: usize, num_classes: usize, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if labels.is_empty() || labels.len() != images.shape()[0] {
            return Err(Error::Data(format!("{} labels for {} images", labels.len(), images.shape()[0])));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        Ok(Self {
            name: name.into(),
            task_id,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(channels, height, width)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        (
            Tensor::from_parts(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Data(format!("empty subset of `{}`", self.name)));
        }
        let (images, labels) = self.batch(indices);
        Ok(Dataset {
            name: self.name.clone(),
            task_id: self.task_id,
            num_classes: self.num_classes,
            images,
            labels,
        })
    }

    /// Concatenates datasets sharing image dimensions and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_dims() != first.image_dims() || p.num_classes != first.num_classes {
                return Err(Error::Data(format!("cannot concatenate `{}` with `{}`", first.name, p.name)));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let (c, h, w) = first.image_dims();
        Ok(Dataset {
            name: first.name.clone(),
            task_id: first.task_id,
            num_classes: first.num_classes,
            images: Tensor::from_parts(vec![labels.len(), c, h, w], data),
            labels,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub(crate) fn map_images(&self, f: impl Fn(f64) -> f64) -> Dataset {
        let data = self.images.data().iter().map(|&x| f(x)).collect();
        Dataset {
            images: Tensor::from_parts(self.images.shape().to_vec(), data),
            ..self.clone()
        }
    }
}
