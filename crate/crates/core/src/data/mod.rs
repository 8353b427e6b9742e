//! Datasets, checkpoints and metrics files.

pub mod checkpoint;
pub mod idx;
pub mod metrics;
pub mod synthetic;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use idx::{load_mnist, load_mnist_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use metrics::{read_metrics, EpochRow, MetricsWriter, METRICS_HEADER};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled samples; `inputs` is `n × features` (or `n × C × H × W`), in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn features(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Copy the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let f = self.features();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::domain(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(&src[i * f..(i + 1) * f]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let (inputs, labels) = self.batch(&(0..n).collect::<Vec<_>>())?;
        Self::new(inputs, labels, self.classes, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_labels() {
        let x = Tensor::zeros(&[3, 2]).unwrap();
        assert!(Dataset::new(x.clone(), vec![0, 1], 2, Split::Train).is_err());
        assert!(Dataset::new(x, vec![0, 1, 2], 2, Split::Train).is_err());
    }

    #[test]
    fn batch_copies_rows() {
        let x = Tensor::new(vec![3, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let d = Dataset::new(x, vec![0, 1, 0], 2, Split::Test).unwrap();
        let (b, l) = d.batch(&[2, 0]).unwrap();
        assert_eq!(b.data(), &[0.4, 0.5, 0.0, 0.1]);
        assert_eq!(l, vec![0, 0]);
        assert_eq!(d.take(2).unwrap().len(), 2);
        assert!(d.batch(&[3]).is_err());
    }
}
