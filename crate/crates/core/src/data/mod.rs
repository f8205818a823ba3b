//! Partially observed datasets and everything that prepares them for training.

mod batch;
mod csv_io;
mod missing;
mod synthetic;
mod transform;

pub use batch::{compose_batches, Batch, LabeledBlock, UnlabeledBlock};
pub use csv_io::{load_csv, read_csv, write_csv, write_mask_csv};
pub use missing::{simulate_missing, MissingSpec};
pub use synthetic::{make_synthetic, SyntheticSpec};
pub use transform::{
    apply_permutation, channel_permutation, invert_permutation, minmax_normalize,
    shuffle_channels, MinMaxScaler,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{IdianError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A feature vector with its observation mask. Missing entries hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub label: Option<usize>,
}

impl Instance {
    pub fn observed(features: Vec<f64>, label: Option<usize>) -> Self {
        let mask = vec![true; features.len()];
        Self {
            features,
            mask,
            label,
        }
    }

    /// Builds an instance, zeroing any feature whose mask bit is unset.
    pub fn with_mask(mut features: Vec<f64>, mask: Vec<bool>, label: Option<usize>) -> Result<Self> {
        if features.len() != mask.len() {
            return Err(IdianError::config(format!(
                "{} features but {} mask entries",
                features.len(),
                mask.len()
            )));
        }
        for (f, m) in features.iter_mut().zip(&mask) {
            if !m {
                *f = 0.0;
            }
        }
        Ok(Self {
            features,
            mask,
            label,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    /// `features ⊙ (1 - mask) == 0`.
    pub fn placeholder_invariant_holds(&self) -> bool {
        self.features
            .iter()
            .zip(&self.mask)
            .all(|(f, m)| *m || *f == 0.0)
    }
}

/// Instances from one domain. For a target domain the first `labeled_count`
/// instances form the labeled subset; the rest are treated as unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub instances: Vec<Instance>,
    pub dim: usize,
    pub n_classes: usize,
    pub labeled_count: usize,
}

impl DomainDataset {
    pub fn new(
        domain: Domain,
        instances: Vec<Instance>,
        dim: usize,
        n_classes: usize,
        labeled_count: usize,
    ) -> Result<Self> {
        let ds = Self {
            domain,
            instances,
            dim,
            n_classes,
            labeled_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_count > self.instances.len() {
            return Err(IdianError::config("labeled_count exceeds instance count"));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.dim() != self.dim || inst.mask.len() != self.dim {
                return Err(IdianError::Data(format!(
                    "instance {i} has dimension {}, dataset has {}",
                    inst.dim(),
                    self.dim
                )));
            }
            if !inst.placeholder_invariant_holds() {
                return Err(IdianError::Data(format!(
                    "instance {i} has a nonzero value in a missing slot"
                )));
            }
            if let Some(y) = inst.label {
                if y >= self.n_classes {
                    return Err(IdianError::Data(format!(
                        "instance {i} label {y} outside [0, {})",
                        self.n_classes
                    )));
                }
            }
            if i < self.labeled_count && inst.label.is_none() {
                return Err(IdianError::Data(format!(
                    "instance {i} is inside the labeled prefix but has no label"
                )));
            }
        }
        if self.domain == Domain::Source {
            if let Some(i) = self
                .instances
                .iter()
                .position(|x| !x.is_complete() || x.label.is_none())
            {
                return Err(IdianError::Data(format!(
                    "source instance {i} must be fully observed and labeled"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labeled(&self) -> &[Instance] {
        &self.instances[..self.labeled_count]
    }

    pub fn unlabeled(&self) -> &[Instance] {
        &self.instances[self.labeled_count..]
    }

    pub fn is_fully_observed(&self) -> bool {
        self.instances.iter().all(Instance::is_complete)
    }

    pub fn observed_fraction(&self) -> f64 {
        let total = self.len() * self.dim;
        if total == 0 {
            return 1.0;
        }
        let seen: usize = self
            .instances
            .iter()
            .map(|x| x.mask.iter().filter(|m| **m).count())
            .sum();
        seen as f64 / total as f64
    }

    /// Features of the selected rows stacked into a matrix.
    pub fn feature_matrix(&self, rows: &[usize]) -> Array2<f64> {
        gather(rows, self.dim, |i| &self.instances[i].features[..])
    }

    pub fn mask_matrix(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (r, &i) in rows.iter().enumerate() {
            for (c, m) in self.instances[i].mask.iter().enumerate() {
                out[[r, c]] = if *m { 1.0 } else { 0.0 };
            }
        }
        out
    }

    pub fn labels(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|&i| {
                self.instances[i]
                    .label
                    .ok_or_else(|| IdianError::Data(format!("instance {i} has no label")))
            })
            .collect()
    }
}

fn gather<'a>(rows: &[usize], dim: usize, get: impl Fn(usize) -> &'a [f64]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r)
            .iter_mut()
            .zip(get(i))
            .for_each(|(o, v)| *o = *v);
    }
    out
}

/// Row-wise one-hot encoding of class labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (r, &y) in labels.iter().enumerate() {
        out[[r, y]] = 1.0;
    }
    out
}
