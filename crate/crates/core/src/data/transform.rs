use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{IdianError, Result};
use crate::rng::rng_for;

/// Random permutation of `0..dim` for a seed. `out[k] = in[perm[k]]`.
pub fn channel_permutation(dim: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(&mut rng_for(seed, "channel-shuffle", 0));
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Reorders features and masks of every instance by the same permutation.
pub fn apply_permutation(ds: &DomainDataset, perm: &[usize]) -> Result<DomainDataset> {
    if perm.len() != ds.dim {
        return Err(IdianError::config(format!(
            "permutation of length {} for {} features",
            perm.len(),
            ds.dim
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(IdianError::config("not a permutation"));
        }
    }
    let mut out = ds.clone();
    for inst in &mut out.instances {
        inst.features = perm.iter().map(|&p| inst.features[p]).collect();
        inst.mask = perm.iter().map(|&p| inst.mask[p]).collect();
    }
    Ok(out)
}

/// One global channel permutation, returned alongside the shuffled dataset so
/// it can be replayed on a held-out split.
pub fn shuffle_channels(ds: &DomainDataset, seed: u64) -> (DomainDataset, Vec<usize>) {
    let perm = channel_permutation(ds.dim, seed);
    let out = apply_permutation(ds, &perm).expect("generated permutation is valid");
    (out, perm)
}

/// Per-dimension min-max scaling fitted on observed entries only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(ds: &DomainDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(IdianError::usage("cannot fit a scaler on an empty dataset"));
        }
        let mut min = vec![f64::INFINITY; ds.dim];
        let mut max = vec![f64::NEG_INFINITY; ds.dim];
        for inst in &ds.instances {
            for k in 0..ds.dim {
                if inst.mask[k] {
                    min[k] = min[k].min(inst.features[k]);
                    max[k] = max[k].max(inst.features[k]);
                }
            }
        }
        Ok(Self { min, max })
    }

    fn scale(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[k], self.max[k]);
        // Constant or never-observed dimensions.
        if !(hi > lo) {
            return 0.5;
        }
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Maps observed entries into [0, 1]; values outside the fitted range are
    /// clamped. Missing placeholders stay 0.
    pub fn transform(&self, ds: &DomainDataset) -> Result<DomainDataset> {
        if ds.dim != self.min.len() {
            return Err(IdianError::config(format!(
                "scaler fitted on {} dims, dataset has {}",
                self.min.len(),
                ds.dim
            )));
        }
        let mut out = ds.clone();
        for inst in &mut out.instances {
            for k in 0..ds.dim {
                if inst.mask[k] {
                    inst.features[k] = self.scale(k, inst.features[k]);
                }
            }
        }
        Ok(out)
    }
}

pub fn minmax_normalize(train: &DomainDataset) -> Result<(DomainDataset, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(train)?;
    let out = scaler.transform(train)?;
    Ok((out, scaler))
}
