use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::DomainDataset;
use crate::error::{IdianError, Result};
use crate::rng::{rng_for, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBlock {
    /// Row indices into the originating dataset.
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
    pub masks: Array2<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBlock {
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
    pub masks: Array2<f64>,
}

/// One training batch: a source block plus a labeled and an unlabeled target
/// block, each with `n_b` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: LabeledBlock,
    pub target_labeled: LabeledBlock,
    pub target_unlabeled: UnlabeledBlock,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source.indices.len()
    }
}

/// Draws `n` indices from `pool`, without replacement when the pool is large
/// enough and with replacement otherwise.
fn draw(pool: &[usize], n: usize, rng: &mut SeededRng) -> Vec<usize> {
    if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn labeled_block(ds: &DomainDataset, indices: Vec<usize>) -> Result<LabeledBlock> {
    Ok(LabeledBlock {
        features: ds.feature_matrix(&indices),
        masks: ds.mask_matrix(&indices),
        labels: ds.labels(&indices)?,
        indices,
    })
}

/// Splits a reshuffled source into `floor(n_s / n_b)` batches and pairs each
/// with fresh labeled and unlabeled target samples.
pub fn compose_batches(
    source: &DomainDataset,
    target: &DomainDataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(IdianError::config("batch size must be at least 1"));
    }
    if source.len() < batch_size {
        return Err(IdianError::config(format!(
            "source has {} instances, fewer than the batch size {batch_size}",
            source.len()
        )));
    }
    if target.labeled_count == 0 {
        return Err(IdianError::config(
            "the labeled target pool is empty; at least one labeled target instance is required",
        ));
    }
    if target.labeled_count == target.len() {
        return Err(IdianError::config("the unlabeled target pool is empty"));
    }
    let mut rng = rng_for(epoch_seed, "batches", 0);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let labeled_pool: Vec<usize> = (0..target.labeled_count).collect();
    let unlabeled_pool: Vec<usize> = (target.labeled_count..target.len()).collect();

    order
        .chunks_exact(batch_size)
        .map(|chunk| {
            let src = labeled_block(source, chunk.to_vec())?;
            let tl = labeled_block(target, draw(&labeled_pool, batch_size, &mut rng))?;
            let tu_idx = draw(&unlabeled_pool, batch_size, &mut rng);
            let tu = UnlabeledBlock {
                features: target.feature_matrix(&tu_idx),
                masks: target.mask_matrix(&tu_idx),
                indices: tu_idx,
            };
            Ok(Batch {
                source: src,
                target_labeled: tl,
                target_unlabeled: tu,
            })
        })
        .collect()
}
