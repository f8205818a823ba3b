use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{Domain, DomainDataset, Instance};
use crate::error::{IdianError, Result};
use crate::rng::{rng_for, SeededRng};

/// Two domains sharing class-conditional Gaussian clusters in a latent space,
/// seen through different linear maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    /// Scale of the class means in latent space.
    pub separation: f64,
    /// Standard deviation of the within-class latent noise.
    pub noise: f64,
    /// Extra per-feature observation noise added in the target domain only.
    pub target_feature_noise: f64,
    /// When false the target uses the source map and no rotation.
    pub shift: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            n_classes: 4,
            source_dim: 32,
            target_dim: 32,
            separation: 1.5,
            noise: 1.0,
            target_feature_noise: 0.0,
            shift: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn latent_dim(&self) -> usize {
        (self.source_dim.min(self.target_dim) / 2).max(1)
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(k: usize, rng: &mut SeededRng) -> Array2<f64> {
    let mut q = gaussian(k, k, 1.0, rng);
    for i in 0..k {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let qj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &qj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

fn sample_domain(
    domain: Domain,
    spec: &SyntheticSpec,
    means: &Array2<f64>,
    map: &Array2<f64>,
    feature_noise: f64,
    rng: &mut SeededRng,
) -> Result<DomainDataset> {
    let k = means.ncols();
    let dim = map.ncols();
    let mut labels: Vec<usize> = (0..spec.n_classes)
        .flat_map(|c| std::iter::repeat_n(c, spec.n_per_class))
        .collect();
    labels.shuffle(rng);
    let instances = labels
        .into_iter()
        .map(|y| {
            let z: Array1<f64> = &means.row(y)
                + &Array1::from_shape_simple_fn(k, || {
                    let e: f64 = StandardNormal.sample(rng);
                    e * spec.noise
                });
            let x = z.dot(map);
            let features = x
                .iter()
                .map(|v| {
                    let e: f64 = if feature_noise > 0.0 {
                        let n: f64 = StandardNormal.sample(rng);
                        n * feature_noise
                    } else {
                        0.0
                    };
                    sigmoid(v + e)
                })
                .collect();
            Instance::observed(features, Some(y))
        })
        .collect::<Vec<_>>();
    let n = instances.len();
    DomainDataset::new(domain, instances, dim, spec.n_classes, n)
}

/// Returns `(source, target)`, both fully observed and fully labeled, values
/// squashed into (0, 1).
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(DomainDataset, DomainDataset)> {
    if spec.n_classes < 1 || spec.source_dim < spec.n_classes || spec.target_dim < spec.n_classes {
        return Err(IdianError::config(
            "synthetic task needs n_classes >= 1 and both dims >= n_classes",
        ));
    }
    if !spec.shift && spec.source_dim != spec.target_dim {
        return Err(IdianError::config(
            "an unshifted synthetic task needs equal source and target dims",
        ));
    }
    let k = spec.latent_dim();
    let mut rng = rng_for(spec.seed, "synthetic-structure", 0);
    let means = gaussian(spec.n_classes, k, spec.separation, &mut rng);
    let source_map = gaussian(k, spec.source_dim, 1.0 / (k as f64).sqrt(), &mut rng);
    let target_map = if spec.shift {
        let rotation = random_rotation(k, &mut rng);
        let map = gaussian(k, spec.target_dim, 1.0 / (k as f64).sqrt(), &mut rng);
        rotation.dot(&map)
    } else {
        source_map.clone()
    };
    // Source and target draw samples from separate streams so the unshifted
    // case yields two independent samples from one distribution.
    let mut src_rng = rng_for(spec.seed, "synthetic-source", 0);
    let mut tgt_rng = rng_for(spec.seed, "synthetic-target", 0);
    let source = sample_domain(Domain::Source, spec, &means, &source_map, 0.0, &mut src_rng)?;
    let target = sample_domain(
        Domain::Target,
        spec,
        &means,
        &target_map,
        spec.target_feature_noise,
        &mut tgt_rng,
    )?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: bool) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: 200,
            n_classes: 2,
            source_dim: 8,
            target_dim: 8,
            separation: 4.0,
            noise: 0.3,
            target_feature_noise: 0.0,
            shift,
            seed: 3,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = make_synthetic(&small(true)).unwrap();
        let b = make_synthetic(&small(true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = rng_for(1, "t", 0);
        let q = random_rotation(5, &mut rng);
        let qqt = q.dot(&q.t());
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qqt[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn values_in_unit_interval_and_balanced() {
        let (s, t) = make_synthetic(&small(true)).unwrap();
        for ds in [&s, &t] {
            assert_eq!(ds.len(), 400);
            assert!(ds
                .instances
                .iter()
                .flat_map(|x| x.features.iter())
                .all(|v| *v > 0.0 && *v < 1.0));
            let ones = ds.instances.iter().filter(|x| x.label == Some(1)).count();
            assert_eq!(ones, 200);
        }
    }

    #[test]
    fn unshifted_dims_must_match() {
        let mut spec = small(false);
        spec.target_dim = 10;
        assert!(make_synthetic(&spec).is_err());
    }
}
