use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{IdianError, Result};
use crate::rng::rng_for;

/// Missing-completely-at-random masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub rate: f64,
    pub seed: u64,
    /// Drop exactly `round(rate·d)` entries per instance instead of
    /// independent per-entry Bernoulli draws.
    #[serde(default)]
    pub exact_per_instance: bool,
}

impl MissingSpec {
    pub fn mcar(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            seed,
            exact_per_instance: false,
        }
    }
}

/// Hides entries of a fully observed dataset; hidden features become 0.
pub fn simulate_missing(ds: &DomainDataset, spec: &MissingSpec) -> Result<DomainDataset> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(IdianError::config(format!(
            "missing rate {} outside [0, 1)",
            spec.rate
        )));
    }
    if !ds.is_fully_observed() {
        return Err(IdianError::usage(
            "dataset already has missing entries; masking twice is not allowed",
        ));
    }
    let mut out = ds.clone();
    let mut rng = rng_for(spec.seed, "missing", 0);
    let drop_count = (spec.rate * ds.dim as f64).round() as usize;
    for inst in &mut out.instances {
        if spec.exact_per_instance {
            for k in sample(&mut rng, ds.dim, drop_count.min(ds.dim)) {
                inst.mask[k] = false;
                inst.features[k] = 0.0;
            }
        } else {
            for (f, m) in inst.features.iter_mut().zip(inst.mask.iter_mut()) {
                if rng.random::<f64>() < spec.rate {
                    *m = false;
                    *f = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Instance};

    fn complete(n: usize, d: usize) -> DomainDataset {
        let instances = (0..n)
            .map(|i| Instance::observed((0..d).map(|k| 1.0 + (i * d + k) as f64).collect(), Some(i % 2)))
            .collect();
        DomainDataset::new(Domain::Target, instances, d, 2, n).unwrap()
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let ds = complete(5, 4);
        let out = simulate_missing(&ds, &MissingSpec::mcar(0.0, 1)).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn observed_fraction_concentrates() {
        let ds = complete(100, 1000);
        let out = simulate_missing(&ds, &MissingSpec::mcar(0.4, 9)).unwrap();
        let frac = out.observed_fraction();
        assert!((frac - 0.6).abs() < 0.02, "observed fraction {frac}");
    }

    #[test]
    fn same_seed_same_masks() {
        let ds = complete(20, 30);
        let a = simulate_missing(&ds, &MissingSpec::mcar(0.5, 3)).unwrap();
        let b = simulate_missing(&ds, &MissingSpec::mcar(0.5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_observed_values_untouched() {
        let ds = complete(30, 10);
        let out = simulate_missing(&ds, &MissingSpec::mcar(0.6, 5)).unwrap();
        for (a, b) in ds.instances.iter().zip(&out.instances) {
            assert_eq!(a.label, b.label);
            for k in 0..10 {
                if b.mask[k] {
                    assert_eq!(a.features[k], b.features[k]);
                } else {
                    assert_eq!(b.features[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn double_masking_forbidden() {
        let ds = complete(10, 10);
        let once = simulate_missing(&ds, &MissingSpec::mcar(0.5, 1)).unwrap();
        assert!(matches!(
            simulate_missing(&once, &MissingSpec::mcar(0.5, 2)),
            Err(IdianError::Usage(_))
        ));
    }

    #[test]
    fn exact_count_per_instance() {
        let ds = complete(10, 10);
        let spec = MissingSpec {
            rate: 0.4,
            seed: 2,
            exact_per_instance: true,
        };
        let out = simulate_missing(&ds, &spec).unwrap();
        for inst in &out.instances {
            assert_eq!(inst.mask.iter().filter(|m| !**m).count(), 4);
        }
    }

    #[test]
    fn rate_one_rejected() {
        let ds = complete(2, 2);
        assert!(simulate_missing(&ds, &MissingSpec::mcar(1.0, 0)).is_err());
    }
}
