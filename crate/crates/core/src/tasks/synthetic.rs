use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;
use crate::Scalar;

use super::{ClassData, DataError, Dataset};

/// Gaussian blobs around centers drawn uniformly from a ball.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub radius: f64,
    pub sigma: f64,
    pub examples_per_class: usize,
}

impl Default for SyntheticSpec {
    /// 30 classes (20 train + 10 test), 16 features, radius 1, sigma 0.15, 50 per class.
    fn default() -> Self {
        Self {
            n_classes: 30,
            feature_dim: 16,
            radius: 1.0,
            sigma: 0.15,
            examples_per_class: 50,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let problem = if self.n_classes < 2 {
            "n_classes must be at least 2"
        } else if self.feature_dim == 0 {
            "feature_dim must be positive"
        } else if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            "sigma must be positive"
        } else if !(self.radius >= 0.0 && self.radius.is_finite()) {
            "radius must be non-negative"
        } else if self.examples_per_class == 0 {
            "examples_per_class must be positive"
        } else {
            return Ok(());
        };
        Err(DataError::InvalidSpec(problem.into()))
    }
}

/// Class centers used by [`gen_synthetic`] for the same `(spec, seed)`.
pub fn synthetic_centers(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed, &[stream::DATA, 0]);
    let d = spec.feature_dim;
    (0..spec.n_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = spec.radius * rng.random::<f64>().powf(1.0 / d as f64);
            dir.iter().map(|v| v / norm * r).collect()
        })
        .collect()
}

/// Raw (unnormalized) synthetic dataset, deterministic in `seed`.
pub fn gen_synthetic<S: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<Dataset<S>, DataError> {
    spec.validate()?;
    let classes = synthetic_centers(spec, seed)
        .into_iter()
        .enumerate()
        .map(|(c, center)| {
            let mut rng = rng_from(seed, &[stream::DATA, 1, c as u64]);
            let examples = (0..spec.examples_per_class)
                .map(|_| {
                    let v = center
                        .iter()
                        .map(|&m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            S::lit(m + spec.sigma * z)
                        })
                        .collect();
                    Tensor::vector(v)
                })
                .collect();
            ClassData { id: c, examples }
        })
        .collect();
    Dataset::new(vec![spec.feature_dim], classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 4,
            feature_dim: 5,
            radius: 1.0,
            sigma,
            examples_per_class: 400,
        }
    }

    #[test]
    fn degenerate_noise_collapses_to_centers() {
        let s = spec(1e-9);
        let ds: Dataset<f64> = gen_synthetic(&s, 3).unwrap();
        for (c, center) in synthetic_centers(&s, 3).iter().enumerate() {
            assert!(center.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
            for e in &ds.classes[c].examples {
                for (a, b) in e.data().iter().zip(center) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a: Dataset<f64> = gen_synthetic(&spec(0.2), 7).unwrap();
        assert_eq!(a, gen_synthetic(&spec(0.2), 7).unwrap());
        assert_ne!(a, gen_synthetic(&spec(0.2), 8).unwrap());
    }

    #[test]
    fn sample_means_near_centers() {
        let s = spec(0.3);
        let ds: Dataset<f64> = gen_synthetic(&s, 11).unwrap();
        let n = s.examples_per_class as f64;
        let tol = 3.0 * s.sigma / n.sqrt();
        let mut outside = 0;
        let mut total = 0;
        for (c, center) in synthetic_centers(&s, 11).iter().enumerate() {
            for (j, m) in center.iter().enumerate() {
                let mean = ds.classes[c].examples.iter().map(|e| e.data()[j]).sum::<f64>() / n;
                total += 1;
                if (mean - m).abs() > tol {
                    outside += 1;
                }
            }
        }
        // a 3-sigma band holds for 99.7% of coordinates; with 20 coordinates allow one miss
        assert!(outside <= 1, "{outside} of {total} means outside 3 sigma/sqrt(n)");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_synthetic::<f64>(&spec(0.0), 0).is_err());
        let mut s = spec(0.1);
        s.n_classes = 1;
        assert!(gen_synthetic::<f64>(&s, 0).is_err());
    }
}
