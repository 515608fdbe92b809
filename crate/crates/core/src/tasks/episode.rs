use rand::seq::index::sample;

use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;
use crate::Scalar;

use super::{DataError, Dataset};

/// One few-shot task. Examples are stacked along the first axis, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<S> {
    pub support_x: Tensor<S>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<S>,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Dataset class position behind each episode-local label.
    pub classes: Vec<usize>,
    /// `(class position, example index)` of every support row.
    pub support_source: Vec<(usize, usize)>,
    pub query_source: Vec<(usize, usize)>,
}

/// Draws `n_way` classes and, within each, `k_shot + q_query` distinct examples.
pub fn sample_episode<S: Scalar>(
    ds: &Dataset<S>,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    seed: u64,
) -> Result<Episode<S>, DataError> {
    if n_way == 0 {
        return Err(DataError::InsufficientClasses {
            needed: 0,
            available: ds.n_classes(),
        });
    }
    if ds.n_classes() < n_way {
        return Err(DataError::InsufficientClasses {
            needed: n_way,
            available: ds.n_classes(),
        });
    }
    let per_class = k_shot + q_query;
    let mut rng = rng_from(seed, &[stream::EPISODE]);
    let classes = sample(&mut rng, ds.n_classes(), n_way).into_vec();
    let mut support_source = Vec::with_capacity(n_way * k_shot);
    let mut query_source = Vec::with_capacity(n_way * q_query);
    for &c in &classes {
        let available = ds.classes[c].examples.len();
        if available < per_class {
            return Err(DataError::InsufficientExamples {
                class: ds.classes[c].id,
                needed: per_class,
                available,
            });
        }
        let picks = sample(&mut rng, available, per_class).into_vec();
        support_source.extend(picks[..k_shot].iter().map(|&e| (c, e)));
        query_source.extend(picks[k_shot..].iter().map(|&e| (c, e)));
    }
    let gather = |src: &[(usize, usize)], per: usize| {
        let rows: Vec<&Tensor<S>> = src.iter().map(|&(c, e)| &ds.classes[c].examples[e]).collect();
        let x = if rows.is_empty() {
            let mut shape = vec![0];
            shape.extend_from_slice(&ds.feature_shape);
            Tensor::zeros(shape)
        } else {
            Tensor::stack(&rows).expect("uniform feature shape")
        };
        let y = (0..n_way).flat_map(|l| std::iter::repeat_n(l, per)).collect();
        (x, y)
    };
    let (support_x, support_y) = gather(&support_source, k_shot);
    let (query_x, query_y) = gather(&query_source, q_query);
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        n_way,
        k_shot,
        q_query,
        classes,
        support_source,
        query_source,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::tasks::{gen_synthetic, SyntheticSpec};

    fn data() -> Dataset<f64> {
        gen_synthetic(
            &SyntheticSpec {
                n_classes: 8,
                feature_dim: 3,
                radius: 1.0,
                sigma: 0.1,
                examples_per_class: 25,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn minimal_episode() {
        let e = sample_episode(&data(), 1, 1, 1, 4).unwrap();
        assert_eq!((e.support_y.clone(), e.query_y.clone()), (vec![0], vec![0]));
        assert_ne!(e.support_source[0], e.query_source[0]);
        assert_ne!(e.support_x, e.query_x);
    }

    #[test]
    fn deterministic_in_seed() {
        let ds = data();
        assert_eq!(
            sample_episode(&ds, 5, 2, 3, 9).unwrap(),
            sample_episode(&ds, 5, 2, 3, 9).unwrap()
        );
        assert_ne!(
            sample_episode(&ds, 5, 2, 3, 9).unwrap(),
            sample_episode(&ds, 5, 2, 3, 10).unwrap()
        );
    }

    #[test]
    fn five_way_five_shot_counts() {
        let e = sample_episode(&data(), 5, 5, 15, 0).unwrap();
        assert_eq!(e.support_x.shape(), &[25, 3]);
        assert_eq!(e.query_x.shape(), &[75, 3]);
        for l in 0..5 {
            assert_eq!(e.support_y.iter().filter(|&&y| y == l).count(), 5);
            assert_eq!(e.query_y.iter().filter(|&&y| y == l).count(), 15);
        }
        let distinct: HashSet<_> = e.classes.iter().collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn support_and_query_disjoint_over_many_seeds() {
        let ds = data();
        for seed in 0..1000 {
            let e = sample_episode(&ds, 5, 3, 4, seed).unwrap();
            let s: HashSet<_> = e.support_source.iter().collect();
            assert_eq!(s.len(), e.support_source.len());
            assert!(e.query_source.iter().all(|q| !s.contains(q)), "seed {seed}");
            // relabeling is one bijection shared by both halves
            for (row, &(c, _)) in e.support_source.iter().enumerate() {
                assert_eq!(e.classes[e.support_y[row]], c);
            }
            for (row, &(c, _)) in e.query_source.iter().enumerate() {
                assert_eq!(e.classes[e.query_y[row]], c);
            }
        }
    }

    #[test]
    fn insufficient_data_is_structured() {
        let ds = data();
        assert!(matches!(
            sample_episode(&ds, 9, 1, 1, 0),
            Err(DataError::InsufficientClasses {
                needed: 9,
                available: 8
            })
        ));
        assert!(matches!(
            sample_episode(&ds, 2, 20, 6, 0),
            Err(DataError::InsufficientExamples {
                needed: 26,
                available: 25,
                ..
            })
        ));
    }
}
