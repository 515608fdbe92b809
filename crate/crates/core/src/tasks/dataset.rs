use crate::tensor::{numel, Tensor};
use crate::Scalar;

use super::DataError;

/// Examples of one class. `id` is the dataset-level class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassData<S> {
    pub id: usize,
    pub examples: Vec<Tensor<S>>,
}

/// Per-feature affine map applied to raw values: `(v - min) / (max - min)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    /// Scaled value, with a constant feature (`min == max`) mapped to 0.
    pub fn apply(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub feature_shape: Vec<usize>,
    pub classes: Vec<ClassData<S>>,
    pub normalization: Option<Normalization>,
}

impl<S: Scalar> Dataset<S> {
    /// Validates the shape and non-emptiness invariants.
    pub fn new(feature_shape: Vec<usize>, classes: Vec<ClassData<S>>) -> Result<Self, DataError> {
        if classes.is_empty() {
            return Err(DataError::Empty);
        }
        for c in &classes {
            if c.examples.is_empty() {
                return Err(DataError::EmptyClass { class: c.id });
            }
            if let Some(e) = c.examples.iter().find(|e| e.shape() != feature_shape.as_slice()) {
                return Err(DataError::FeatureShape {
                    class: c.id,
                    expected: feature_shape.clone(),
                    found: e.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            feature_shape,
            classes,
            normalization: None,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        numel(&self.feature_shape)
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.examples.len()).collect()
    }

    pub fn n_examples(&self) -> usize {
        self.class_sizes().iter().sum()
    }

    /// Rescales every feature to `[0, 1]` using the min and max over all examples.
    pub fn normalize_min_max(&self) -> Self {
        let d = self.feature_dim();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for e in self.classes.iter().flat_map(|c| &c.examples) {
            for (j, v) in e.data().iter().enumerate() {
                min[j] = min[j].min(v.as_f64());
                max[j] = max[j].max(v.as_f64());
            }
        }
        let norm = Normalization { min, max };
        let classes = self
            .classes
            .iter()
            .map(|c| ClassData {
                id: c.id,
                examples: c
                    .examples
                    .iter()
                    .map(|e| {
                        let data = e
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(j, v)| S::lit(norm.apply(j, v.as_f64())))
                            .collect();
                        Tensor::new(e.shape().to_vec(), data).expect("same shape")
                    })
                    .collect(),
            })
            .collect();
        Self {
            feature_shape: self.feature_shape.clone(),
            classes,
            normalization: Some(norm),
        }
    }

    /// First `n_first` classes and the remainder, as two datasets with disjoint classes.
    pub fn split_classes(&self, n_first: usize) -> Result<(Self, Self), DataError> {
        if n_first == 0 || n_first >= self.n_classes() {
            return Err(DataError::InsufficientClasses {
                needed: n_first + 1,
                available: self.n_classes(),
            });
        }
        let part = |cs: &[ClassData<S>]| Self {
            feature_shape: self.feature_shape.clone(),
            classes: cs.to_vec(),
            normalization: self.normalization.clone(),
        };
        Ok((part(&self.classes[..n_first]), part(&self.classes[n_first..])))
    }

    /// All examples stacked as `[n, ..feature_shape]` with labels equal to class positions.
    pub fn stacked(&self) -> (Tensor<S>, Vec<usize>) {
        let refs: Vec<&Tensor<S>> = self.classes.iter().flat_map(|c| &c.examples).collect();
        let labels = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c.examples.len()))
            .collect();
        (Tensor::stack(&refs).expect("uniform feature shape"), labels)
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            feature_shape: self.feature_shape.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassData {
                    id: c.id,
                    examples: c.examples.iter().map(Tensor::cast).collect(),
                })
                .collect(),
            normalization: self.normalization.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Dataset<f64> {
        let ex = |v: &[f64]| Tensor::vector(v.to_vec());
        Dataset::new(
            vec![2],
            vec![
                ClassData {
                    id: 0,
                    examples: vec![ex(&[0.0, 5.0]), ex(&[2.0, 5.0])],
                },
                ClassData {
                    id: 1,
                    examples: vec![ex(&[4.0, 5.0])],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn normalization_maps_to_unit_range() {
        let n = ds().normalize_min_max();
        let (x, y) = n.stacked();
        assert_eq!(x.data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert_eq!(y, vec![0, 0, 1]);
        assert_eq!(n.normalization.unwrap().max, vec![4.0, 5.0]);
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!(Dataset::<f64>::new(vec![2], vec![]), Err(DataError::Empty)));
        let bad = ClassData {
            id: 3,
            examples: vec![Tensor::vector(vec![1.0])],
        };
        assert!(matches!(
            Dataset::new(vec![2], vec![bad]),
            Err(DataError::FeatureShape { class: 3, .. })
        ));
        let empty = ClassData::<f64> {
            id: 4,
            examples: vec![],
        };
        assert!(matches!(
            Dataset::new(vec![2], vec![empty]),
            Err(DataError::EmptyClass { class: 4 })
        ));
    }

    #[test]
    fn split_is_disjoint() {
        let (a, b) = ds().split_classes(1).unwrap();
        assert_eq!(a.classes[0].id, 0);
        assert_eq!(b.classes[0].id, 1);
        assert!(ds().split_classes(2).is_err());
    }
}
