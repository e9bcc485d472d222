//! Flat parameter vectors, client updates and population weights.
//!
//! Every reduction walks entries (and clients) in ascending index order so
//! that repeated runs produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model state or update delta: a dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    /// Wraps `values`, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(ParameterVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Dimension {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    /// Euclidean norm, summed in index order.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        axpy(-1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<ParameterVector> {
        ParameterVector::new(self.0.iter().map(|v| a * v).collect())
    }

    /// Applies `f` entrywise and re-validates finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ParameterVector> {
        ParameterVector::new(self.0.iter().map(|&v| f(v)).collect())
    }

    /// Combines two equally sized vectors entrywise.
    pub fn zip_map(
        &self,
        other: &ParameterVector,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ParameterVector> {
        other.check_dim(self.dim())?;
        ParameterVector::new(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParameterVector::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(v: ParameterVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for ParameterVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Returns `a * x + y`. Inputs are left untouched.
pub fn axpy(a: f64, x: &ParameterVector, y: &ParameterVector) -> Result<ParameterVector> {
    if !a.is_finite() {
        return Err(Error::numeric(format!("non-finite scalar {a}")));
    }
    x.check_dim(y.dim())?;
    ParameterVector::new(
        x.0.iter()
            .zip(y.0.iter())
            .map(|(&xi, &yi)| a * xi + yi)
            .collect(),
    )
}

/// One selected client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `theta_t - y_k^E`.
    pub delta: ParameterVector,
    /// Local example count, at least 1.
    pub n_k: usize,
    pub train_loss: f64,
}

/// Per-client weights `p_k = n_k / sum_j n_j` over the full population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationWeights {
    weights: Vec<f64>,
    counts: Vec<usize>,
}

impl PopulationWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, client: usize) -> Option<f64> {
        self.weights.get(client).copied()
    }
}

pub fn population_weights(sample_counts: &[usize]) -> Result<PopulationWeights> {
    if sample_counts.is_empty() {
        return Err(Error::domain("population is empty"));
    }
    if let Some(k) = sample_counts.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!("client {k} has zero samples")));
    }
    let total: u128 = sample_counts.iter().map(|&n| n as u128).sum();
    let total = total as f64;
    Ok(PopulationWeights {
        weights: sample_counts.iter().map(|&n| n as f64 / total).collect(),
        counts: sample_counts.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &pv(&[5., 5.]), &pv(&[1., 2.])).unwrap(), pv(&[1., 2.]));
        assert_eq!(axpy(1.0, &pv(&[0., 0.]), &pv(&[3., 4.])).unwrap(), pv(&[3., 4.]));
        assert_eq!(axpy(2.0, &pv(&[1., -1.]), &pv(&[1., 1.])).unwrap(), pv(&[3., -1.]));
    }

    #[test]
    fn axpy_rejects_mismatch() {
        let err = axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, actual: 1 }));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(axpy(f64::INFINITY, &pv(&[1.0]), &pv(&[1.0])).is_err());
        assert!(axpy(1e308, &pv(&[1e308]), &pv(&[1e308])).is_err());
    }

    #[test]
    fn weights_examples() {
        assert_eq!(population_weights(&[5]).unwrap().weights(), &[1.0]);
        assert_eq!(population_weights(&[1, 3]).unwrap().weights(), &[0.25, 0.75]);
        let counts = [14152, 39463, 91835];
        let w = population_weights(&counts).unwrap();
        for (p, n) in w.weights().iter().zip(counts) {
            assert_eq!(*p, n as f64 / 145450.0);
        }
    }

    #[test]
    fn weights_errors() {
        assert!(matches!(population_weights(&[]), Err(Error::Domain(_))));
        assert!(matches!(population_weights(&[3, 0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(counts in prop::collection::vec(1usize..100_000, 1..40)) {
            let w = population_weights(&counts).unwrap();
            let s: f64 = w.weights().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(w.weights().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn weights_permutation_equivariant(
            counts in prop::collection::vec(1usize..10_000, 2..20),
            rot in 0usize..20,
        ) {
            let mut rotated = counts.clone();
            let r = rot % counts.len();
            rotated.rotate_left(r);
            let a = population_weights(&counts).unwrap();
            let b = population_weights(&rotated).unwrap();
            let mut expect = a.weights().to_vec();
            expect.rotate_left(r);
            prop_assert_eq!(expect, b.weights().to_vec());
        }

        #[test]
        fn weights_scale_invariant(
            counts in prop::collection::vec(1usize..10_000, 1..20),
            c in 1usize..1000,
        ) {
            let scaled: Vec<usize> = counts.iter().map(|n| n * c).collect();
            let a = population_weights(&counts).unwrap();
            let b = population_weights(&scaled).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn axpy_inverse(
            a in -1.0f64..1.0,
            xy in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..32),
        ) {
            let x = ParameterVector::new(xy.iter().map(|p| p.0).collect()).unwrap();
            let y = ParameterVector::new(xy.iter().map(|p| p.1).collect()).unwrap();
            let back = axpy(a, &x, &axpy(-a, &x, &y).unwrap()).unwrap();
            for (u, v) in back.iter().zip(y.iter()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
