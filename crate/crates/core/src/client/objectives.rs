//! Differentiable reference objectives used in place of the neural model.

use crate::error::{Error, Result};

/// A local task: per-example losses averaged over a batch of example indices.
pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;

    fn num_examples(&self) -> usize;

    /// Mean loss over `batch`.
    fn loss(&self, theta: &[f64], batch: &[usize]) -> f64;

    /// Writes the gradient of the batch-mean loss into `grad` (length `dim`)
    /// and returns the loss.
    fn loss_and_gradient(&self, theta: &[f64], batch: &[usize], grad: &mut [f64]) -> f64;

    fn gradient(&self, theta: &[f64], batch: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.loss_and_gradient(theta, batch, &mut g);
        g
    }

    fn full_loss(&self, theta: &[f64]) -> f64 {
        let all: Vec<usize> = (0..self.num_examples()).collect();
        self.loss(theta, &all)
    }
}

/// Least squares over example rows: each example contributes `0.5 (a_i . theta - b_i)^2`.
///
/// The full-batch loss is `(1 / 2n) ||A theta - b||^2`, the per-example mean.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    dim: usize,
    rows: Vec<f64>,
    targets: Vec<f64>,
}

impl QuadraticObjective {
    /// `rows` is row-major with `targets.len()` rows of length `dim`.
    pub fn new(dim: usize, rows: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * targets.len() {
            return Err(Error::Dimension {
                expected: dim * targets.len(),
                actual: rows.len(),
            });
        }
        if targets.is_empty() {
            return Err(Error::domain("quadratic objective needs at least one row"));
        }
        Ok(QuadraticObjective { dim, rows, targets })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    fn residual(&self, theta: &[f64], i: usize) -> f64 {
        let dot: f64 = self.row(i).iter().zip(theta).map(|(a, t)| a * t).sum();
        dot - self.targets[i]
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_examples(&self) -> usize {
        self.targets.len()
    }

    fn loss(&self, theta: &[f64], batch: &[usize]) -> f64 {
        let sum: f64 = batch
            .iter()
            .map(|&i| {
                let r = self.residual(theta, i);
                0.5 * r * r
            })
            .sum();
        sum / batch.len() as f64
    }

    fn loss_and_gradient(&self, theta: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let r = self.residual(theta, i);
            loss += 0.5 * r * r;
            for (g, a) in grad.iter_mut().zip(self.row(i)) {
                *g += scale * r * a;
            }
        }
        loss * scale
    }
}

/// One softmax example: sparse input features and a sparse target distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxExample {
    pub features: Vec<(usize, f64)>,
    pub target: Vec<(usize, f64)>,
}

/// Multinomial logistic regression `z = W x + b` with cross-entropy against a
/// target distribution. `theta` stores `W` row-major (`outputs x inputs`)
/// followed by `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxObjective {
    inputs: usize,
    outputs: usize,
    examples: Vec<SoftmaxExample>,
    /// Outputs the softmax normalizes over; all outputs when `None`.
    support: Option<Vec<bool>>,
}

impl SoftmaxObjective {
    pub fn new(inputs: usize, outputs: usize, examples: Vec<SoftmaxExample>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::domain("softmax objective needs non-empty feature and output spaces"));
        }
        for (n, ex) in examples.iter().enumerate() {
            let bad_in = ex.features.iter().any(|&(i, _)| i >= inputs);
            let bad_out = ex.target.iter().any(|&(j, _)| j >= outputs);
            if bad_in || bad_out {
                return Err(Error::structural(format!("example {n} indexes outside the model")));
            }
        }
        Ok(SoftmaxObjective {
            inputs,
            outputs,
            examples,
            support: None,
        })
    }

    /// Restricts the softmax to `outputs`; logits elsewhere are ignored and
    /// their parameters receive no gradient.
    pub fn with_support(mut self, outputs: &[usize]) -> Result<Self> {
        let mut mask = vec![false; self.outputs];
        for &j in outputs {
            *mask.get_mut(j).ok_or_else(|| Error::structural(format!("support output {j} out of range")))? = true;
        }
        for (n, ex) in self.examples.iter().enumerate() {
            if ex.target.iter().any(|&(j, y)| y != 0.0 && !mask[j]) {
                return Err(Error::structural(format!("example {n} targets an output outside the support")));
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::structural("empty softmax support"));
        }
        self.support = Some(mask);
        Ok(self)
    }

    pub fn in_support(&self, j: usize) -> bool {
        self.support.as_ref().is_none_or(|m| m[j])
    }

    /// Dense-feature classification with integer labels.
    pub fn classification(
        inputs: usize,
        classes: usize,
        features: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        let examples = features
            .iter()
            .zip(labels)
            .map(|(x, &y)| SoftmaxExample {
                features: x.iter().copied().enumerate().collect(),
                target: vec![(y, 1.0)],
            })
            .collect();
        SoftmaxObjective::new(inputs, classes, examples)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn examples(&self) -> &[SoftmaxExample] {
        &self.examples
    }

    pub fn param_dim(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    /// Logits for a sparse feature vector.
    pub fn logits(&self, theta: &[f64], features: &[(usize, f64)]) -> Vec<f64> {
        logits(self.inputs, self.outputs, theta, features)
    }

    fn example_loss(&self, theta: &[f64], ex: &SoftmaxExample, probs: &mut Vec<f64>) -> f64 {
        let mut z = self.logits(theta, &ex.features);
        if let Some(mask) = &self.support {
            for (v, &m) in z.iter_mut().zip(mask) {
                if !m {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        probs.clear();
        probs.extend(z.iter().map(|v| (v - log_norm).exp()));
        ex.target.iter().filter(|p| p.1 != 0.0).map(|&(j, y)| -y * (z[j] - log_norm)).sum()
    }
}

pub(crate) fn logits(inputs: usize, outputs: usize, theta: &[f64], features: &[(usize, f64)]) -> Vec<f64> {
    let bias = &theta[inputs * outputs..];
    (0..outputs)
        .map(|j| {
            let row = &theta[j * inputs..(j + 1) * inputs];
            features.iter().map(|&(i, x)| row[i] * x).sum::<f64>() + bias[j]
        })
        .collect()
}

impl LocalObjective for SoftmaxObjective {
    fn dim(&self) -> usize {
        Self::param_dim(self.inputs, self.outputs)
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn loss(&self, theta: &[f64], batch: &[usize]) -> f64 {
        let mut probs = Vec::with_capacity(self.outputs);
        let sum: f64 = batch
            .iter()
            .map(|&n| self.example_loss(theta, &self.examples[n], &mut probs))
            .sum();
        sum / batch.len() as f64
    }

    fn loss_and_gradient(&self, theta: &[f64], batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let bias_at = self.inputs * self.outputs;
        let mut probs = Vec::with_capacity(self.outputs);
        let mut err = vec![0.0; self.outputs];
        let mut loss = 0.0;
        for &n in batch {
            let ex = &self.examples[n];
            loss += self.example_loss(theta, ex, &mut probs);
            let mass: f64 = ex.target.iter().map(|&(_, y)| y).sum();
            for (e, p) in err.iter_mut().zip(&probs) {
                *e = mass * p;
            }
            for &(j, y) in &ex.target {
                err[j] -= y;
            }
            for (j, &e) in err.iter().enumerate() {
                grad[bias_at + j] += scale * e;
                let row = j * self.inputs;
                for &(i, x) in &ex.features {
                    grad[row + i] += scale * e * x;
                }
            }
        }
        loss * scale
    }
}
