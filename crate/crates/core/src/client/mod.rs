//! Client-side local training.
//!
//! A selected client copies the broadcast model, runs `E` epochs of
//! minibatch updates over its shard and returns `theta_t - y^E`. The local
//! optimizer state is created fresh on every call.

mod objectives;
pub mod synthetic;

pub use objectives::{LocalObjective, QuadraticObjective, SoftmaxExample, SoftmaxObjective};
pub(crate) use objectives::logits;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SimRng;
use crate::vector::{ClientUpdate, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClientOptKind {
    #[default]
    Adam,
    Gd,
}

impl std::str::FromStr for ClientOptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(ClientOptKind::Adam),
            "gd" | "sgd" => Ok(ClientOptKind::Gd),
            other => Err(Error::Usage(format!("unknown client optimizer {other:?}"))),
        }
    }
}

/// Local optimizer settings. Adam uses bias correction and decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub eta_l: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: ClientOptKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            eta_l: 0.0005,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 1,
            optimizer: ClientOptKind::Adam,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::domain(format!("eta_l must be positive, got {}", self.eta_l)));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::domain(format!("invalid trainer config {self:?}")));
        }
        Ok(())
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Runs CLIENTOPT for `config.epochs` epochs starting from `theta`.
///
/// `n_k` is the sample count reported for weighting; it is independent of
/// how many training examples the objective exposes.
pub fn local_train(
    client_id: usize,
    theta: &ParameterVector,
    objective: &dyn LocalObjective,
    n_k: usize,
    config: &TrainerConfig,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    config.validate()?;
    theta.check_dim(objective.dim())?;
    let n = objective.num_examples();
    if n == 0 || n_k == 0 {
        return Err(Error::domain(format!("client {client_id} has an empty shard")));
    }

    let d = theta.dim();
    let mut y = theta.as_slice().to_vec();
    let mut grad = vec![0.0; d];
    let mut adam = AdamState {
        m: vec![0.0; d],
        v: vec![0.0; d],
        t: 0,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_loss = if config.epochs == 0 {
        objective.full_loss(&y)
    } else {
        0.0
    };

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let loss = objective.loss_and_gradient(&y, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "client {client_id} diverged in epoch {epoch}: loss {loss}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            match config.optimizer {
                ClientOptKind::Gd => gd_step(&mut y, &grad, config),
                ClientOptKind::Adam => adam_step(&mut y, &grad, &mut adam, config),
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "client {client_id} produced non-finite parameters in epoch {epoch}"
                )));
            }
        }
        train_loss = epoch_loss / batches as f64;
    }

    let delta: Vec<f64> = theta.iter().zip(&y).map(|(t, y)| t - y).collect();
    Ok(ClientUpdate {
        client_id,
        delta: ParameterVector::new(delta)?,
        n_k,
        train_loss,
    })
}

fn gd_step(y: &mut [f64], grad: &[f64], config: &TrainerConfig) {
    let lr = config.eta_l;
    let shrink = 1.0 - lr * config.weight_decay;
    for (p, g) in y.iter_mut().zip(grad) {
        if config.weight_decay != 0.0 {
            *p *= shrink;
        }
        *p -= lr * g;
    }
}

fn adam_step(y: &mut [f64], grad: &[f64], state: &mut AdamState, config: &TrainerConfig) {
    state.t += 1;
    let lr = config.eta_l;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    let shrink = 1.0 - lr * config.weight_decay;
    for i in 0..y.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        y[i] = y[i] * shrink - lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}
