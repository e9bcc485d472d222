//! Server-side optimizers consuming the aggregated pseudo-gradient.
//!
//! All three rules follow the printed update forms: FedAvg takes a unit step
//! along the delta, FedAvgM adds exponential momentum, and FedAdam divides
//! the momentum by the root of an exponential second moment. There is no
//! bias correction at the server.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptKind {
    #[default]
    FedAvg,
    FedAvgM,
    FedAdam,
}

impl std::str::FromStr for ServerOptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(ServerOptKind::FedAvg),
            "fedavgm" => Ok(ServerOptKind::FedAvgM),
            "fedadam" => Ok(ServerOptKind::FedAdam),
            other => Err(Error::Usage(format!("unknown server optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for ServerOptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ServerOptKind::FedAvg => "fedavg",
            ServerOptKind::FedAvgM => "fedavgm",
            ServerOptKind::FedAdam => "fedadam",
        })
    }
}

/// Server hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerHyper {
    pub eta_s: f64,
    /// FedAvgM momentum.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Scale the FedAvg step by `eta_s`. Off by default (unit step).
    #[serde(default)]
    pub fedavg_uses_eta: bool,
}

impl Default for ServerHyper {
    fn default() -> Self {
        ServerHyper {
            eta_s: 0.001,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-5,
            fedavg_uses_eta: false,
        }
    }
}

impl ServerHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_s > 0.0
            && self.eta_s.is_finite()
            && (0.0..1.0).contains(&self.beta)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid server hyperparameters {self:?}")))
        }
    }
}

/// Global model plus optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParameterVector,
    pub m: ParameterVector,
    pub v: ParameterVector,
    pub round: usize,
    pub hyper: ServerHyper,
}

impl ServerState {
    /// Fresh state at round 0 with zero moments.
    pub fn new(theta: ParameterVector, hyper: ServerHyper) -> Self {
        let d = theta.dim();
        ServerState {
            theta,
            m: ParameterVector::zeros(d),
            v: ParameterVector::zeros(d),
            round: 0,
            hyper,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    pub fn step(&self, kind: ServerOptKind, delta: &ParameterVector) -> Result<ServerState> {
        match kind {
            ServerOptKind::FedAvg => fedavg_step(self, delta),
            ServerOptKind::FedAvgM => fedavgm_step(self, delta),
            ServerOptKind::FedAdam => fedadam_step(self, delta),
        }
    }
}

fn check_delta(state: &ServerState, delta: &ParameterVector) -> Result<()> {
    delta.check_dim(state.dim())?;
    // ParameterVector is finite by construction; re-check in case it was built unchecked upstream.
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite aggregated delta"));
    }
    Ok(())
}

/// `theta <- theta - delta`.
pub fn fedavg_step(state: &ServerState, delta: &ParameterVector) -> Result<ServerState> {
    check_delta(state, delta)?;
    let scale = if state.hyper.fedavg_uses_eta {
        state.hyper.eta_s
    } else {
        1.0
    };
    let theta = state.theta.zip_map(delta, |t, d| t - scale * d)?;
    Ok(ServerState {
        theta,
        ..state.clone()
    })
}

/// `m <- beta m + (1 - beta) delta; theta <- theta - m`.
pub fn fedavgm_step(state: &ServerState, delta: &ParameterVector) -> Result<ServerState> {
    check_delta(state, delta)?;
    let beta = state.hyper.beta;
    let m = state.m.zip_map(delta, |m, d| beta * m + (1.0 - beta) * d)?;
    let theta = state.theta.zip_map(&m, |t, m| t - m)?;
    Ok(ServerState {
        theta,
        m,
        ..state.clone()
    })
}

/// `m <- b1 m + (1-b1) d; v <- b2 v + (1-b2) d^2; theta <- theta - eta_s m / (sqrt(v) + eps)`.
pub fn fedadam_step(state: &ServerState, delta: &ParameterVector) -> Result<ServerState> {
    check_delta(state, delta)?;
    let h = state.hyper;
    let m = state.m.zip_map(delta, |m, d| h.beta1 * m + (1.0 - h.beta1) * d)?;
    let v = state.v.zip_map(delta, |v, d| h.beta2 * v + (1.0 - h.beta2) * d * d)?;
    let step: Vec<f64> = m
        .iter()
        .zip(v.iter())
        .map(|(&m, &v)| h.eta_s * m / (v.sqrt() + h.epsilon))
        .collect();
    let theta = state
        .theta
        .zip_map(&ParameterVector::new(step)?, |t, s| t - s)?;
    Ok(ServerState {
        theta,
        m,
        v,
        ..state.clone()
    })
}
