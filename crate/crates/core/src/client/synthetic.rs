//! Synthetic heterogeneous quadratic federations.
//!
//! Three clusters stand in for the three source datasets. Each client draws
//! its design rows and optimum around its cluster's, and each cluster around
//! a shared base; `heterogeneity` scales both spreads. At heterogeneity 0
//! every client's `(A_k, b_k)` is identical.

use rand_distr::{Distribution, StandardNormal};

use super::QuadraticObjective;
use crate::error::{Error, Result};
use crate::seed::{stream, Purpose, SimRng};

pub const DATASET_NAMES: [&str; 3] = ["WTQ", "DocVQA", "TabFact"];

/// How many examples each client holds.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleCounts {
    PerClient(usize),
    /// Fixed total per cluster, split evenly over the cluster's clients
    /// (earlier clients take the remainder).
    PerCluster(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDims {
    pub dim: usize,
    pub examples: ExampleCounts,
    /// Observation noise standard deviation.
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticClient {
    pub id: usize,
    pub cluster: usize,
    pub objective: QuadraticObjective,
    pub optimum: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticFederation {
    pub cluster_names: Vec<String>,
    pub clients: Vec<SyntheticClient>,
    pub heterogeneity: f64,
    pub dim: usize,
}

impl SyntheticFederation {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dataset_of(&self, client: usize) -> &str {
        &self.cluster_names[self.clients[client].cluster]
    }
}

fn normals(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn make_synthetic_federation(
    k: usize,
    client_counts_per_cluster: &[usize],
    heterogeneity: f64,
    dims: &SyntheticDims,
    seed: u64,
) -> Result<SyntheticFederation> {
    let total: usize = client_counts_per_cluster.iter().sum();
    if total != k || k == 0 {
        return Err(Error::domain(format!(
            "cluster client counts {client_counts_per_cluster:?} do not sum to K={k}"
        )));
    }
    if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
        return Err(Error::domain(format!("heterogeneity must be >= 0, got {heterogeneity}")));
    }
    if dims.dim == 0 {
        return Err(Error::domain("dimension must be positive"));
    }

    let n_clusters = client_counts_per_cluster.len();
    let mut rows_per_client = Vec::with_capacity(k);
    match &dims.examples {
        ExampleCounts::PerClient(n) => rows_per_client.resize(k, *n),
        ExampleCounts::PerCluster(totals) => {
            if totals.len() != n_clusters {
                return Err(Error::domain("one example total per cluster required"));
            }
            for (&clients, &t) in client_counts_per_cluster.iter().zip(totals) {
                for j in 0..clients {
                    rows_per_client.push(t / clients + usize::from(j < t % clients));
                }
            }
        }
    }
    if let Some(c) = rows_per_client.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!("client {c} would hold no examples")));
    }

    let d = dims.dim;
    let max_rows = *rows_per_client.iter().max().unwrap_or(&0);
    let mut base = stream(seed, Purpose::Synthetic, &[0]);
    let base_rows = normals(&mut base, max_rows * d);
    let base_opt = normals(&mut base, d);
    let base_noise = normals(&mut base, max_rows);

    let h = heterogeneity;
    let cluster_names: Vec<String> = (0..n_clusters)
        .map(|c| {
            if n_clusters == DATASET_NAMES.len() {
                DATASET_NAMES[c].to_string()
            } else {
                format!("cluster{c}")
            }
        })
        .collect();

    let mut clients = Vec::with_capacity(k);
    let mut id = 0;
    for (c, &count) in client_counts_per_cluster.iter().enumerate() {
        let mut crng = stream(seed, Purpose::Synthetic, &[1, c as u64]);
        let c_rows = normals(&mut crng, max_rows * d);
        let c_opt = normals(&mut crng, d);
        for _ in 0..count {
            let mut krng = stream(seed, Purpose::Synthetic, &[2, id as u64]);
            let n = rows_per_client[id];
            let k_rows = normals(&mut krng, n * d);
            let k_opt = normals(&mut krng, d);
            let optimum: Vec<f64> = (0..d)
                .map(|j| base_opt[j] + h * (c_opt[j] + 0.5 * k_opt[j]))
                .collect();
            let rows: Vec<f64> = (0..n * d)
                .map(|i| base_rows[i] + h * (0.5 * c_rows[i] + 0.5 * k_rows[i]))
                .collect();
            let targets: Vec<f64> = (0..n)
                .map(|i| {
                    let a = &rows[i * d..(i + 1) * d];
                    a.iter().zip(&optimum).map(|(x, t)| x * t).sum::<f64>()
                        + dims.noise * base_noise[i]
                })
                .collect();
            clients.push(SyntheticClient {
                id,
                cluster: c,
                objective: QuadraticObjective::new(d, rows, targets)?,
                optimum,
            });
            id += 1;
        }
    }

    Ok(SyntheticFederation {
        cluster_names,
        clients,
        heterogeneity,
        dim: d,
    })
}
