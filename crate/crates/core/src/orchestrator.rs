//! The federated round loop.
//!
//! One round: sample `max(1, round_half_up(C * K))` clients uniformly without
//! replacement, broadcast `theta_t`, run local training on every selected
//! client (possibly in parallel), aggregate the deltas in ascending client
//! order and apply the server optimizer.
//!
//! Per-client RNG streams are keyed by `(seed, phase, round, client)`, so the
//! result does not depend on how many worker threads run the local steps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train, LocalObjective, TrainerConfig};
use crate::error::{Error, Result};
use crate::seed::{self, stream, Purpose};
use crate::server::{ServerHyper, ServerOptKind, ServerState};
use crate::vector::{population_weights, ClientUpdate, ParameterVector, PopulationWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// `(1/|S|) sum_{k in S} p_k delta_k` with population-wide `p_k`.
    #[default]
    Literal,
    /// `sum_{k in S} (n_k / sum_{j in S} n_j) delta_k`.
    Normalized,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(AggregationMode::Literal),
            "normalized" => Ok(AggregationMode::Normalized),
            other => Err(Error::Usage(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

/// What `n_k` counts when computing client weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightBasis {
    #[default]
    Questions,
    Documents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub total_clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub seed: u64,
    pub aggregation: AggregationMode,
    pub server_opt: ServerOptKind,
    pub server: ServerHyper,
    /// Client optimizer; `trainer.epochs` is the local epoch count `E`.
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub weight_basis: WeightBasis,
    /// Label written to round records.
    pub phase: String,
    /// Folded into every RNG stream so phases draw independent randomness.
    pub phase_index: u64,
    /// Worker threads for local training; `None` uses the global pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl FederationConfig {
    pub fn new(total_clients: usize, client_fraction: f64, rounds: usize, seed: u64) -> Self {
        FederationConfig {
            total_clients,
            client_fraction,
            rounds,
            seed,
            aggregation: AggregationMode::default(),
            server_opt: ServerOptKind::default(),
            server: ServerHyper::default(),
            trainer: TrainerConfig::default(),
            weight_basis: WeightBasis::default(),
            phase: "train".into(),
            phase_index: 0,
            workers: None,
        }
    }

    pub fn local_epochs(&self) -> usize {
        self.trainer.epochs
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.total_clients, self.client_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::domain("K must be at least 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::domain(format!("C must lie in (0, 1], got {}", self.client_fraction)));
        }
        self.trainer.validate()?;
        self.server.validate()
    }

    fn sampling_seed(&self) -> u64 {
        seed::mix(self.seed, &[self.phase_index])
    }
}

/// `max(1, round_half_up(C * K))`.
pub fn clients_per_round(k: usize, c: f64) -> usize {
    // The epsilon keeps products like 0.35 * 10 from landing just under .5.
    let m = (c * k as f64 + 0.5 + 1e-9).floor() as usize;
    m.clamp(1, k.max(1))
}

/// Uniform sample without replacement, returned in ascending order.
pub fn sample_clients(k: usize, c: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || !(c > 0.0 && c <= 1.0) {
        return Err(Error::domain(format!("invalid sampling parameters K={k}, C={c}")));
    }
    let m = clients_per_round(k, c);
    let mut rng = stream(seed, Purpose::Sampling, &[round as u64]);
    let mut ids = index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Combines client deltas into the server pseudo-gradient.
pub fn aggregate(
    updates: &[ClientUpdate],
    weights: &PopulationWeights,
    mode: AggregationMode,
) -> Result<ParameterVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    let d = first.delta.dim();
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client update".into()));
    }

    let coefficients: Vec<f64> = match mode {
        AggregationMode::Literal => {
            let s = ordered.len() as f64;
            ordered
                .iter()
                .map(|u| {
                    weights
                        .get(u.client_id)
                        .map(|p| p / s)
                        .ok_or_else(|| Error::Protocol(format!("client {} outside population", u.client_id)))
                })
                .collect::<Result<_>>()?
        }
        AggregationMode::Normalized => {
            if ordered.iter().any(|u| u.n_k == 0) {
                return Err(Error::Protocol("client update with n_k = 0".into()));
            }
            let total: f64 = ordered.iter().map(|u| u.n_k as f64).sum();
            ordered.iter().map(|u| u.n_k as f64 / total).collect()
        }
    };

    let mut acc = vec![0.0; d];
    for (u, c) in ordered.iter().zip(coefficients) {
        u.delta.check_dim(d)?;
        for (a, x) in acc.iter_mut().zip(u.delta.iter()) {
            *a += c * x;
        }
    }
    ParameterVector::new(acc)
}

/// Validation summary for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub per_dataset: BTreeMap<String, f64>,
}

impl Evaluation {
    /// Unweighted mean of the per-dataset values.
    pub fn two_step(&self) -> f64 {
        if self.per_dataset.is_empty() {
            return f64::NAN;
        }
        self.per_dataset.values().sum::<f64>() / self.per_dataset.len() as f64
    }
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, theta: &ParameterVector) -> Result<Evaluation>;
}

/// One client's local dataset.
#[derive(Clone)]
pub struct ClientShard {
    pub id: usize,
    pub dataset: String,
    pub doc_ids: Vec<String>,
    pub num_documents: usize,
    pub num_questions: usize,
    pub objective: Arc<dyn LocalObjective>,
}

impl std::fmt::Debug for ClientShard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientShard")
            .field("id", &self.id)
            .field("dataset", &self.dataset)
            .field("num_documents", &self.num_documents)
            .field("num_questions", &self.num_questions)
            .field("examples", &self.objective.num_examples())
            .finish()
    }
}

impl ClientShard {
    pub fn sample_count(&self, basis: WeightBasis) -> usize {
        match basis {
            WeightBasis::Questions => self.num_questions,
            WeightBasis::Documents => self.num_documents,
        }
    }
}

#[derive(Clone)]
pub struct Population {
    pub clients: Vec<ClientShard>,
    pub evaluator: Arc<dyn Evaluator>,
}

impl Population {
    pub fn new(clients: Vec<ClientShard>, evaluator: Arc<dyn Evaluator>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::domain("population has no clients"));
        }
        let d = clients[0].objective.dim();
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(Error::structural(format!("client at position {i} has id {}", c.id)));
            }
            if c.objective.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: c.objective.dim(),
                });
            }
        }
        Ok(Population { clients, evaluator })
    }

    /// Wraps plain objectives, using each objective's example count as both
    /// question and document count, evaluated by [`ShardLossEvaluator`].
    pub fn from_objectives(shards: Vec<(String, Arc<dyn LocalObjective>)>) -> Result<Self> {
        let clients: Vec<ClientShard> = shards
            .into_iter()
            .enumerate()
            .map(|(id, (dataset, objective))| ClientShard {
                id,
                num_documents: objective.num_examples(),
                num_questions: objective.num_examples(),
                doc_ids: Vec::new(),
                dataset,
                objective,
            })
            .collect();
        let evaluator = Arc::new(ShardLossEvaluator::new(&clients, WeightBasis::Questions)?);
        Population::new(clients, evaluator)
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].objective.dim()
    }

    pub fn weights(&self, basis: WeightBasis) -> Result<PopulationWeights> {
        let counts: Vec<usize> = self.clients.iter().map(|c| c.sample_count(basis)).collect();
        population_weights(&counts)
    }
}

/// Evaluates the training objectives themselves: the loss is
/// `sum_k p_k F_k(theta)` and each dataset reports the mean loss over its
/// clients' pooled examples.
pub struct ShardLossEvaluator {
    shards: Vec<(String, Arc<dyn LocalObjective>)>,
    weights: PopulationWeights,
}

impl ShardLossEvaluator {
    pub fn new(clients: &[ClientShard], basis: WeightBasis) -> Result<Self> {
        let counts: Vec<usize> = clients.iter().map(|c| c.sample_count(basis)).collect();
        Ok(ShardLossEvaluator {
            shards: clients
                .iter()
                .map(|c| (c.dataset.clone(), c.objective.clone()))
                .collect(),
            weights: population_weights(&counts)?,
        })
    }
}

impl Evaluator for ShardLossEvaluator {
    fn evaluate(&self, theta: &ParameterVector) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut pooled: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for ((dataset, obj), p) in self.shards.iter().zip(self.weights.weights()) {
            let f = obj.full_loss(theta.as_slice());
            loss += p * f;
            let n = obj.num_examples();
            let e = pooled.entry(dataset.clone()).or_insert((0.0, 0));
            e.0 += f * n as f64;
            e.1 += n;
        }
        Ok(Evaluation {
            loss,
            per_dataset: pooled.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: String,
    pub selected: Vec<usize>,
    pub delta_norm: f64,
    pub val_loss: f64,
    pub per_dataset: BTreeMap<String, f64>,
    pub two_step: f64,
}

/// Executes round `round` and returns the next server state with its record.
pub fn run_round(
    state: &ServerState,
    config: &FederationConfig,
    population: &Population,
    round: usize,
) -> Result<(ServerState, RoundRecord)> {
    if round >= config.rounds {
        return Err(Error::NoRoundsRemaining);
    }
    if state.round != round {
        return Err(Error::Protocol(format!(
            "server state is at round {} but round {round} was requested",
            state.round
        )));
    }
    if population.len() != config.total_clients {
        return Err(Error::Protocol(format!(
            "config expects K={} clients, population has {}",
            config.total_clients,
            population.len()
        )));
    }
    state.theta.check_dim(population.dim())?;

    let selected = sample_clients(config.total_clients, config.client_fraction, round, config.sampling_seed())?;
    let train_one = |&id: &usize| -> Result<ClientUpdate> {
        let shard = &population.clients[id];
        let mut rng = stream(
            config.seed,
            Purpose::LocalTraining,
            &[config.phase_index, round as u64, id as u64],
        );
        local_train(
            id,
            &state.theta,
            shard.objective.as_ref(),
            shard.sample_count(config.weight_basis),
            &config.trainer,
            &mut rng,
        )
        .map_err(|e| Error::ClientFailed {
            client: id,
            round,
            source: Box::new(e),
        })
    };
    let updates: Vec<ClientUpdate> = selected.par_iter().map(train_one).collect::<Result<_>>()?;

    let weights = population.weights(config.weight_basis)?;
    let delta = aggregate(&updates, &weights, config.aggregation)?;
    let mut next = state.step(config.server_opt, &delta)?;
    next.round = round + 1;

    let eval = population.evaluator.evaluate(&next.theta)?;
    let record = RoundRecord {
        round,
        phase: config.phase.clone(),
        selected,
        delta_norm: delta.norm(),
        val_loss: eval.loss,
        two_step: eval.two_step(),
        per_dataset: eval.per_dataset,
    };
    Ok((next, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub final_state: ServerState,
}

impl TrainingRun {
    pub fn final_theta(&self) -> &ParameterVector {
        &self.final_state.theta
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Protocol(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `config.rounds` rounds from `theta0` with fresh server moments.
pub fn run_training(
    config: &FederationConfig,
    population: &Population,
    theta0: ParameterVector,
) -> Result<TrainingRun> {
    config.validate()?;
    let mut state = ServerState::new(theta0, config.server);
    let records = with_workers(config.workers, || -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(config.rounds);
        for t in 0..config.rounds {
            let (next, rec) = run_round(&state, config, population, t)?;
            log::debug!("{} round {t}: val_loss={} selected={:?}", config.phase, rec.val_loss, rec.selected);
            state = next;
            records.push(rec);
        }
        Ok(records)
    })??;
    Ok(TrainingRun {
        records,
        final_state: state,
    })
}

/// One stage of a multi-phase schedule.
#[derive(Clone)]
pub struct Phase<'a> {
    pub config: FederationConfig,
    pub population: &'a Population,
}

/// Runs phases back to back; each phase starts from the previous phase's
/// final model with zeroed server moments. Phases with zero rounds are skipped.
pub fn run_schedule(phases: &[Phase<'_>], theta0: ParameterVector) -> Result<TrainingRun> {
    let mut theta = theta0;
    let mut records = Vec::new();
    let mut last = None;
    for phase in phases {
        if phase.config.rounds == 0 {
            continue;
        }
        let run = run_training(&phase.config, phase.population, theta)?;
        records.extend(run.records);
        theta = run.final_state.theta.clone();
        last = Some(run.final_state);
    }
    let final_state = last.ok_or_else(|| Error::domain("schedule has no rounds"))?;
    Ok(TrainingRun { records, final_state })
}

/// CSV with one row per round. Columns: `round,phase,selected_ids,val_loss`,
/// one `metric_<dataset>` column per dataset, then `two_step,delta_norm`.
/// Selected ids are `;`-separated.
pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut datasets: Vec<&String> = records.iter().flat_map(|r| r.per_dataset.keys()).collect();
    datasets.sort();
    datasets.dedup();

    let mut out = String::from("round,phase,selected_ids,val_loss");
    for d in &datasets {
        let _ = write!(out, ",metric_{d}");
    }
    out.push_str(",two_step,delta_norm\n");
    for r in records {
        let ids: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
        let _ = write!(out, "{},{},{},{}", r.round, r.phase, ids.join(";"), r.val_loss);
        for d in &datasets {
            match r.per_dataset.get(*d) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{},{}", r.two_step, r.delta_norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ClientOptKind, QuadraticObjective};

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn update(id: usize, delta: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta: pv(delta),
            n_k: n,
            train_loss: 0.0,
        }
    }

    #[test]
    fn per_round_counts() {
        assert_eq!(clients_per_round(3, 1.0), 3);
        assert_eq!(clients_per_round(3, 0.35), 1);
        assert_eq!(clients_per_round(3, 0.7), 2);
        assert_eq!(clients_per_round(10, 0.35), 4);
        assert_eq!(clients_per_round(10, 0.7), 7);
        assert_eq!(clients_per_round(30, 0.35), 11);
        assert_eq!(clients_per_round(30, 0.7), 21);
        assert_eq!(clients_per_round(5, 0.01), 1);
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_clients(3, 1.0, 0, 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(sample_clients(3, 0.35, 4, 1).unwrap().len(), 1);
        let a = sample_clients(10, 0.7, 5, 99).unwrap();
        let b = sample_clients(10, 0.7, 5, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 10));
        assert!(sample_clients(10, 0.0, 0, 0).is_err());
        assert!(sample_clients(0, 0.5, 0, 0).is_err());
    }

    #[test]
    fn sampling_marginals() {
        let rounds = 10_000;
        let mut hits = [0usize; 10];
        for t in 0..rounds {
            for id in sample_clients(10, 0.35, t, 2024).unwrap() {
                hits[id] += 1;
            }
        }
        // 4 of 10 per round: each client is included with probability 0.4.
        let p = 0.4;
        let sigma = (p * (1.0 - p) / rounds as f64).sqrt();
        for h in hits {
            let freq = h as f64 / rounds as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "frequency {freq}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let w = population_weights(&[1]).unwrap();
        let d = aggregate(&[update(0, &[2.0, 2.0], 1)], &w, AggregationMode::Literal).unwrap();
        assert_eq!(d, pv(&[2.0, 2.0]));

        let w = population_weights(&[1, 3]).unwrap();
        let ups = [update(1, &[0.0, 8.0], 3), update(0, &[4.0, 0.0], 1)];
        assert_eq!(aggregate(&ups, &w, AggregationMode::Literal).unwrap(), pv(&[0.5, 3.0]));
        assert_eq!(aggregate(&ups, &w, AggregationMode::Normalized).unwrap(), pv(&[1.0, 6.0]));

        let zeros = [update(0, &[0.0, 0.0], 1), update(1, &[0.0, 0.0], 3)];
        for mode in [AggregationMode::Literal, AggregationMode::Normalized] {
            assert!(aggregate(&zeros, &w, mode).unwrap().is_zero());
        }
    }

    #[test]
    fn aggregate_errors() {
        let w = population_weights(&[1, 3]).unwrap();
        assert!(matches!(aggregate(&[], &w, AggregationMode::Literal), Err(Error::Protocol(_))));
        let bad = [update(0, &[1.0], 1), update(1, &[1.0, 2.0], 3)];
        assert!(matches!(aggregate(&bad, &w, AggregationMode::Normalized), Err(Error::Dimension { .. })));
        let dup = [update(0, &[1.0], 1), update(0, &[1.0], 1)];
        assert!(aggregate(&dup, &w, AggregationMode::Literal).is_err());
        assert!(aggregate(&[update(5, &[1.0], 1)], &w, AggregationMode::Literal).is_err());
    }

    fn homogeneous_population(k: usize) -> Population {
        let shards = (0..k)
            .map(|_| {
                let obj = QuadraticObjective::new(1, vec![1.0, 2.0, 1.0], vec![3.0, 6.0, 3.0]).unwrap();
                ("X".to_string(), Arc::new(obj) as Arc<dyn LocalObjective>)
            })
            .collect();
        Population::from_objectives(shards).unwrap()
    }

    fn gd_config(k: usize, rounds: usize) -> FederationConfig {
        let mut c = FederationConfig::new(k, 1.0, rounds, 5);
        c.trainer.optimizer = ClientOptKind::Gd;
        c.trainer.eta_l = 0.1;
        c.trainer.weight_decay = 0.0;
        c
    }

    #[test]
    fn homogeneous_round_moves_toward_optimum() {
        let pop = homogeneous_population(3);
        let cfg = gd_config(3, 1);
        let state = ServerState::new(pv(&[0.0]), cfg.server);
        let (next, rec) = run_round(&state, &cfg, &pop, 0).unwrap();
        assert_eq!(next.round, 1);
        assert!(rec.delta_norm > 0.0);
        assert!((next.theta[0] - 3.0).abs() < 3.0);
        assert!(next.theta[0] > 0.0);
        assert_eq!(rec.selected, vec![0, 1, 2]);
    }

    #[test]
    fn exhausted_rounds() {
        let pop = homogeneous_population(1);
        let cfg = gd_config(1, 0);
        let state = ServerState::new(pv(&[0.0]), cfg.server);
        assert!(matches!(run_round(&state, &cfg, &pop, 0), Err(Error::NoRoundsRemaining)));
        let cfg = gd_config(1, 3);
        assert!(matches!(run_round(&state, &cfg, &pop, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn single_round_training_matches_run_round() {
        let pop = homogeneous_population(2);
        let cfg = gd_config(2, 1);
        let run = run_training(&cfg, &pop, pv(&[0.5])).unwrap();
        let (next, rec) = run_round(&ServerState::new(pv(&[0.5]), cfg.server), &cfg, &pop, 0).unwrap();
        assert_eq!(run.records, vec![rec]);
        assert_eq!(run.final_state, next);
    }

    #[test]
    fn client_failure_is_attributed() {
        let pop = homogeneous_population(2);
        let mut cfg = gd_config(2, 1);
        cfg.trainer.eta_l = 1e200;
        cfg.trainer.batch_size = 1;
        let err = run_training(&cfg, &pop, pv(&[1e100])).unwrap_err();
        assert!(matches!(err, Error::ClientFailed { client: 0, round: 0, .. }), "{err}");
        assert!(err.is_numeric());
    }

    #[test]
    fn csv_layout() {
        let rec = RoundRecord {
            round: 0,
            phase: "finetune".into(),
            selected: vec![1, 4],
            delta_norm: 0.5,
            val_loss: 1.25,
            per_dataset: [("WTQ".to_string(), 0.5), ("DocVQA".to_string(), 0.25)].into(),
            two_step: 0.375,
        };
        let csv = records_to_csv(&[rec]);
        assert_eq!(
            csv,
            "round,phase,selected_ids,val_loss,metric_DocVQA,metric_WTQ,two_step,delta_norm\n\
             0,finetune,1;4,1.25,0.25,0.5,0.375,0.5\n"
        );
    }
}
