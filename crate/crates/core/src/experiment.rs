//! Experiment driver: builds the document federation for a scenario, runs the
//! optional denoising phase and the QA finetuning phase for every grid point
//! and seed, and writes one self-describing directory per run.
//!
//! Run directory layout:
//!
//! * `config.json`: the [`RunConfig`] echo; re-running it reproduces the run.
//! * `rounds.csv`: one row per round of both phases.
//! * `summary.json`: final losses and scores.
//! * `timing.json`: wall-clock time (the only non-deterministic file).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::TrainerConfig;
use crate::corpus::{CorpusConfig, DocumentFederation, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::fsp::Objective;
use crate::orchestrator::{records_to_csv, run_schedule, AggregationMode, FederationConfig, Phase, RoundRecord, WeightBasis};
use crate::partition::{self, DatasetDescriptor, DocumentRecord, TRAIN_DOCUMENTS};
use crate::server::{ServerHyper, ServerOptKind};
use crate::vector::ParameterVector;

pub const CONFIG_FILE: &str = "config.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    K3,
    K10,
    K30,
    Custom,
}

impl ScenarioKind {
    pub fn standard_k(self) -> Option<usize> {
        match self {
            ScenarioKind::K3 => Some(3),
            ScenarioKind::K10 => Some(10),
            ScenarioKind::K30 => Some(30),
            ScenarioKind::Custom => None,
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k3" => Ok(ScenarioKind::K3),
            "k10" => Ok(ScenarioKind::K10),
            "k30" => Ok(ScenarioKind::K30),
            "custom" => Ok(ScenarioKind::Custom),
            other => Err(Error::Usage(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub fraction: f64,
    pub rounds: usize,
    pub server_opt: ServerOptKind,
    pub server: ServerHyper,
}

impl PhaseSpec {
    pub fn new(fraction: f64, rounds: usize, server_opt: ServerOptKind) -> Self {
        PhaseSpec {
            fraction,
            rounds,
            server_opt,
            server: ServerHyper::default(),
        }
    }
}

/// Where client documents come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Train-split cardinalities divided by `divisor`.
    Synthetic { divisor: usize },
    Manifest { path: PathBuf },
}

/// A single fully specified run; serialized as the config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    /// Per-dataset client counts, in manifest dataset order.
    pub allocation: Vec<usize>,
    pub data: DataSource,
    pub pretrain: PhaseSpec,
    pub finetune: PhaseSpec,
    pub aggregation: AggregationMode,
    pub weight_basis: WeightBasis,
    pub trainer: TrainerConfig,
    pub corpus: CorpusConfig,
    pub objectives: Vec<Objective>,
    pub seed: u64,
    /// Worker threads for local training; a runtime choice kept out of the echo.
    #[serde(skip)]
    pub workers: Option<usize>,
}

/// Trainer defaults for the linear surrogate: the client rate is raised from
/// the transformer-scale default because the model starts from zero.
pub fn desk_trainer() -> TrainerConfig {
    TrainerConfig {
        eta_l: 0.01,
        ..TrainerConfig::default()
    }
}

impl RunConfig {
    pub fn new(scenario: ScenarioKind, seed: u64) -> Result<Self> {
        let allocation = match scenario.standard_k() {
            Some(k) => partition::scenario_allocation(k)?.to_vec(),
            None => return Err(Error::Usage("custom scenarios need an explicit allocation".into())),
        };
        Ok(RunConfig {
            scenario,
            allocation,
            data: DataSource::Synthetic { divisor: 50 },
            pretrain: PhaseSpec::new(1.0, 10, ServerOptKind::FedAvg),
            finetune: PhaseSpec::new(1.0, 10, ServerOptKind::FedAvg),
            aggregation: AggregationMode::Normalized,
            weight_basis: WeightBasis::default(),
            trainer: desk_trainer(),
            corpus: CorpusConfig::default(),
            objectives: Objective::ALL.to_vec(),
            seed,
            workers: None,
        })
    }

    pub fn total_clients(&self) -> usize {
        self.allocation.iter().sum()
    }

    pub fn has_pretraining(&self) -> bool {
        self.pretrain.rounds > 0 && !self.objectives.is_empty()
    }

    /// Directory name; unique within a grid.
    pub fn run_name(&self) -> String {
        format!("{}_seed{}", self.config_key(), self.seed)
    }

    /// Everything that identifies a configuration except the seed.
    pub fn config_key(&self) -> String {
        let pt = if self.has_pretraining() {
            let objs: Vec<&str> = self.objectives.iter().map(|o| o.name()).collect();
            format!(
                "cpt{}_tpt{}_{}_{}",
                self.pretrain.fraction,
                self.pretrain.rounds,
                self.pretrain.server_opt,
                objs.join("-")
            )
        } else {
            "nofsp".to_string()
        };
        format!(
            "k{}_{pt}_cft{}_tft{}_{}",
            self.total_clients(),
            self.finetune.fraction,
            self.finetune.rounds,
            self.finetune.server_opt
        )
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |msg: String| Err(Error::Usage(msg));
        if self.allocation.is_empty() || self.allocation.contains(&0) {
            return usage(format!("allocation {:?} must be non-empty and positive", self.allocation));
        }
        if let Some(k) = self.scenario.standard_k() {
            if self.total_clients() != k {
                return usage(format!("scenario expects K={k}, allocation gives {}", self.total_clients()));
            }
        }
        for (name, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(p.fraction > 0.0 && p.fraction <= 1.0) {
                return usage(format!("{name} fraction {} outside (0, 1]", p.fraction));
            }
            p.server.validate().map_err(|e| Error::Usage(e.to_string()))?;
        }
        if self.finetune.rounds == 0 {
            return usage("finetuning needs at least one round".into());
        }
        if let DataSource::Synthetic { divisor: 0 } = self.data {
            return usage("divisor must be positive".into());
        }
        self.trainer.validate().map_err(|e| Error::Usage(e.to_string()))
    }

    fn phase_config(&self, spec: &PhaseSpec, name: &str, index: u64) -> FederationConfig {
        FederationConfig {
            aggregation: self.aggregation,
            server_opt: spec.server_opt,
            server: spec.server,
            trainer: self.trainer,
            weight_basis: self.weight_basis,
            phase: name.into(),
            phase_index: index,
            workers: self.workers,
            ..FederationConfig::new(self.total_clients(), spec.fraction, spec.rounds, self.seed)
        }
    }

    fn manifest(&self) -> Result<Vec<(String, Vec<DocumentRecord>)>> {
        match &self.data {
            DataSource::Synthetic { divisor } => Ok(partition::train_split_manifest(*divisor)),
            DataSource::Manifest { path } => partition::read_manifest(path),
        }
    }

    /// Pairs manifest datasets with client counts. Standard scenarios need
    /// the three train-split datasets, matched by name.
    fn descriptors(&self) -> Result<Vec<DatasetDescriptor>> {
        let mut manifest = self.manifest()?;
        if self.scenario != ScenarioKind::Custom {
            let mut ordered = Vec::new();
            for (name, _) in TRAIN_DOCUMENTS {
                let pos = manifest
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| Error::Usage(format!("manifest has no {name} documents")))?;
                ordered.push(manifest.remove(pos));
            }
            manifest = ordered;
        }
        if manifest.len() != self.allocation.len() {
            return Err(Error::Usage(format!(
                "{} datasets in manifest but {} client counts",
                manifest.len(),
                self.allocation.len()
            )));
        }
        Ok(manifest
            .into_iter()
            .zip(&self.allocation)
            .map(|((name, documents), &clients)| DatasetDescriptor { name, documents, clients })
            .collect())
    }

    pub fn federation(&self) -> Result<DocumentFederation> {
        let descriptors = self.descriptors()?;
        let plans = partition::partition(&descriptors, self.seed).map_err(|e| Error::Usage(e.to_string()))?;
        let questions: BTreeMap<String, usize> = descriptors
            .iter()
            .flat_map(|d| d.documents.iter().map(|r| (r.doc_id.clone(), r.questions)))
            .collect();
        let names: Vec<String> = descriptors.iter().map(|d| d.name.clone()).collect();
        let corpus = SyntheticCorpus::new(self.corpus.clone(), &names, self.seed)?;
        let objectives = if self.has_pretraining() { self.objectives.as_slice() } else { &[] };
        DocumentFederation::build(corpus, plans, &questions, objectives, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub rounds: usize,
    pub final_loss: f64,
    pub per_dataset: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub config_key: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PhaseSummary>,
    pub finetune: PhaseSummary,
    /// Two-step QA score in [0, 1].
    pub final_score: f64,
    /// Final QA validation loss.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
}

fn phase_summary(records: &[RoundRecord], phase: &str) -> Option<PhaseSummary> {
    let rs: Vec<&RoundRecord> = records.iter().filter(|r| r.phase == phase).collect();
    let last = rs.last()?;
    Some(PhaseSummary {
        rounds: rs.len(),
        final_loss: last.val_loss,
        per_dataset: last.per_dataset.clone(),
    })
}

/// Runs one configuration in memory.
pub fn run_config(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let fed = config.federation()?;
    let pt = config.phase_config(&config.pretrain, "pretrain", 0);
    let ft = config.phase_config(&config.finetune, "finetune", 1);
    let mut phases = Vec::new();
    if config.has_pretraining() {
        phases.push(Phase {
            config: pt,
            population: &fed.pretrain,
        });
    }
    phases.push(Phase {
        config: ft,
        population: &fed.finetune,
    });
    let theta0 = ParameterVector::zeros(fed.finetune.dim());
    let run = run_schedule(&phases, theta0)?;
    let finetune = phase_summary(&run.records, "finetune").ok_or_else(|| Error::domain("no finetuning rounds"))?;
    let last = run.records.last().ok_or_else(|| Error::domain("no rounds"))?;
    let summary = RunSummary {
        run: config.run_name(),
        config_key: config.config_key(),
        seed: config.seed,
        pretrain: phase_summary(&run.records, "pretrain"),
        final_score: last.two_step,
        final_loss: finetune.final_loss,
        finetune,
    };
    Ok(RunOutput {
        config: config.clone(),
        records: run.records,
        summary,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs one configuration and writes its directory under `out`.
pub fn run_to_dir(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let output = run_config(config)?;
    let dir = out.join(config.run_name());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), to_json(config)?)?;
    std::fs::write(dir.join(ROUNDS_FILE), records_to_csv(&output.records))?;
    std::fs::write(dir.join(SUMMARY_FILE), to_json(&output.summary)?)?;
    let timing = serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() });
    std::fs::write(dir.join(TIMING_FILE), to_json(&timing)?)?;
    log::info!(
        "{}: final loss {:.6}, score {:.2}",
        output.summary.run,
        output.summary.final_loss,
        output.summary.final_score * 100.0
    );
    Ok(dir)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// A grid of runs: every (C_pt, C_ft) pair for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub base: RunConfig,
    pub fractions_pretrain: Vec<f64>,
    pub fractions_finetune: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn runs(&self) -> Result<Vec<RunConfig>> {
        if self.seeds.is_empty() {
            return Err(Error::Usage("at least one seed is required".into()));
        }
        let cpt = if self.fractions_pretrain.is_empty() {
            vec![self.base.pretrain.fraction]
        } else {
            self.fractions_pretrain.clone()
        };
        let cft = if self.fractions_finetune.is_empty() {
            vec![self.base.finetune.fraction]
        } else {
            self.fractions_finetune.clone()
        };
        let mut runs = Vec::new();
        for &a in &cpt {
            for &b in &cft {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.pretrain.fraction = a;
                    c.finetune.fraction = b;
                    c.seed = seed;
                    c.validate()?;
                    runs.push(c);
                }
            }
        }
        let mut names: Vec<String> = runs.iter().map(RunConfig::run_name).collect();
        names.sort();
        names.dedup();
        if names.len() != runs.len() {
            return Err(Error::Usage("grid contains duplicate runs".into()));
        }
        Ok(runs)
    }
}

/// Runs the whole grid concurrently; returns run directories in grid order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
    let runs = spec.runs()?;
    runs.par_iter().map(|c| run_to_dir(c, &spec.out)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMetric {
    FinalScore,
    FinalLoss,
}

impl CompareMetric {
    fn of(self, s: &RunSummary) -> f64 {
        match self {
            CompareMetric::FinalScore => s.final_score,
            CompareMetric::FinalLoss => s.final_loss,
        }
    }

    fn higher_is_better(self) -> bool {
        self == CompareMetric::FinalScore
    }
}

impl std::str::FromStr for CompareMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_score" | "score" => Ok(CompareMetric::FinalScore),
            "final_loss" | "loss" => Ok(CompareMetric::FinalLoss),
            other => Err(Error::Usage(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config_key: String,
    /// 1-based; equal medians share a rank.
    pub rank: usize,
    pub median: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: CompareMetric,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tconfig\tmedian\tseeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|(s, v)| format!("{s}:{v}")).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.rank, r.config_key, r.median, seeds.join(";"));
        }
        out
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Usage(format!("missing run {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// Median of `metric` per configuration, best first.
pub fn compare_summaries(summaries: &[RunSummary], metric: CompareMetric) -> Result<Comparison> {
    if summaries.is_empty() {
        return Err(Error::Usage("no runs to compare".into()));
    }
    let mut groups: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for s in summaries {
        if groups.entry(s.config_key.clone()).or_default().insert(s.seed, metric.of(s)).is_some() {
            return Err(Error::Usage(format!("run {} given twice", s.run)));
        }
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(config_key, per_seed)| {
            let vals: Vec<f64> = per_seed.values().copied().collect();
            ComparisonRow {
                config_key,
                rank: 0,
                median: median(&vals).unwrap_or(f64::NAN),
                per_seed,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let ord = a.median.total_cmp(&b.median);
        let ord = if metric.higher_is_better() { ord.reverse() } else { ord };
        ord.then_with(|| a.config_key.cmp(&b.config_key))
    });
    for i in 0..rows.len() {
        rows[i].rank = if i > 0 && rows[i].median == rows[i - 1].median { rows[i - 1].rank } else { i + 1 };
    }
    Ok(Comparison { metric, rows })
}

pub fn compare_runs(dirs: &[PathBuf], metric: CompareMetric) -> Result<Comparison> {
    let summaries: Vec<RunSummary> = dirs.iter().map(|d| read_summary(d)).collect::<Result<_>>()?;
    compare_summaries(&summaries, metric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> RunConfig {
        let mut c = RunConfig::new(ScenarioKind::K3, seed).unwrap();
        c.data = DataSource::Synthetic { divisor: 400 };
        c.pretrain.rounds = 2;
        c.finetune.rounds = 2;
        c
    }

    #[test]
    fn names_and_keys() {
        let c = small(4);
        assert_eq!(c.config_key(), "k3_cpt1_tpt2_fedavg_tm-lm-tlm_cft1_tft2_fedavg");
        assert_eq!(c.run_name(), format!("{}_seed4", c.config_key()));
        let mut b = c.clone();
        b.pretrain.rounds = 0;
        assert_eq!(b.config_key(), "k3_nofsp_cft1_tft2_fedavg");
    }

    #[test]
    fn validation_is_usage() {
        let mut c = small(0);
        c.allocation = vec![1, 1];
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
        let mut c = small(0);
        c.finetune.fraction = 0.0;
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
        let mut c = small(0);
        c.finetune.rounds = 0;
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn grid_expands() {
        let spec = ExperimentSpec {
            base: small(0),
            fractions_pretrain: vec![],
            fractions_finetune: vec![0.35, 0.7, 1.0],
            seeds: vec![0],
            out: PathBuf::from("unused"),
        };
        assert_eq!(spec.runs().unwrap().len(), 3);
        let empty = ExperimentSpec { seeds: vec![], ..spec };
        assert!(matches!(empty.runs(), Err(Error::Usage(_))));
    }

    #[test]
    fn no_fsp_run_has_only_finetuning() {
        let mut c = small(1);
        c.pretrain.rounds = 0;
        let out = run_config(&c).unwrap();
        assert!(out.summary.pretrain.is_none());
        assert!(out.records.iter().all(|r| r.phase == "finetune"));
        assert_eq!(out.records.len(), 2);
    }

    #[test]
    fn two_phase_run_is_repeatable() {
        let a = run_config(&small(2)).unwrap();
        let b = run_config(&small(2)).unwrap();
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.summary.pretrain.as_ref().unwrap().rounds, 2);
        assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn summary(key: &str, seed: u64, score: f64) -> RunSummary {
        let ph = PhaseSummary {
            rounds: 1,
            final_loss: 1.0 - score,
            per_dataset: BTreeMap::new(),
        };
        RunSummary {
            run: format!("{key}_seed{seed}"),
            config_key: key.into(),
            seed,
            pretrain: None,
            finetune: ph,
            final_score: score,
            final_loss: 1.0 - score,
        }
    }

    #[test]
    fn comparison_orders_and_ties() {
        let s = vec![
            summary("a", 0, 0.25),
            summary("a", 1, 0.75),
            summary("b", 0, 0.5),
            summary("c", 0, 0.9),
        ];
        let c = compare_summaries(&s, CompareMetric::FinalScore).unwrap();
        let order: Vec<(&str, usize)> = c.rows.iter().map(|r| (r.config_key.as_str(), r.rank)).collect();
        assert_eq!(order, vec![("c", 1), ("a", 2), ("b", 2)]);
        let l = compare_summaries(&s, CompareMetric::FinalLoss).unwrap();
        assert_eq!(l.rows[0].config_key, "c");
        assert!(compare_summaries(&[], CompareMetric::FinalLoss).is_err());
        assert!(compare_summaries(&[summary("a", 0, 0.1), summary("a", 0, 0.1)], CompareMetric::FinalLoss).is_err());
    }
}
