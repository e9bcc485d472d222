use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fedocvqa::corpus::{CorpusConfig, SyntheticCorpus};
use fedocvqa::experiment::{self, CompareMetric, DataSource, ExperimentSpec, RunConfig, ScenarioKind};
use fedocvqa::fsp::{self, Discretizer, DocumentExample, Objective};
use fedocvqa::metrics::{two_step_average_with, EvalExample, DEFAULT_ANLS_THRESHOLD};
use fedocvqa::orchestrator::AggregationMode;
use fedocvqa::partition::{self, DatasetDescriptor};
use fedocvqa::seed::{fnv1a, stream, Purpose};
use fedocvqa::server::ServerOptKind;
use fedocvqa::{Error, Result};

const LOG_ENV: &str = "FEDOCVQA_LOG";

#[derive(Parser)]
#[command(name = "fedocvqa", version, about = "Deterministic federated DocVQA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pretraining + finetuning for a grid of client fractions and seeds.
    Run(Box<RunArgs>),
    /// Partition a manifest into client shards and print the plan as JSON.
    Partition(PartitionArgs),
    /// Write a synthetic manifest with scaled train-split cardinalities.
    Manifest(ManifestArgs),
    /// Write synthetic documents as JSON lines.
    Documents(DocumentsArgs),
    /// Compile JSON-line documents into `input<TAB>target` sequence pairs.
    Fsp(FspArgs),
    /// Score `dataset<TAB>prediction<TAB>gold1|gold2` lines.
    Score(ScoreArgs),
    /// Median final metric per configuration across run directories.
    Compare(CompareArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Manifest of `dataset, doc_id, questions` lines.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Scale-down divisor for the synthetic train split when no manifest is given.
    #[arg(long, default_value_t = 50)]
    divisor: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Re-run a config echo; other flags except --out and --workers are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "k3")]
    scenario: String,
    /// Clients per dataset, comma separated (required for custom scenarios).
    #[arg(long, value_delimiter = ',')]
    clients: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    fraction_pretrain: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    fraction_finetune: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    rounds_pretrain: usize,
    #[arg(long, default_value_t = 10)]
    rounds_finetune: usize,
    /// Server optimizer for the pretraining phase.
    #[arg(long, default_value = "fedavg")]
    server_opt: String,
    /// Server optimizer for finetuning.
    #[arg(long, default_value = "fedavg")]
    server_opt_finetune: String,
    #[arg(long, default_value_t = 0.001)]
    server_lr: f64,
    #[arg(long, default_value = "normalized")]
    aggregation: String,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    local_lr: f64,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Pretraining objectives (`tm,lm,tlm`), or `none` to skip pretraining.
    #[arg(long, default_value = "tm,lm,tlm")]
    objectives: String,
    #[arg(long, default_value_t = 0.5)]
    heterogeneity: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, default_value = "k3")]
    scenario: String,
    #[arg(long, value_delimiter = ',')]
    clients: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long, default_value_t = 1)]
    divisor: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DocumentsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    heterogeneity: f64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct FspArgs {
    /// JSON-line documents (`tokens`, `boxes`); stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "tm,lm,tlm")]
    objectives: String,
    #[arg(long, default_value_t = fsp::DEFAULT_LOC_VOCAB)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    /// Tab-separated predictions; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// ANLS threshold; 0 gives raw similarity.
    #[arg(long, default_value_t = DEFAULT_ANLS_THRESHOLD)]
    tau: f64,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "final_score")]
    metric: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    dataset: Option<String>,
    tokens: Vec<String>,
    boxes: Vec<[f64; 4]>,
}

fn usage(msg: impl std::fmt::Display) -> Error {
    Error::Usage(msg.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: Error| usage(e))
}

fn objectives(s: &str) -> Result<Vec<Objective>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    Objective::parse_list(s).map_err(usage)
}

fn data_source(d: &DataArgs) -> DataSource {
    match &d.manifest {
        Some(path) => DataSource::Manifest { path: path.clone() },
        None => DataSource::Synthetic { divisor: d.divisor },
    }
}

fn allocation(scenario: ScenarioKind, clients: &[usize]) -> Result<Vec<usize>> {
    match (scenario.standard_k(), clients.is_empty()) {
        (Some(k), true) => Ok(partition::scenario_allocation(k)?.to_vec()),
        (_, false) => Ok(clients.to_vec()),
        (None, true) => Err(usage("--scenario custom needs --clients")),
    }
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let scenario: ScenarioKind = parse(&a.scenario)?;
    let mut c = match scenario {
        ScenarioKind::Custom => RunConfig::new(ScenarioKind::K3, 0)?,
        s => RunConfig::new(s, 0)?,
    };
    c.scenario = scenario;
    c.allocation = allocation(scenario, &a.clients)?;
    c.data = data_source(&a.data);
    c.pretrain.rounds = a.rounds_pretrain;
    c.pretrain.server_opt = parse::<ServerOptKind>(&a.server_opt)?;
    c.pretrain.server.eta_s = a.server_lr;
    c.finetune.rounds = a.rounds_finetune;
    c.finetune.server_opt = parse::<ServerOptKind>(&a.server_opt_finetune)?;
    c.finetune.server.eta_s = a.server_lr;
    c.aggregation = parse::<AggregationMode>(&a.aggregation)?;
    c.trainer.epochs = a.epochs;
    c.trainer.batch_size = a.batch_size;
    c.trainer.eta_l = a.local_lr;
    c.objectives = objectives(&a.objectives)?;
    c.corpus = CorpusConfig {
        heterogeneity: a.heterogeneity,
        ..CorpusConfig::default()
    };
    c.workers = a.workers;
    Ok(c)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let dirs = match &a.config {
        Some(path) => {
            let mut c = experiment::read_config(path)?;
            c.workers = a.workers;
            c.validate()?;
            vec![experiment::run_to_dir(&c, &a.out)?]
        }
        None => {
            let spec = ExperimentSpec {
                base: run_config(a)?,
                fractions_pretrain: a.fraction_pretrain.clone(),
                fractions_finetune: a.fraction_finetune.clone(),
                seeds: a.seed.clone(),
                out: a.out.clone(),
            };
            experiment::run_experiment(&spec)?
        }
    };
    let mut out = std::io::stdout().lock();
    for d in dirs {
        writeln!(out, "{}", d.display())?;
    }
    Ok(())
}

fn descriptors(scenario: &str, clients: &[usize], data: &DataArgs) -> Result<Vec<DatasetDescriptor>> {
    let scenario: ScenarioKind = parse(scenario)?;
    let alloc = allocation(scenario, clients)?;
    let manifest = match &data.manifest {
        Some(p) => partition::read_manifest(p)?,
        None => partition::train_split_manifest(data.divisor),
    };
    if manifest.len() != alloc.len() {
        return Err(usage(format!("{} datasets but {} client counts", manifest.len(), alloc.len())));
    }
    Ok(manifest
        .into_iter()
        .zip(alloc)
        .map(|((name, documents), clients)| DatasetDescriptor { name, documents, clients })
        .collect())
}

fn cmd_partition(a: &PartitionArgs) -> Result<()> {
    let plan = partition::partition(&descriptors(&a.scenario, &a.clients, &a.data)?, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

fn cmd_manifest(a: &ManifestArgs) -> Result<()> {
    if a.divisor == 0 {
        return Err(usage("--divisor must be positive"));
    }
    let text = partition::write_manifest(&partition::train_split_manifest(a.divisor));
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_documents(a: &DocumentsArgs) -> Result<()> {
    let manifest = match &a.data.manifest {
        Some(p) => partition::read_manifest(p)?,
        None => partition::train_split_manifest(a.data.divisor),
    };
    let names: Vec<String> = manifest.iter().map(|(n, _)| n.clone()).collect();
    let cfg = CorpusConfig {
        heterogeneity: a.heterogeneity,
        ..CorpusConfig::default()
    };
    let corpus = SyntheticCorpus::new(cfg, &names, a.seed)?;
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for (name, docs) in &manifest {
        for r in docs {
            let d = corpus.document(name, &r.doc_id, r.questions)?;
            let line = DocumentLine {
                doc_id: Some(d.doc_id),
                dataset: Some(d.dataset),
                tokens: d.example.tokens,
                boxes: d.example.boxes,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
    }
    Ok(())
}

fn read_input(path: &Option<PathBuf>) -> Result<String> {
    match path {
        Some(p) => Ok(std::fs::read_to_string(p)?),
        None => {
            let mut s = String::new();
            std::io::stdin().lock().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn cmd_fsp(a: &FspArgs) -> Result<()> {
    let objs = objectives(&a.objectives)?;
    let disc = Discretizer::new(a.vocab).map_err(usage)?;
    let text = read_input(&a.input)?;
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentLine =
            serde_json::from_str(line).map_err(|e| Error::Parse { position: lineno + 1, message: e.to_string() })?;
        let key = rec.doc_id.as_deref().map(fnv1a).unwrap_or(lineno as u64);
        let doc = DocumentExample::new(rec.tokens, rec.boxes)?;
        for &o in &objs {
            let mut rng = stream(a.seed, Purpose::Masking, &[key, o as u64]);
            let plan = fsp::sample_default_mask(o, doc.len(), &mut rng)?;
            writeln!(out, "{}", fsp::build(&doc, &plan, &disc)?.to_tsv_line())?;
        }
    }
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let text = read_input(&a.input)?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                position: lineno + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let golds = fields[2].split('|').map(str::to_string).collect();
        examples.push(EvalExample::new(fields[0], fields[1], golds));
    }
    let report = two_step_average_with(&examples, a.tau)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let metric: CompareMetric = parse(&a.metric)?;
    let table = experiment::compare_runs(&a.runs, metric)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        print!("{}", table.to_tsv());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        match e {
            Error::Usage(_) | Error::Parse { .. } | Error::Domain(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Manifest(a) => cmd_manifest(a),
        Command::Documents(a) => cmd_documents(a),
        Command::Fsp(a) => cmd_fsp(a),
        Command::Score(a) => cmd_score(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
