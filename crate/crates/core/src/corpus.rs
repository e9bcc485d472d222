//! Synthetic key/value documents and the desk-scale surrogate tasks built on them.
//!
//! Every source dataset has a "grammar": a mapping from field keys to values,
//! a distribution over which keys appear, and a page layout. Documents list a
//! few `key value` lines with boxes; each question asks for the value of a key
//! on the page. `heterogeneity` in [0, 1] moves each dataset's key
//! distribution and layout away from a shared base: at 1 a dataset only uses
//! its own favored keys. `concept_shift` is the probability that a dataset
//! remaps a key to a different value. With both at 0 all datasets share one
//! distribution.
//!
//! Both surrogate tasks are linear softmax models over the same hashed token
//! space, so they share parameters:
//!
//! * sequence denoising: for every masked slot of a compiled sequence pair,
//!   predict the bag of target tokens from the natural tokens around the slot;
//! * question answering: predict the answer token from the question tokens.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{logits, LocalObjective, SoftmaxExample, SoftmaxObjective};
use crate::error::{Error, Result};
use crate::fsp::{self, Discretizer, DocumentExample, Objective, SequencePair, Sentinel};
use crate::metrics::{two_step_average, EvalExample};
use crate::orchestrator::{ClientShard, Evaluation, Evaluator, Population};
use crate::partition::ClientShardPlan;
use crate::seed::{fnv1a, stream, Purpose};
use crate::vector::ParameterVector;

const KEYS: [&str; 24] = [
    "name", "date", "total", "amount", "city", "country", "year", "rank", "score", "team", "party", "votes",
    "title", "author", "price", "tax", "phone", "email", "region", "office", "status", "code", "weight", "height",
];

const VALUES: [&str; 32] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "red", "blue", "green", "gold", "silver", "black",
];

const FILLERS: [&str; 8] = ["the", "of", "table", "page", "see", "note", "form", "row"];

const QUESTION_PREFIX: [&str; 3] = ["what", "is", "the"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub heterogeneity: f64,
    pub concept_shift: f64,
    /// Keys each dataset favors under heterogeneity.
    pub favored_keys: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub filler_prob: f64,
    /// Hash buckets for non-location tokens.
    pub word_buckets: usize,
    /// Coarse buckets location tokens are folded into.
    pub loc_buckets: usize,
    /// Natural tokens taken on each side of a masked slot.
    pub context_window: usize,
    pub loc_vocab: usize,
    /// Held-out documents per dataset for validation.
    pub validation_docs: usize,
    pub validation_questions: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            heterogeneity: 0.5,
            concept_shift: 0.0,
            favored_keys: 8,
            min_lines: 3,
            max_lines: 6,
            filler_prob: 0.3,
            word_buckets: 64,
            loc_buckets: 16,
            context_window: 2,
            loc_vocab: fsp::DEFAULT_LOC_VOCAB,
            validation_docs: 40,
            validation_questions: 3,
        }
    }
}

impl CorpusConfig {
    pub fn feature_dim(&self) -> usize {
        self.word_buckets + self.loc_buckets
    }

    pub fn param_dim(&self) -> usize {
        SoftmaxObjective::param_dim(self.feature_dim(), self.feature_dim())
    }

    pub fn bucket(&self, token: &str) -> usize {
        match Sentinel::parse(token) {
            Some(Sentinel::Loc(b)) => self.word_buckets + (b * self.loc_buckets / self.loc_vocab).min(self.loc_buckets - 1),
            _ => (fnv1a(token) % self.word_buckets as u64) as usize,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.heterogeneity)
            && (0.0..=1.0).contains(&self.concept_shift)
            && self.favored_keys >= self.max_lines
            && self.favored_keys <= KEYS.len()
            && self.min_lines >= 1
            && self.min_lines <= self.max_lines
            && self.max_lines <= KEYS.len()
            && self.word_buckets >= 1
            && self.loc_buckets >= 1
            && self.loc_vocab >= 1
            && (0.0..=1.0).contains(&self.filler_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid corpus config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetGrammar {
    pub name: String,
    /// `mapping[key] = value index`.
    pub mapping: Vec<usize>,
    /// Relative frequency of each key.
    pub key_weights: Vec<f64>,
    pub key_x: f64,
    pub value_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub dataset: String,
    pub example: DocumentExample,
    pub qa: Vec<QaPair>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub grammars: Vec<DatasetGrammar>,
    seed: u64,
}

impl SyntheticCorpus {
    pub fn new(config: CorpusConfig, datasets: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut base_rng = stream(seed, Purpose::Corpus, &[0]);
        let base: Vec<usize> = (0..KEYS.len()).map(|_| base_rng.random_range(0..VALUES.len())).collect();
        let h = config.heterogeneity;
        let grammars = datasets
            .iter()
            .enumerate()
            .map(|(d, name)| {
                let mut rng = stream(seed, Purpose::Corpus, &[1, fnv1a(name)]);
                let mapping = base
                    .iter()
                    .map(|&v| {
                        let u: f64 = rng.random();
                        let alt = rng.random_range(0..VALUES.len());
                        if u < config.concept_shift {
                            alt
                        } else {
                            v
                        }
                    })
                    .collect();
                let favored = index::sample(&mut rng, KEYS.len(), config.favored_keys).into_vec();
                let mut key_weights = vec![1.0 - h; KEYS.len()];
                for k in favored {
                    key_weights[k] += h * KEYS.len() as f64 / config.favored_keys as f64;
                }
                let shift = h * 0.1 * (d % 3) as f64;
                DatasetGrammar {
                    name: name.clone(),
                    mapping,
                    key_weights,
                    key_x: 0.05 + shift,
                    value_x: 0.45 + shift,
                }
            })
            .collect();
        Ok(SyntheticCorpus { config, grammars, seed })
    }

    pub fn grammar(&self, dataset: &str) -> Result<&DatasetGrammar> {
        self.grammars
            .iter()
            .find(|g| g.name == dataset)
            .ok_or_else(|| Error::domain(format!("unknown dataset {dataset:?}")))
    }

    pub fn answer_vocabulary() -> &'static [&'static str] {
        &VALUES
    }

    /// Materializes a document deterministically from its id.
    pub fn document(&self, dataset: &str, doc_id: &str, questions: usize) -> Result<SyntheticDocument> {
        let g = self.grammar(dataset)?;
        let c = &self.config;
        let mut rng = stream(self.seed, Purpose::Corpus, &[2, fnv1a(dataset), fnv1a(doc_id)]);
        let lines = rng.random_range(c.min_lines..=c.max_lines);
        let keys = index::sample_weighted(&mut rng, KEYS.len(), |k| g.key_weights[k], lines)
            .map_err(|e| Error::domain(format!("cannot sample keys for {dataset}: {e}")))?
            .into_vec();
        let row_h = 0.9 / lines as f64;
        let mut tokens = Vec::new();
        let mut boxes = Vec::new();
        let width = |t: &str| (0.012 * t.len() as f64).min(0.3);
        for (r, &k) in keys.iter().enumerate() {
            let y0 = 0.05 + r as f64 * row_h;
            let y1 = y0 + 0.6 * row_h;
            if rng.random::<f64>() < c.filler_prob {
                let f = FILLERS[rng.random_range(0..FILLERS.len())];
                let x0 = 0.8;
                tokens.push(f.to_string());
                boxes.push([x0, y0, x0 + width(f), y1]);
            }
            let key = KEYS[k];
            tokens.push(key.to_string());
            boxes.push([g.key_x, y0, g.key_x + width(key), y1]);
            let value = VALUES[g.mapping[k]];
            tokens.push(value.to_string());
            boxes.push([g.value_x, y0, g.value_x + width(value), y1]);
        }
        let qa = (0..questions)
            .map(|i| {
                let k = keys[i % keys.len()];
                let mut question: Vec<String> = QUESTION_PREFIX.iter().map(|s| s.to_string()).collect();
                question.push(KEYS[k].to_string());
                QaPair {
                    question,
                    answer: VALUES[g.mapping[k]].to_string(),
                }
            })
            .collect();
        Ok(SyntheticDocument {
            doc_id: doc_id.to_string(),
            dataset: dataset.to_string(),
            example: DocumentExample::new(tokens, boxes)?,
            qa,
        })
    }

    pub fn validation_documents(&self, dataset: &str) -> Result<Vec<SyntheticDocument>> {
        (0..self.config.validation_docs)
            .map(|i| self.document(dataset, &format!("val-{}-{i:04}", dataset.to_lowercase()), self.config.validation_questions))
            .collect()
    }

    /// Compiles one document with each objective, masking from per-document streams.
    pub fn compile(&self, doc: &SyntheticDocument, objectives: &[Objective], seed: u64) -> Result<Vec<(Objective, SequencePair)>> {
        let disc = Discretizer::new(self.config.loc_vocab)?;
        objectives
            .iter()
            .map(|&o| {
                let mut rng = stream(seed, Purpose::Masking, &[fnv1a(&doc.doc_id), o as u64]);
                let plan = fsp::sample_default_mask(o, doc.example.len(), &mut rng)?;
                Ok((o, fsp::build(&doc.example, &plan, &disc)?))
            })
            .collect()
    }

    fn bag<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<(usize, f64)> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        let mut n = 0.0;
        for t in tokens {
            *counts.entry(self.config.bucket(t)).or_default() += 1.0;
            n += 1.0;
        }
        counts.into_iter().map(|(b, c)| (b, c / n)).collect()
    }

    /// Softmax examples for the masked slots of a pair: context bag around the
    /// slot in the input, target bag of the slot's target tokens.
    pub fn denoising_examples(&self, pair: &SequencePair) -> Result<Vec<SoftmaxExample>> {
        let units = input_units(&pair.input)?;
        let segments = target_segments(&pair.target)?;
        let w = self.config.context_window;
        let naturals: Vec<(usize, &str)> = units
            .iter()
            .enumerate()
            .filter_map(|(i, u)| match u {
                Unit::Natural(t) => Some((i, *t)),
                Unit::Slot(..) => None,
            })
            .collect();
        let mut out = Vec::new();
        for (pos, unit) in units.iter().enumerate() {
            let Unit::Slot(l, wrapped) = unit else { continue };
            let seg = segments
                .get(*l)
                .ok_or_else(|| Error::parse(pos, format!("no target segment for slot {l}")))?;
            let split = naturals.partition_point(|&(i, _)| i < pos);
            let left = naturals[split.saturating_sub(w)..split].iter().map(|&(_, t)| t);
            let right = naturals[split..(split + w).min(naturals.len())].iter().map(|&(_, t)| t);
            let context: Vec<&str> = left.chain(wrapped.iter().copied()).chain(right).collect();
            if context.is_empty() || seg.is_empty() {
                continue;
            }
            out.push(SoftmaxExample {
                features: self.bag(context),
                target: self.bag(seg.iter().copied()),
            });
        }
        Ok(out)
    }

    pub fn qa_example(&self, qa: &QaPair) -> SoftmaxExample {
        SoftmaxExample {
            features: self.bag(qa.question.iter().map(String::as_str)),
            target: vec![(self.config.bucket(&qa.answer), 1.0)],
        }
    }

    /// Highest-scoring candidate answer; ties go to the earlier candidate.
    pub fn predict(&self, theta: &[f64], question: &[String]) -> &'static str {
        let f = self.config.feature_dim();
        let z = logits(f, f, theta, &self.bag(question.iter().map(String::as_str)));
        let mut best = VALUES[0];
        let mut best_z = f64::NEG_INFINITY;
        for v in VALUES {
            let s = z[self.config.bucket(v)];
            if s > best_z {
                best = v;
                best_z = s;
            }
        }
        best
    }

    pub fn denoising_objective(&self, docs: &[SyntheticDocument], objectives: &[Objective], seed: u64) -> Result<SoftmaxObjective> {
        let f = self.config.feature_dim();
        let mut examples = Vec::new();
        for doc in docs {
            for (_, pair) in self.compile(doc, objectives, seed)? {
                examples.extend(self.denoising_examples(&pair)?);
            }
        }
        SoftmaxObjective::new(f, f, examples)
    }

    pub fn qa_objective(&self, docs: &[SyntheticDocument]) -> Result<SoftmaxObjective> {
        let f = self.config.feature_dim();
        let examples = docs.iter().flat_map(|d| d.qa.iter().map(|q| self.qa_example(q))).collect();
        SoftmaxObjective::new(f, f, examples)?.with_support(&self.answer_buckets())
    }

    /// Output buckets of the answer vocabulary; the QA softmax ranges over these.
    pub fn answer_buckets(&self) -> Vec<usize> {
        let mut b: Vec<usize> = VALUES.iter().map(|v| self.config.bucket(v)).collect();
        b.sort_unstable();
        b.dedup();
        b
    }
}

enum Unit<'a> {
    Natural(&'a str),
    /// Masked slot `l`, with the visible wrapped token for layout modeling.
    Slot(usize, Option<&'a str>),
}

fn input_units(input: &[String]) -> Result<Vec<Unit<'_>>> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < input.len() {
        let t = input[i].as_str();
        match Sentinel::parse(t) {
            None => {
                units.push(Unit::Natural(t));
                i += 1;
            }
            Some(Sentinel::Text(l)) => {
                units.push(Unit::Slot(l, None));
                i += 1;
                while i < input.len() && matches!(Sentinel::parse(&input[i]), Some(Sentinel::Loc(_))) {
                    i += 1;
                }
            }
            Some(Sentinel::TextLayout(l)) => {
                units.push(Unit::Slot(l, None));
                i += 1;
            }
            Some(Sentinel::Layout(l)) => {
                let word = input.get(i + 1).map(String::as_str);
                let close = input.get(i + 2).and_then(|s| Sentinel::parse(s));
                match (word, close) {
                    (Some(w), Some(Sentinel::LayoutEnd(e))) if e == l && Sentinel::parse(w).is_none() => {
                        units.push(Unit::Slot(l, Some(w)));
                        i += 3;
                    }
                    _ => return Err(Error::parse(i, format!("unterminated layout slot {l}"))),
                }
            }
            Some(other) => return Err(Error::parse(i, format!("unexpected {other} in input"))),
        }
    }
    Ok(units)
}

fn target_segments(target: &[String]) -> Result<Vec<Vec<&str>>> {
    let mut segments: Vec<Vec<&str>> = Vec::new();
    for (i, t) in target.iter().enumerate() {
        match Sentinel::parse(t) {
            Some(Sentinel::Text(l)) | Some(Sentinel::Layout(l)) | Some(Sentinel::TextLayout(l)) => {
                if l != segments.len() {
                    return Err(Error::parse(i, format!("target slot {l} out of order")));
                }
                segments.push(Vec::new());
            }
            _ => match segments.last_mut() {
                Some(seg) => seg.push(t),
                None => return Err(Error::parse(i, "target does not start with a slot sentinel")),
            },
        }
    }
    Ok(segments)
}

/// Documents held by each planned client, materialized from the corpus.
pub fn materialize(corpus: &SyntheticCorpus, plans: &[ClientShardPlan], questions: &BTreeMap<String, usize>) -> Result<Vec<Vec<SyntheticDocument>>> {
    plans
        .iter()
        .map(|p| {
            p.doc_ids
                .iter()
                .map(|id| corpus.document(&p.dataset, id, questions.get(id).copied().unwrap_or(1)))
                .collect()
        })
        .collect()
}

/// Validation for the denoising task: pooled loss plus per-dataset mean loss.
pub struct DenoisingEvaluator {
    sets: Vec<(String, SoftmaxObjective)>,
}

impl Evaluator for DenoisingEvaluator {
    fn evaluate(&self, theta: &ParameterVector) -> Result<Evaluation> {
        let mut total = 0.0;
        let mut n = 0usize;
        let mut per_dataset = BTreeMap::new();
        for (name, obj) in &self.sets {
            let l = obj.full_loss(theta.as_slice());
            total += l * obj.num_examples() as f64;
            n += obj.num_examples();
            per_dataset.insert(name.clone(), l);
        }
        Ok(Evaluation {
            loss: total / n.max(1) as f64,
            per_dataset,
        })
    }
}

/// Validation for the QA task: pooled cross-entropy plus per-dataset
/// ANLS/accuracy of the argmax answer.
pub struct QaEvaluator {
    corpus: SyntheticCorpus,
    sets: Vec<(String, Vec<QaPair>, SoftmaxObjective)>,
}

impl Evaluator for QaEvaluator {
    fn evaluate(&self, theta: &ParameterVector) -> Result<Evaluation> {
        let mut total = 0.0;
        let mut n = 0usize;
        let mut examples = Vec::new();
        for (name, pairs, obj) in &self.sets {
            total += obj.full_loss(theta.as_slice()) * obj.num_examples() as f64;
            n += obj.num_examples();
            for qa in pairs {
                let pred = self.corpus.predict(theta.as_slice(), &qa.question);
                examples.push(EvalExample::new(name.clone(), pred, vec![qa.answer.clone()]));
            }
        }
        let report = two_step_average(&examples)?;
        Ok(Evaluation {
            loss: total / n.max(1) as f64,
            per_dataset: report.per_dataset,
        })
    }
}

/// Pretraining (denoising) and finetuning (QA) populations over the same shards.
pub struct DocumentFederation {
    pub corpus: SyntheticCorpus,
    pub plans: Vec<ClientShardPlan>,
    pub pretrain: Population,
    pub finetune: Population,
}

impl DocumentFederation {
    pub fn build(
        corpus: SyntheticCorpus,
        plans: Vec<ClientShardPlan>,
        questions: &BTreeMap<String, usize>,
        objectives: &[Objective],
        seed: u64,
    ) -> Result<Self> {
        let docs = materialize(&corpus, &plans, questions)?;
        let mut datasets: Vec<String> = plans.iter().map(|p| p.dataset.clone()).collect();
        datasets.sort();
        datasets.dedup();

        let mut pre_clients = Vec::with_capacity(plans.len());
        let mut ft_clients = Vec::with_capacity(plans.len());
        for (plan, docs) in plans.iter().zip(&docs) {
            let shard = |objective: Arc<dyn LocalObjective>| ClientShard {
                id: plan.client_id,
                dataset: plan.dataset.clone(),
                doc_ids: plan.doc_ids.clone(),
                num_documents: plan.num_documents(),
                num_questions: plan.num_questions,
                objective,
            };
            if !objectives.is_empty() {
                pre_clients.push(shard(Arc::new(corpus.denoising_objective(docs, objectives, seed)?)));
            }
            ft_clients.push(shard(Arc::new(corpus.qa_objective(docs)?)));
        }

        let mut den_sets = Vec::new();
        let mut qa_sets = Vec::new();
        for name in &datasets {
            let val = corpus.validation_documents(name)?;
            if !objectives.is_empty() {
                den_sets.push((name.clone(), corpus.denoising_objective(&val, objectives, seed)?));
            }
            let pairs: Vec<QaPair> = val.iter().flat_map(|d| d.qa.clone()).collect();
            qa_sets.push((name.clone(), pairs, corpus.qa_objective(&val)?));
        }

        let finetune = Population::new(
            ft_clients,
            Arc::new(QaEvaluator {
                corpus: corpus.clone(),
                sets: qa_sets,
            }),
        )?;
        let pretrain = if objectives.is_empty() {
            finetune.clone()
        } else {
            Population::new(pre_clients, Arc::new(DenoisingEvaluator { sets: den_sets }))?
        };
        Ok(DocumentFederation {
            corpus,
            plans,
            pretrain,
            finetune,
        })
    }
}
