//! Answer scoring: Levenshtein distance, ANLS, exact-match accuracy and the
//! two-step (per-dataset, then across datasets) average.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ANLS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Anls,
    Accuracy,
}

impl MetricKind {
    /// WTQ and DocVQA are scored with ANLS, TabFact with accuracy. Unknown
    /// datasets fall back to ANLS.
    pub fn for_dataset(name: &str) -> MetricKind {
        if name.eq_ignore_ascii_case("tabfact") {
            MetricKind::Accuracy
        } else {
            MetricKind::Anls
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub dataset: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub metric: MetricKind,
}

impl EvalExample {
    pub fn new(dataset: impl Into<String>, prediction: impl Into<String>, golds: Vec<String>) -> Self {
        let dataset = dataset.into();
        let metric = MetricKind::for_dataset(&dataset);
        EvalExample {
            dataset,
            prediction: prediction.into(),
            golds,
            metric,
        }
    }

    pub fn score(&self, tau: f64) -> f64 {
        match self.metric {
            MetricKind::Anls => anls_score(&self.prediction, &self.golds, tau),
            MetricKind::Accuracy => accuracy_score(&self.prediction, &self.golds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_dataset: BTreeMap<String, f64>,
    /// Unweighted mean of `per_dataset`, in [0, 1].
    pub final_score: f64,
}

impl ScoreReport {
    /// Final score on the 0-100 scale used for reporting.
    pub fn final_percent(&self) -> f64 {
        self.final_score * 100.0
    }
}

/// Edit distance with unit insert/delete/substitute costs over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Normalized Levenshtein similarity `1 - dist / max_len` after lowercasing and trimming.
pub fn nls(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    let len = p.chars().count().max(g.chars().count());
    if len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / len as f64
}

/// Best similarity over `golds`, zeroed when below `tau`.
pub fn anls_score<S: AsRef<str>>(prediction: &str, golds: &[S], tau: f64) -> f64 {
    let best = golds
        .iter()
        .map(|g| nls(prediction, g.as_ref()))
        .fold(0.0, f64::max);
    if best >= tau {
        best
    } else {
        0.0
    }
}

pub fn accuracy_score<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let p = normalize(prediction);
    if golds.iter().any(|g| normalize(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    }
}

/// Mean of per-dataset means over already-scored examples.
pub fn two_step_mean<'a>(scores: impl IntoIterator<Item = (&'a str, f64)>) -> Result<ScoreReport> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (dataset, s) in scores {
        let e = sums.entry(dataset.to_string()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::domain("no examples to score"));
    }
    let per_dataset: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    let final_score = per_dataset.values().sum::<f64>() / per_dataset.len() as f64;
    Ok(ScoreReport {
        per_dataset,
        final_score,
    })
}

pub fn two_step_average(examples: &[EvalExample]) -> Result<ScoreReport> {
    two_step_average_with(examples, DEFAULT_ANLS_THRESHOLD)
}

pub fn two_step_average_with(examples: &[EvalExample], tau: f64) -> Result<ScoreReport> {
    let mut kinds: BTreeMap<&str, MetricKind> = BTreeMap::new();
    for ex in examples {
        if ex.golds.is_empty() {
            return Err(Error::domain(format!("example in {} has no gold answers", ex.dataset)));
        }
        if let Some(prev) = kinds.insert(&ex.dataset, ex.metric) {
            if prev != ex.metric {
                return Err(Error::domain(format!("dataset {} mixes metric kinds", ex.dataset)));
            }
        }
    }
    two_step_mean(examples.iter().map(|e| (e.dataset.as_str(), e.score(tau))))
}
