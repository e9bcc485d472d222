//! Non-IID client population builder.
//!
//! Each source dataset's documents are shuffled and dealt into `k_doc`
//! contiguous, near-equal shards, so every client holds documents from one
//! dataset only. Questions travel with their documents.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream, Purpose};

/// Train-split document counts per dataset (WTQ, DocVQA, TabFact).
pub const TRAIN_DOCUMENTS: [(&str, usize); 3] =
    [("WTQ", 1346), ("DocVQA", 10194), ("TabFact", 13163)];

/// Train-split question counts per dataset.
pub const TRAIN_QUESTIONS: [(&str, usize); 3] =
    [("WTQ", 14152), ("DocVQA", 39463), ("TabFact", 91835)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub documents: Vec<DocumentRecord>,
    /// Number of clients this dataset is spread over.
    pub clients: usize,
}

impl DatasetDescriptor {
    pub fn num_questions(&self) -> usize {
        self.documents.iter().map(|d| d.questions).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShardPlan {
    pub client_id: usize,
    pub dataset: String,
    pub doc_ids: Vec<String>,
    pub num_questions: usize,
}

impl ClientShardPlan {
    pub fn num_documents(&self) -> usize {
        self.doc_ids.len()
    }
}

/// Client allocation `(k_WTQ, k_DocVQA, k_TabFact)` for the standard scenarios.
pub fn scenario_allocation(k: usize) -> Result<[usize; 3]> {
    match k {
        3 => Ok([1, 1, 1]),
        10 => Ok([1, 4, 5]),
        30 => Ok([2, 13, 15]),
        other => Err(Error::domain(format!(
            "no standard allocation for K={other}; use a custom allocation"
        ))),
    }
}

/// Attaches a standard allocation to per-dataset documents, given in
/// (WTQ, DocVQA, TabFact) order.
pub fn scenario(k: usize, documents: [Vec<DocumentRecord>; 3]) -> Result<Vec<DatasetDescriptor>> {
    let alloc = scenario_allocation(k)?;
    Ok(documents
        .into_iter()
        .zip(TRAIN_DOCUMENTS)
        .zip(alloc)
        .map(|((documents, (name, _)), clients)| DatasetDescriptor {
            name: name.to_string(),
            documents,
            clients,
        })
        .collect())
}

pub fn partition(descriptors: &[DatasetDescriptor], seed: u64) -> Result<Vec<ClientShardPlan>> {
    let mut plans = Vec::new();
    for (d, desc) in descriptors.iter().enumerate() {
        let n = desc.documents.len();
        let k = desc.clients;
        if k == 0 || k > n {
            return Err(Error::domain(format!(
                "dataset {} cannot be split into {k} clients ({n} documents)",
                desc.name
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Purpose::Partition, &[d as u64]));
        let (base, extra) = (n / k, n % k);
        let mut start = 0;
        for shard in 0..k {
            let len = base + usize::from(shard < extra);
            let docs = &order[start..start + len];
            start += len;
            plans.push(ClientShardPlan {
                client_id: plans.len(),
                dataset: desc.name.clone(),
                doc_ids: docs.iter().map(|&i| desc.documents[i].doc_id.clone()).collect(),
                num_questions: docs.iter().map(|&i| desc.documents[i].questions).sum(),
            });
        }
    }
    Ok(plans)
}

/// Parses `dataset_name, doc_id, question_count` lines. Blank lines and
/// lines starting with `#` are skipped. Datasets keep first-seen order.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, Vec<DocumentRecord>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_name: BTreeMap<String, Vec<DocumentRecord>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(lineno + 1, format!("expected 3 fields, got {line:?}")));
        }
        let questions: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(lineno + 1, format!("bad question count {:?}", fields[2])))?;
        if !by_name.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        by_name.entry(fields[0].to_string()).or_default().push(DocumentRecord {
            doc_id: fields[1].to_string(),
            questions,
        });
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let docs = by_name.remove(&name).unwrap_or_default();
            (name, docs)
        })
        .collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, Vec<DocumentRecord>)>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(datasets: &[(String, Vec<DocumentRecord>)]) -> String {
    let mut out = String::new();
    for (name, docs) in datasets {
        for d in docs {
            out.push_str(&format!("{name}, {}, {}\n", d.doc_id, d.questions));
        }
    }
    out
}

/// Synthetic manifest with the given per-dataset (documents, questions)
/// totals. Question counts are spread as evenly as possible over documents.
pub fn synthetic_manifest(cardinalities: &[(&str, usize, usize)]) -> Vec<(String, Vec<DocumentRecord>)> {
    cardinalities
        .iter()
        .map(|&(name, docs, questions)| {
            let records = (0..docs)
                .map(|i| DocumentRecord {
                    doc_id: format!("{}-{i:06}", name.to_lowercase()),
                    questions: questions / docs + usize::from(i < questions % docs),
                })
                .collect();
            (name.to_string(), records)
        })
        .collect()
}

/// Manifest with the full train-split cardinalities, optionally scaled down
/// by an integer divisor (at least one document per dataset).
pub fn train_split_manifest(divisor: usize) -> Vec<(String, Vec<DocumentRecord>)> {
    let divisor = divisor.max(1);
    let cards: Vec<(&str, usize, usize)> = TRAIN_DOCUMENTS
        .iter()
        .zip(TRAIN_QUESTIONS)
        .map(|(&(name, d), (_, q))| (name, (d / divisor).max(1), (q / divisor).max(1)))
        .collect();
    synthetic_manifest(&cards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn docs(n: usize) -> Vec<DocumentRecord> {
        (0..n)
            .map(|i| DocumentRecord {
                doc_id: format!("d{i}"),
                questions: 1 + i % 3,
            })
            .collect()
    }

    fn desc(n: usize, k: usize) -> DatasetDescriptor {
        DatasetDescriptor {
            name: "X".into(),
            documents: docs(n),
            clients: k,
        }
    }

    #[test]
    fn allocations() {
        assert_eq!(scenario_allocation(3).unwrap(), [1, 1, 1]);
        assert_eq!(scenario_allocation(10).unwrap(), [1, 4, 5]);
        assert_eq!(scenario_allocation(30).unwrap(), [2, 13, 15]);
        assert!(matches!(scenario_allocation(7), Err(Error::Domain(_))));
    }

    #[test]
    fn wtq_into_two() {
        let plan = partition(&[desc(1346, 2)], 0).unwrap();
        assert_eq!(plan.iter().map(|p| p.num_documents()).collect::<Vec<_>>(), vec![673, 673]);
    }

    #[test]
    fn docvqa_into_thirteen() {
        let plan = partition(&[desc(10194, 13)], 0).unwrap();
        let sizes: Vec<usize> = plan.iter().map(|p| p.num_documents()).collect();
        assert!(sizes.iter().all(|&s| s == 784 || s == 785));
        assert_eq!(sizes.iter().sum::<usize>(), 10194);
        // remainder goes to the earliest shards
        assert_eq!(&sizes[..2], &[785, 785]);
    }

    #[test]
    fn one_client_is_identity() {
        let d = desc(17, 1);
        let plan = partition(std::slice::from_ref(&d), 3).unwrap();
        let got: HashSet<_> = plan[0].doc_ids.iter().cloned().collect();
        let want: HashSet<_> = d.documents.iter().map(|r| r.doc_id.clone()).collect();
        assert_eq!(got, want);
        assert_eq!(plan[0].num_questions, d.num_questions());
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(partition(&[desc(3, 4)], 0), Err(Error::Domain(_))));
        assert!(matches!(partition(&[desc(3, 0)], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn ids_follow_dataset_then_shard_order() {
        let mut b = desc(10, 3);
        b.name = "Y".into();
        let plan = partition(&[desc(5, 2), b], 1).unwrap();
        let ids: Vec<(usize, &str)> = plan.iter().map(|p| (p.client_id, p.dataset.as_str())).collect();
        assert_eq!(ids, vec![(0, "X"), (1, "X"), (2, "Y"), (3, "Y"), (4, "Y")]);
    }

    #[test]
    fn seeds_change_plans() {
        let a = partition(&[desc(50, 5)], 1).unwrap();
        let b = partition(&[desc(50, 5)], 1).unwrap();
        let c = partition(&[desc(50, 5)], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# header\nWTQ, w1, 3\n\nDocVQA,d1,2\nWTQ , w2 , 0\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m[0].0, "WTQ");
        assert_eq!(m[0].1.len(), 2);
        assert_eq!(m[1].1[0].questions, 2);
        let err = parse_manifest("WTQ, w1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { position: 1, .. }));
        let err = parse_manifest("WTQ, w1, 3\nWTQ, w2, x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { position: 2, .. }));
        assert_eq!(parse_manifest(&write_manifest(&m)).unwrap(), m);
    }

    #[test]
    fn synthetic_manifest_totals() {
        let m = train_split_manifest(1);
        for ((name, docs), ((_, d), (_, q))) in m.iter().zip(TRAIN_DOCUMENTS.iter().zip(TRAIN_QUESTIONS)) {
            assert_eq!(docs.len(), *d, "{name}");
            assert_eq!(docs.iter().map(|r| r.questions).sum::<usize>(), q);
        }
    }
}
