use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;

use fedocvqa::client::synthetic::{make_synthetic_federation, ExampleCounts, SyntheticDims, SyntheticFederation};
use fedocvqa::client::{ClientOptKind, LocalObjective, TrainerConfig};
use fedocvqa::orchestrator::{
    records_to_csv, run_training, AggregationMode, FederationConfig, Population,
};
use fedocvqa::server::ServerOptKind;
use fedocvqa::vector::ParameterVector;

fn federation(k: usize, counts: Vec<usize>, seed: u64) -> SyntheticFederation {
    let dims = SyntheticDims {
        dim: 4,
        examples: ExampleCounts::PerCluster(counts),
        noise: 0.1,
    };
    make_synthetic_federation(k, &[k / 3; 3], 0.7, &dims, seed).unwrap()
}

fn population(fed: &SyntheticFederation) -> Population {
    let shards = fed
        .clients
        .iter()
        .map(|c| {
            let obj: Arc<dyn LocalObjective> = Arc::new(c.objective.clone());
            (fed.dataset_of(c.id).to_string(), obj)
        })
        .collect();
    Population::from_objectives(shards).unwrap()
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/quadratic_rounds.csv")
}

fn adam_config(k: usize, c: f64, rounds: usize, opt: ServerOptKind) -> FederationConfig {
    FederationConfig {
        server_opt: opt,
        trainer: TrainerConfig {
            eta_l: 0.05,
            batch_size: 4,
            ..TrainerConfig::default()
        },
        ..FederationConfig::new(k, c, rounds, 21)
    }
}

#[test]
fn rounds_csv_matches_golden() {
    let fed = federation(6, vec![10, 14, 9], 5);
    let config = adam_config(6, 0.5, 4, ServerOptKind::FedAvgM);
    let run = run_training(&config, &population(&fed), ParameterVector::zeros(4)).unwrap();
    let csv = records_to_csv(&run.records);
    if std::env::var_os("FEDOCVQA_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &csv).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(csv, golden);
}

#[test]
fn worker_count_does_not_change_results() {
    let fed = federation(9, vec![11, 7, 13], 8);
    let pop = population(&fed);
    for opt in [ServerOptKind::FedAvg, ServerOptKind::FedAvgM, ServerOptKind::FedAdam] {
        let base = adam_config(9, 0.6, 5, opt);
        let reference = run_training(&base, &pop, ParameterVector::zeros(4)).unwrap();
        for workers in [1, 2, 4] {
            let config = FederationConfig {
                workers: Some(workers),
                ..base.clone()
            };
            let run = run_training(&config, &pop, ParameterVector::zeros(4)).unwrap();
            assert_eq!(run.records, reference.records);
            let bits = |t: &ParameterVector| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(run.final_theta()), bits(reference.final_theta()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_participation_gd_is_centralized_gd(
        seed in 0u64..1000,
        n1 in 1usize..20,
        n2 in 1usize..20,
        n3 in 1usize..20,
        eta in 0.001f64..0.1,
    ) {
        let fed = federation(3, vec![n1, n2, n3], seed);
        let pop = population(&fed);
        let config = FederationConfig {
            aggregation: AggregationMode::Normalized,
            server_opt: ServerOptKind::FedAvg,
            trainer: TrainerConfig {
                eta_l: eta,
                weight_decay: 0.0,
                batch_size: 64,
                epochs: 1,
                optimizer: ClientOptKind::Gd,
                ..TrainerConfig::default()
            },
            ..FederationConfig::new(3, 1.0, 10, seed)
        };
        let run = run_training(&config, &pop, ParameterVector::zeros(4)).unwrap();

        let total = (n1 + n2 + n3) as f64;
        let mut theta = vec![0.0; 4];
        for _ in 0..10 {
            let mut g = vec![0.0; 4];
            for c in &fed.clients {
                let q = &c.objective;
                let n = q.num_examples();
                for i in 0..n {
                    let row = q.row(i);
                    let r: f64 = row.iter().zip(&theta).map(|(a, t)| a * t).sum::<f64>() - q.target(i);
                    for (gj, a) in g.iter_mut().zip(row) {
                        *gj += n as f64 / total * r * a / n as f64;
                    }
                }
            }
            for (t, gj) in theta.iter_mut().zip(&g) {
                *t -= eta * gj;
            }
        }
        for (a, b) in run.final_theta().iter().zip(&theta) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}
