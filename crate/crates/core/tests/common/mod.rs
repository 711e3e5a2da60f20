//! Small scenarios shared by the integration tests.

#![allow(dead_code)]

use meminv::config::ExperimentConfig;
use meminv::data::{DomainKind, DomainSpec, Scenario};
use meminv::trainer::TrainConfig;

pub fn small_spec(kind: DomainKind, identities: usize, offset: u32, seed: u64) -> DomainSpec {
    DomainSpec {
        kind,
        num_identities: identities,
        samples_per_identity: 6,
        num_cameras: 3,
        in_dim: 8,
        cluster_spread: 0.15,
        camera_strength: 0.2,
        shift_strength: 0.3,
        identity_offset: offset,
        seed,
    }
}

/// An experiment small enough to train for a dozen epochs in well under a
/// second, with the default schedule (NI from epoch 10, GPP from epoch 5).
pub fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        source: small_spec(DomainKind::Source, 12, 0, 1),
        target: small_spec(DomainKind::Target, 12, 100, 2),
        test_fraction: 0.25,
        checkpoint_every: 5,
        train: TrainConfig {
            epochs: 12,
            batch_size: 16,
            hidden_dim: 16,
            embed_dim: 8,
            vns_k: 4,
            k_candidates: Some(10),
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn small_scenario() -> Scenario {
    let cfg = small_experiment();
    Scenario::build(&cfg.source, &cfg.target, cfg.test_fraction, cfg.counterparts).unwrap()
}
