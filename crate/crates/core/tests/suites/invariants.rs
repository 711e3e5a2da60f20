//! Structural invariants of the memory, the losses, the graph network and
//! the training schedule. Shared by the `invariants` and `acceptance` test
//! targets.

use crate::common::{small_experiment, small_scenario};
use meminv::gpp::{build_graph, classify_positive, gcn_forward, graph_from_candidates, GppNetwork};
use meminv::losses::NeighborSet;
use meminv::memory::{AlphaSchedule, ExemplarMemory};
use meminv::numerics::{l2_normalize, norm, Matrix};
use meminv::trainer::{NeighborMode, TrainConfig, TrainObserver, TrainState, Trainer};
use proptest::prelude::*;

fn memory_from(rows: Vec<Vec<f64>>) -> ExemplarMemory {
    let unit: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r)).collect();
    ExemplarMemory::from_slots(Matrix::from_rows(&unit).unwrap()).unwrap()
}

fn rows_strategy(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

proptest! {
    fn check_memory_probabilities_sum_to_one(
        rows in rows_strategy(1..40, 5),
        f in prop::collection::vec(-1.0f64..1.0, 5),
        beta in prop::sample::select(vec![0.01, 0.05, 0.5, 1.0]),
    ) {
        let mem = memory_from(rows);
        let p = mem.probabilities(&l2_normalize(&f), beta).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn check_adjacency_is_row_stochastic(
        rows in rows_strategy(3..30, 6),
        anchor in 0usize..3,
        k in 1usize..3,
    ) {
        let mem = memory_from(rows);
        let graph = build_graph(&mem, Some(anchor), mem.slot(anchor), k).unwrap();
        for r in 0..k {
            let row = graph.adjacency.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    fn check_memory_updates_keep_unit_norm(
        rows in rows_strategy(1..10, 4),
        f in prop::collection::vec(-1.0f64..1.0, 4),
        alpha in 0.0f64..=1.0,
    ) {
        let mut mem = memory_from(rows);
        let f = l2_normalize(&f);
        prop_assume!(norm(&f) > 0.5);
        for i in 0..mem.len() {
            mem.update_slot(i, &f, alpha).unwrap();
            let n = norm(mem.slot(i));
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12, "slot {} norm {}", i, n);
        }
    }

    fn check_gpp_is_permutation_equivariant(
        rows in rows_strategy(10..20, 8),
        seed in 0u64..1000,
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mem = memory_from(rows);
        let anchor = l2_normalize(mem.slot(0));
        let candidates: Vec<usize> = (1..8).collect();
        let mut permuted = candidates.clone();
        permuted.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));

        let (dims, hidden) = GppNetwork::default_dims(8, 4);
        let net = GppNetwork::new(&dims, hidden, seed).unwrap();
        let run = |cands: Vec<usize>| {
            let g = graph_from_candidates(&mem, &anchor, cands).unwrap();
            let z = gcn_forward(&g, &net).unwrap().z;
            let probs = classify_positive(&z, &net, true).unwrap().0.probs;
            (z, probs)
        };
        let (z, p) = run(candidates.clone());
        let (zp, pp) = run(permuted.clone());
        for (r, j) in permuted.iter().enumerate() {
            let orig = candidates.iter().position(|c| c == j).unwrap();
            for (a, b) in zp.row(r).iter().zip(z.row(orig)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            prop_assert!((pp[r] - p[orig]).abs() < 1e-10);
        }
    }
}

pub fn memory_probabilities_sum_to_one() {
    check_memory_probabilities_sum_to_one();
}

pub fn adjacency_is_row_stochastic() {
    check_adjacency_is_row_stochastic();
}

pub fn memory_updates_keep_unit_norm() {
    check_memory_updates_keep_unit_norm();
}

pub fn gpp_is_permutation_equivariant() {
    check_gpp_is_permutation_equivariant();
}

pub fn alpha_schedule_is_exact() {
    let s = AlphaSchedule::default();
    for e in 0..250 {
        assert_eq!(s.alpha(e), (0.01 * e as f64).min(1.0), "epoch {e}");
    }
}

#[derive(Default)]
struct Recorder {
    alphas: Vec<(usize, f64)>,
    sets: Vec<(usize, NeighborSet)>,
    bad_norms: Vec<String>,
}

impl TrainObserver for &mut Recorder {
    fn on_neighbor_sets(&mut self, epoch: usize, sets: &[NeighborSet]) {
        self.sets.extend(sets.iter().map(|s| (epoch, s.clone())));
    }

    fn on_alpha(&mut self, epoch: usize, alpha: f64) {
        self.alphas.push((epoch, alpha));
    }

    fn on_epoch_end(&mut self, state: &TrainState, touched_target: &[usize], touched_source: &[usize]) {
        for (name, mem, touched) in [
            ("target", &state.target_memory, touched_target),
            ("source", &state.source_memory, touched_source),
        ] {
            for &i in touched {
                let n = norm(mem.slot(i));
                if (n - 1.0).abs() > 1e-12 {
                    self.bad_norms.push(format!("{name} slot {i} norm {n} after epoch {}", state.epoch));
                }
            }
        }
    }
}

pub fn training_schedule_invariants() {
    let sc = small_scenario();
    let mut cfg = small_experiment().train;
    cfg.neighbor_mode = NeighborMode::Vns;
    let mut rec = Recorder::default();
    let mut trainer = Trainer::new(cfg.clone(), &sc.source, &sc.target_train, &sc.target_test)
        .unwrap()
        .with_observer(&mut rec);
    trainer.run().unwrap();
    let state = trainer.into_state();

    assert!(rec.bad_norms.is_empty(), "{:?}", rec.bad_norms);
    for mem in [&state.source_memory, &state.target_memory] {
        for i in 0..mem.len() {
            assert!((norm(mem.slot(i)) - 1.0).abs() < 1e-12, "slot {i} not unit norm after training");
        }
    }

    let expected: Vec<(usize, f64)> = (0..cfg.epochs).map(|e| (e, (0.01 * e as f64).min(1.0))).collect();
    assert_eq!(rec.alphas, expected);

    assert!(rec.sets.iter().any(|(e, _)| *e < 10));
    for (epoch, set) in &rec.sets {
        if *epoch < 10 {
            assert_eq!(set.members(), &[set.anchor()], "epoch {epoch}");
        }
    }
    assert!(rec.sets.iter().any(|(e, s)| *e >= 10 && !s.is_singleton()));
}

pub fn gpp_step_leaves_embedder_and_memories_bit_identical() {
    let sc = small_scenario();
    let cfg = TrainConfig {
        epochs: 6,
        ..small_experiment().train
    };
    let mut trainer = Trainer::new(cfg, &sc.source, &sc.target_train, &sc.target_test).unwrap();
    trainer.run_until(6).unwrap();
    let before = trainer.state().clone();
    trainer.gpp_step(&[0, 5, 17, 30]).unwrap();
    let after = trainer.state();
    assert_eq!(after.embedder, before.embedder);
    assert_eq!(after.classifier, before.classifier);
    assert_eq!(after.source_memory, before.source_memory);
    assert_eq!(after.target_memory, before.target_memory);
    assert_ne!(after.gpp, before.gpp, "the GPP network itself is updated");
}
