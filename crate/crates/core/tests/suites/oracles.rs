//! Fast paths checked against slow, independent reference computations.
//! Shared by the `oracles` and `acceptance` test targets.

use meminv::eval::{cmc, evaluate_retrieval, mean_average_precision, rank_gallery, CMC_RANKS};
use meminv::losses::{target_loss, NeighborSet};
use meminv::memory::ExemplarMemory;
use meminv::numerics::{l2_normalize, Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&v)
}

/// Vectors drawn from a small lattice, so exact score ties (including
/// zero scores of either sign) are common.
fn lattice_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect()
}

/// A normalized lattice vector; the zero vector stays zero, like a cold
/// memory slot.
fn lattice_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&lattice_vector(rng, d))
}

fn memory_from(rows: &[Vec<f64>]) -> ExemplarMemory {
    ExemplarMemory::from_slots(Matrix::from_rows(rows).unwrap()).unwrap()
}

pub fn topk_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let d = rng.random_range(1..6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| lattice_unit(&mut rng, d)).collect();
        let mem = memory_from(&rows);
        let f = lattice_unit(&mut rng, d);
        let exclude = rng.random_bool(0.5).then(|| rng.random_range(0..n));
        let available = n - usize::from(exclude.is_some());
        let k = rng.random_range(0..=available);

        // Reference: score every slot from the raw rows, sort everything.
        let mut all: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .filter(|&(j, _)| Some(j) != exclude)
            .map(|(j, r)| (r.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>(), j))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = all.iter().take(k).map(|&(_, j)| j).collect();

        assert_eq!(mem.topk(&f, k, exclude).unwrap(), expected);
    }
}

/// Rank of gallery item `g` for a query: one plus the number of items placed
/// before it (higher score, or equal score and lower index).
fn brute_rank(scores: &[f64], g: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&h| scores[h] > scores[g] || (scores[h] == scores[g] && h < g))
        .count()
}

struct BruteMetrics {
    cmc: Vec<f64>,
    map: f64,
}

/// CMC and mAP by enumerating every (query, relevant item) pair, without
/// building ranked lists.
fn brute_force(queries: &[Vec<f64>], q_ids: &[u32], gallery: &[Vec<f64>], g_ids: &[u32]) -> BruteMetrics {
    let mut hits = vec![0usize; CMC_RANKS.len()];
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    for (q, qid) in queries.iter().zip(q_ids) {
        let scores: Vec<f64> = gallery
            .iter()
            .map(|g| g.iter().zip(q).map(|(a, b)| a * b).sum())
            .collect();
        let relevant: Vec<usize> = (0..gallery.len()).filter(|&g| g_ids[g] == *qid).collect();
        if relevant.is_empty() {
            continue;
        }
        counted += 1;
        let ranks: Vec<usize> = relevant.iter().map(|&g| brute_rank(&scores, g)).collect();
        let best = *ranks.iter().min().unwrap();
        for (h, &r) in hits.iter_mut().zip(CMC_RANKS.iter()) {
            if best <= r {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for &r in &ranks {
            let at_or_before = ranks.iter().filter(|&&o| o <= r).count();
            ap += at_or_before as f64 / r as f64;
        }
        ap_sum += ap / ranks.len() as f64;
    }
    BruteMetrics {
        cmc: hits.iter().map(|&h| h as f64 / counted as f64).collect(),
        map: ap_sum / counted as f64,
    }
}

pub fn retrieval_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for instance in 0..100 {
        let d = rng.random_range(2..5);
        let n_ids = rng.random_range(2..8);
        let nq = rng.random_range(1..12);
        let ng = rng.random_range(5..60);
        // Lattice features give ties; some instances are continuous.
        let draw = |rng: &mut ChaCha8Rng| {
            if instance % 2 == 0 {
                lattice_vector(rng, d)
            } else {
                random_unit(rng, d)
            }
        };
        let queries: Vec<Vec<f64>> = (0..nq).map(|_| draw(&mut rng)).collect();
        let gallery: Vec<Vec<f64>> = (0..ng).map(|_| draw(&mut rng)).collect();
        let q_ids: Vec<u32> = (0..nq).map(|_| rng.random_range(0..n_ids)).collect();
        let mut g_ids: Vec<u32> = (0..ng).map(|_| rng.random_range(0..n_ids)).collect();
        g_ids[0] = q_ids[0];

        let oracle = brute_force(&queries, &q_ids, &gallery, &g_ids);
        let q_meta: Vec<(u32, u16)> = q_ids.iter().map(|&i| (i, 0)).collect();
        let g_meta: Vec<(u32, u16)> = g_ids.iter().map(|&i| (i, 1)).collect();
        let m = evaluate_retrieval(
            &Matrix::from_rows(&queries).unwrap(),
            &q_meta,
            &Matrix::from_rows(&gallery).unwrap(),
            &g_meta,
            false,
        )
        .unwrap();
        let got = [m.rank1, m.rank5, m.rank10, m.rank20];
        for (g, o) in got.iter().zip(&oracle.cmc) {
            assert!((g - o).abs() < 1e-12, "instance {instance}: CMC {got:?} vs {:?}", oracle.cmc);
        }
        assert!((m.map - oracle.map).abs() < 1e-12, "instance {instance}: mAP {} vs {}", m.map, oracle.map);

        // The list-based helpers agree with the summary function.
        let gm = Matrix::from_rows(&gallery).unwrap();
        let lists: Vec<_> = queries
            .iter()
            .enumerate()
            .map(|(q, f)| rank_gallery(q, f, &gm, |g| g_ids[g] == q_ids[q], |_| false))
            .collect();
        assert_eq!(cmc(&lists, &CMC_RANKS).accuracy, got.to_vec());
        assert_eq!(mean_average_precision(&lists).0, m.map);
    }
}

pub fn memory_update_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let d = rng.random_range(1..10);
        let n = rng.random_range(1..6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let mut mem = memory_from(&rows);
        let i = rng.random_range(0..n);
        let f = random_unit(&mut rng, d);
        let alpha = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..=1.0) };
        mem.update_slot(i, &f, alpha).unwrap();

        let mixed: Vec<f64> = rows[i].iter().zip(&f).map(|(s, x)| alpha * s + (1.0 - alpha) * x).collect();
        let len = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, (&got, want)) in mem.slot(i).iter().zip(&mixed).enumerate() {
            let want = if len > 0.0 { want / len } else { 0.0 };
            assert!((got - want).abs() < 1e-12, "component {c}: {got} vs {want}");
        }
        for (j, row) in rows.iter().enumerate().filter(|&(j, _)| j != i) {
            assert_eq!(mem.slot(j), row.as_slice(), "slot {j} untouched");
        }
    }
}

pub fn neighbor_weights_follow_the_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let n = rng.random_range(2..30);
        let d = rng.random_range(2..8);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let mem = memory_from(&rows);
        let anchor = rng.random_range(0..n);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
        others.shuffle(&mut rng);
        let chosen: Vec<usize> = others[..rng.random_range(0..=others.len().min(8))].to_vec();
        let set = NeighborSet::new(anchor, chosen.iter().copied());

        // Direct rule: the anchor weighs 1, each other member 1/|K \ {i}|.
        let weight = |j: usize| -> f64 {
            if j == anchor {
                1.0
            } else if chosen.contains(&j) {
                1.0 / chosen.len() as f64
            } else {
                0.0
            }
        };
        for j in 0..n {
            assert_eq!(set.weight(j), weight(j));
        }
        let total: f64 = set.weighted().map(|(_, w)| w).sum();
        let expected_total = if chosen.is_empty() { 1.0 } else { 2.0 };
        assert!((total - expected_total).abs() < 1e-12, "total weight {total}");

        // And the loss is the weighted negative log-likelihood.
        let beta = 0.05;
        let f = random_unit(&mut rng, d);
        let s: Vec<f64> = rows.iter().map(|r| r.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = s.iter().map(|v| ((v - max) / beta).exp()).sum::<f64>().ln();
        let expected: f64 = (0..n).map(|j| -weight(j) * ((s[j] - max) / beta - log_z)).sum();
        let got = target_loss(&mem, &set, &f, beta).unwrap().value;
        assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}
