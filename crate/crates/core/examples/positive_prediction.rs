//! Training the graph-based positive predictor on a labeled memory and
//! comparing its neighbor choices with plain top-k selection.
//!
//! Features here are the normalized raw inputs of the source domain, so no
//! embedder is involved: the graph network learns which of an anchor's
//! nearest slots share its identity.
//!
//! Run with `cargo run --release --example positive_prediction`.

use meminv::data::{Domain, DomainSpec};
use meminv::eval::{neighbor_counts, NeighborCounts};
use meminv::gpp::{build_graph, gpp_labels, select_reliable, select_top, GppNetwork, PositiveScores};
use meminv::memory::ExemplarMemory;
use meminv::numerics::{l2_normalize, Matrix};
use meminv::params::Parameterized;
use meminv::Result;

fn main() -> Result<()> {
    let spec = DomainSpec {
        camera_strength: 0.0,
        ..DomainSpec::default_source()
    };
    let ds = Domain::generate(&spec)?.dataset();
    let rows: Vec<Vec<f64>> = ds.samples.iter().map(|s| l2_normalize(&s.x)).collect();
    let mem = ExemplarMemory::from_slots(Matrix::from_rows(&rows)?)?;
    let ids = ds.identities();

    // Train on the even samples, evaluate on the odd ones.
    let k = 30;
    let (dims, hidden) = GppNetwork::default_dims(mem.dim(), 4);
    let mut net = GppNetwork::new(&dims, hidden, 11)?;
    for epoch in 0..8 {
        let mut total = 0.0;
        let anchors: Vec<usize> = (0..mem.len()).step_by(2).collect();
        for &i in &anchors {
            let graph = build_graph(&mem, Some(i), mem.slot(i), k)?;
            let cand_ids: Vec<u32> = graph.candidate_indices.iter().map(|&j| ids[j]).collect();
            let step = net.train_step(&graph, &gpp_labels(&cand_ids, ids[i]))?;
            net.sgd_update(&step.grads, 0.1)?;
            net.update_running_stats(&step.classifier);
            total += step.loss;
        }
        println!("epoch {epoch}: mean BCE {:.4}", total / anchors.len() as f64);
    }

    // Inference normalizes with running batch-norm statistics, which pool
    // graphs around different anchors; thresholded probabilities are
    // therefore less sharp than the training loss suggests, while the
    // ranking within a graph is unaffected.
    let mut by_gpp = NeighborCounts::default();
    let mut by_gpp_rank = NeighborCounts::default();
    let mut by_cosine = NeighborCounts::default();
    for i in (1..mem.len()).step_by(2) {
        let graph = build_graph(&mem, Some(i), mem.slot(i), k)?;
        let scores = net.predict(&graph)?;
        let cands = &graph.candidate_indices;
        by_gpp.add(neighbor_counts(&select_reliable(&scores, cands, 0.9, i), &ids));
        by_gpp_rank.add(neighbor_counts(&select_top(&scores, cands, 8, i), &ids));
        // Candidates arrive sorted by similarity, so constant scores reduce
        // top-n selection to plain nearest neighbors.
        let constant = PositiveScores {
            probs: vec![0.0; cands.len()],
        };
        by_cosine.add(neighbor_counts(&select_top(&constant, cands, 8, i), &ids));
    }
    for (label, c) in [
        ("GPP, p >= 0.9", by_gpp),
        ("GPP, top-8", by_gpp_rank),
        ("cosine, top-8", by_cosine),
    ] {
        let q = c.quality();
        println!(
            "{label:<14} {:>5} neighbors  precision {:.3}  recall {:.3}",
            c.selected, q.precision, q.recall
        );
    }
    Ok(())
}
