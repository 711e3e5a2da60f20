//! CMC and mAP: first on hand-written relevance lists, then on the raw
//! inputs of a synthetic target test split.
//!
//! Run with `cargo run --example retrieval_eval`.

use meminv::data::{query_gallery_split, DomainSpec, Scenario};
use meminv::eval::{average_precision, cmc, evaluate_retrieval, mean_average_precision, RankedList};
use meminv::numerics::{l2_normalize, Matrix};
use meminv::Result;

fn main() -> Result<()> {
    // Three queries whose first match sits at positions 0, 1 and 5.
    let lists: Vec<RankedList> = [0, 1, 5]
        .iter()
        .enumerate()
        .map(|(q, &pos)| {
            let mut rel = vec![false; 10];
            rel[pos] = true;
            rel[9] = true;
            RankedList::from_relevance(q, rel)
        })
        .collect();
    let c = cmc(&lists, &[1, 5, 10]);
    println!("CMC at ranks {:?}: {:.3?}", c.ranks, c.accuracy);
    for l in &lists {
        println!("query {}: AP {:.4}", l.query, average_precision(&l.relevance));
    }
    let (map, excluded) = mean_average_precision(&lists);
    println!("mAP {map:.4} ({excluded} queries without matches)");

    // The same metrics on normalized raw inputs: the baseline any learned
    // embedding has to beat.
    let sc = Scenario::build(&DomainSpec::default_source(), &DomainSpec::default_target(), 0.3, None)?;
    let test = &sc.target_test.samples;
    let (q, g) = query_gallery_split(test);
    let feats = |idx: &[usize]| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| l2_normalize(&test[i].x)).collect();
        Matrix::from_rows(&rows)
    };
    let meta = |idx: &[usize]| -> Vec<(u32, u16)> { idx.iter().map(|&i| (test[i].identity, test[i].camera)).collect() };
    for cross_camera in [false, true] {
        let m = evaluate_retrieval(&feats(&q)?, &meta(&q), &feats(&g)?, &meta(&g), cross_camera)?;
        println!(
            "raw inputs (cross-camera {cross_camera}): rank1 {:.3} rank5 {:.3} mAP {:.3}",
            m.rank1, m.rank5, m.map
        );
    }
    Ok(())
}
