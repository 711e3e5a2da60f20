//! The exemplar memory and the three target losses on a hand-sized example.
//!
//! Run with `cargo run --example exemplar_memory`.

use meminv::losses::{ei_ci_loss, target_loss, NeighborSet};
use meminv::memory::{AlphaSchedule, ExemplarMemory};
use meminv::numerics::l2_normalize;
use meminv::Result;

fn main() -> Result<()> {
    // Four slots in 3-D; slots start at zero ("cold") and are filled by the
    // first update of each epoch-0 visit, where alpha = 0.
    let mut mem = ExemplarMemory::new(4, 3)?;
    let schedule = AlphaSchedule::default();
    let features = [
        l2_normalize(&[1.0, 0.1, 0.0]),
        l2_normalize(&[0.9, 0.3, 0.0]),
        l2_normalize(&[0.0, 1.0, 0.2]),
        l2_normalize(&[0.0, 0.1, 1.0]),
    ];
    for (i, f) in features.iter().enumerate() {
        mem.update_slot(i, f, schedule.alpha(0))?;
    }

    // Later epochs blend the old slot with the new feature, then
    // renormalize: slot ← normalize(α·slot + (1−α)·f).
    let alpha = schedule.alpha(50);
    mem.update_slot(0, &l2_normalize(&[1.0, 0.0, 0.0]), alpha)?;
    println!("alpha at epoch 50 = {alpha}");
    println!("slot 0 after update = {:?}", mem.slot(0));

    // Probabilities that a feature "is" each stored sample, at the default
    // temperature.
    let beta = 0.05;
    let probs = mem.probabilities(&features[0], beta)?;
    println!("p(j | f_0) = {probs:.4?}  (sum {:.12})", probs.iter().sum::<f64>());
    println!("nearest slots to f_0 = {:?}", mem.topk(&features[0], 2, Some(0))?);

    // Exemplar invariance: the real sample against its own slot. Camera
    // invariance uses the same loss with a counterpart's embedding.
    let counterpart = l2_normalize(&[0.8, 0.1, 0.3]);
    let ei = ei_ci_loss(&mem, 0, &features[0], beta)?;
    let ci = ei_ci_loss(&mem, 0, &counterpart, beta)?;
    println!("L_ei = {:.4}, L_ci = {:.4}", ei.value, ci.value);

    // Neighborhood invariance: sample 0 plus its reliable neighbor 1. The
    // anchor weighs 1, each neighbor 1/(number of neighbors).
    let set = NeighborSet::new(0, [1]);
    for (j, w) in set.weighted() {
        println!("member {j}: weight {w}");
    }
    let ni = target_loss(&mem, &set, &features[0], beta)?;
    println!("L_ni = {:.4}, |grad| = {:.4}", ni.value, meminv::numerics::norm(&ni.grad));
    Ok(())
}
