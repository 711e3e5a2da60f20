//! Adapting an embedder from the labeled source domain to the unlabeled
//! target domain, against the source-only baseline.
//!
//! Run with `cargo run --release --example adaptation [epochs]`.

use meminv::data::{DomainSpec, Scenario};
use meminv::trainer::{train, Objective, TrainConfig, Toggles};
use meminv::Result;

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epochs must be a number"));
    let sc = Scenario::build(&DomainSpec::default_source(), &DomainSpec::default_target(), 0.3, None)?;
    let adapt = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let source_only = TrainConfig {
        objective: Objective::SourceOnly,
        toggles: Toggles { ei: false, ci: false, ni: false },
        ..adapt.clone()
    };

    let baseline = train(source_only, &sc.source, &sc.target_train, &sc.target_test)?;
    let adapted = train(adapt, &sc.source, &sc.target_train, &sc.target_test)?;

    println!("epoch  source-only mAP  adapted mAP  L_tgt   neighbors  precision");
    for (b, a) in baseline.reports.iter().zip(&adapted.reports) {
        println!(
            "{:>5}  {:>15.4}  {:>11.4}  {:>6.3}  {:>9}  {:>9.3}",
            a.epoch, b.metrics.map, a.metrics.map, a.l_tgt, a.neighbors_selected, a.neighbor_precision
        );
    }
    if let (Some(b), Some(a)) = (baseline.reports.last(), adapted.reports.last()) {
        println!(
            "final rank-1: source-only {:.3}, adapted {:.3}",
            b.metrics.rank1, a.metrics.rank1
        );
    }
    Ok(())
}
