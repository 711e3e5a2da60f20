//! Reliable-neighbor selection inside training: plain top-k (VNS) against
//! the graph-based positive predictor, with matched seeds.
//!
//! Run with `cargo run --release --example neighbor_selection [epochs]`.

use meminv::data::{DomainSpec, Scenario};
use meminv::trainer::{train, EpochReport, NeighborMode, TrainConfig};
use meminv::Result;

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epochs must be a number"));
    let sc = Scenario::build(&DomainSpec::default_source(), &DomainSpec::default_target(), 0.3, None)?;
    for mode in [NeighborMode::Vns, NeighborMode::VariantVns, NeighborMode::VariantGpp, NeighborMode::Gpp] {
        let config = TrainConfig {
            epochs,
            neighbor_mode: mode,
            ..TrainConfig::default()
        };
        let start = config.ni_start_epoch;
        let state = train(config, &sc.source, &sc.target_train, &sc.target_test)?;
        let ni_epochs = &state.reports[start.min(state.reports.len())..];
        let last = state.reports.last().expect("at least one epoch");
        let precision = EpochReport::pooled_precision(ni_epochs)
            .map_or("n/a".to_string(), |p| format!("{p:.3}"));
        println!(
            "{:<12} final mAP {:.3}  neighbors/epoch {:>6}  pooled precision {precision}",
            format!("{mode:?}"),
            last.metrics.map,
            ni_epochs.iter().map(|r| r.neighbors_selected).sum::<usize>() / ni_epochs.len().max(1),
        );
    }
    Ok(())
}
