//! The six-row ablation: source-only, each invariance combination, and the
//! train-on-target upper bound, all from one seed.
//!
//! Run with `cargo run --release --example ablation_grid [epochs]`.

use meminv::data::{DomainSpec, Scenario};
use meminv::experiment::grid_table;
use meminv::trainer::{run_ablation_grid, TrainConfig};
use meminv::Result;

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epochs must be a number"));
    let sc = Scenario::build(&DomainSpec::default_source(), &DomainSpec::default_target(), 0.3, None)?;
    let base = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let rows = run_ablation_grid(&base, &sc.source, &sc.target_train, &sc.target_test)?;
    for row in &rows {
        let m = row.final_metrics().expect("at least one epoch");
        println!(
            "{:<16} {:<10} rank1 {:.3}  mAP {:.3}",
            row.name,
            row.config.toggles.label(),
            m.rank1,
            m.map
        );
    }
    print!("\n{}", grid_table(&rows));
    Ok(())
}
