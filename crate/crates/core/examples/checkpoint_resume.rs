//! Writing a config and datasets, training with checkpoints, and resuming
//! from the middle: the resumed run reproduces the uninterrupted one.
//!
//! Run with `cargo run --release --example checkpoint_resume`.

use meminv::config::ExperimentConfig;
use meminv::experiment::{self, checkpoint_path, METRICS_FILE};
use meminv::io::load_checkpoint;
use meminv::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("meminv-resume-{}", std::process::id()));
    let mut cfg = ExperimentConfig {
        output_dir: dir.join("full"),
        checkpoint_every: 3,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 6;
    cfg.train.ni_start_epoch = 4;
    cfg.train.gpp_start_epoch = 2;

    // The config file lists every setting; derived ones read "auto".
    let text = cfg.dump()?;
    assert_eq!(ExperimentConfig::parse(&text)?, cfg);
    println!("config: {} lines, round trip exact", text.lines().count());

    let sc = experiment::generate(&cfg)?;
    experiment::train(&cfg, &sc, None)?;

    // A second run starting from the epoch-3 checkpoint, in its own
    // directory.
    let resumed_cfg = ExperimentConfig {
        output_dir: dir.join("resumed"),
        ..cfg.clone()
    };
    let state = load_checkpoint(&checkpoint_path(&cfg.output_dir, 3))?;
    println!("checkpoint holds {} completed epochs", state.epoch);
    experiment::train(&resumed_cfg, &sc, Some(state))?;

    let full = std::fs::read(cfg.output_dir.join(METRICS_FILE))?;
    let resumed = std::fs::read(resumed_cfg.output_dir.join(METRICS_FILE))?;
    print!("{}", String::from_utf8_lossy(&full));
    println!("resumed metrics.csv identical: {}", full == resumed);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
