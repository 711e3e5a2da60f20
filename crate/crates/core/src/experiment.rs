//! Experiment orchestration behind the command-line tool: generating the
//! datasets of a config, training with checkpoints and metric files, and the
//! ablation grid.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! source.imda  target_train.imda  target_test.imda
//! metrics.csv  summary.json
//! checkpoints/epoch_0005.json …
//! grid/<row>.csv  grid/summary.csv
//! ```

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Scenario};
use crate::error::{Error, Result};
use crate::io;
use crate::trainer::{ablation_configs, AblationRow, TrainConfig, TrainState, Trainer};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SOURCE_FILE: &str = "source.imda";
pub const TARGET_TRAIN_FILE: &str = "target_train.imda";
pub const TARGET_TEST_FILE: &str = "target_test.imda";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.json"))
}

/// Ground-truth facts about a generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub source_samples: usize,
    pub source_identities: usize,
    pub target_train_real: usize,
    pub target_train_counterparts: usize,
    pub target_train_identities: usize,
    pub target_test_samples: usize,
    pub target_test_identities: usize,
    pub cameras: usize,
    /// Identities present in both the source and the target training set.
    pub shared_identities: usize,
}

impl ScenarioSummary {
    pub fn of(sc: &Scenario) -> Self {
        let ids = |ds: &Dataset| ds.identities().into_iter().collect::<BTreeSet<u32>>();
        let src = ids(&sc.source);
        let train = ids(&sc.target_train);
        let real = sc.target_train.real_indices().len();
        Self {
            source_samples: sc.source.len(),
            source_identities: src.len(),
            target_train_real: real,
            target_train_counterparts: sc.target_train.len() - real,
            target_train_identities: train.len(),
            target_test_samples: sc.target_test.len(),
            target_test_identities: ids(&sc.target_test).len(),
            cameras: sc.target_train.num_cameras,
            shared_identities: src.intersection(&train).count(),
        }
    }
}

impl std::fmt::Display for ScenarioSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "source:        {} samples, {} identities",
            self.source_samples, self.source_identities
        )?;
        writeln!(
            f,
            "target train:  {} real + {} counterparts, {} identities, {} cameras",
            self.target_train_real, self.target_train_counterparts, self.target_train_identities, self.cameras
        )?;
        writeln!(
            f,
            "target test:   {} samples, {} identities",
            self.target_test_samples, self.target_test_identities
        )?;
        write!(f, "identities shared by source and target train: {}", self.shared_identities)
    }
}

pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    cfg.validate()?;
    Scenario::build(&cfg.source, &cfg.target, cfg.test_fraction, cfg.counterparts)
}

/// Generates the config's datasets and writes the three `.imda` files.
pub fn generate(cfg: &ExperimentConfig) -> Result<Scenario> {
    let sc = build_scenario(cfg)?;
    let dir = &cfg.output_dir;
    io::save_dataset(&dir.join(SOURCE_FILE), &sc.source)?;
    io::save_dataset(&dir.join(TARGET_TRAIN_FILE), &sc.target_train)?;
    io::save_dataset(&dir.join(TARGET_TEST_FILE), &sc.target_test)?;
    Ok(sc)
}

/// Loads the three dataset files from `dir`.
pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let load = |name: &str| {
        let path = dir.join(name);
        io::load_dataset(&path).map_err(|e| match e {
            Error::Io(err) => Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display()))),
            other => other,
        })
    };
    Ok(Scenario {
        source: load(SOURCE_FILE)?,
        target_train: load(TARGET_TRAIN_FILE)?,
        target_test: load(TARGET_TEST_FILE)?,
    })
}

/// A checkpoint can continue under `wanted` if only the epoch budget or the
/// thread count differ. (With `lr_decay_epoch = "auto"` a new budget also
/// moves the decay epoch.)
fn check_resumable(saved: &TrainConfig, wanted: &TrainConfig) -> Result<()> {
    let normalized = TrainConfig {
        epochs: wanted.epochs,
        threads: wanted.threads,
        ..saved.clone()
    };
    if &normalized != wanted {
        return Err(Error::Config(
            "checkpoint was trained with a different [train] section (only epochs and threads may change)"
                .into(),
        ));
    }
    Ok(())
}

/// Trains `cfg.train` on `sc`, writing checkpoints every
/// `cfg.checkpoint_every` epochs (and after the last one), `metrics.csv`
/// after every epoch and `summary.json` at the end. With `resume` the run
/// continues from that state.
pub fn train(cfg: &ExperimentConfig, sc: &Scenario, resume: Option<TrainState>) -> Result<TrainState> {
    let dir = &cfg.output_dir;
    let mut trainer = match resume {
        Some(mut state) => {
            check_resumable(&state.config, &cfg.train)?;
            state.config = cfg.train.clone();
            Trainer::resume(state, &sc.source, &sc.target_train, &sc.target_test)?
        }
        None => Trainer::new(cfg.train.clone(), &sc.source, &sc.target_train, &sc.target_test)?,
    };
    let total = cfg.train.epochs;
    while trainer.state().epoch < total {
        trainer.run_epoch()?;
        let state = trainer.state();
        io::write_metrics_csv(&dir.join(METRICS_FILE), &state.reports)?;
        let every = cfg.checkpoint_every;
        if state.epoch == total || (every > 0 && state.epoch % every == 0) {
            io::save_checkpoint(&checkpoint_path(dir, state.epoch), state)?;
        }
    }
    let state = trainer.into_state();
    io::write_metrics_csv(&dir.join(METRICS_FILE), &state.reports)?;
    io::write_summary(
        &dir.join(SUMMARY_FILE),
        &io::Summary::from_reports(&state.config, &state.reports),
    )?;
    Ok(state)
}

/// Runs every ablation row and writes `grid/<row>.csv` plus a
/// `grid/summary.csv` with each row's final metrics.
pub fn grid(cfg: &ExperimentConfig, sc: &Scenario) -> Result<Vec<AblationRow>> {
    let dir = cfg.output_dir.join("grid");
    let mut rows = Vec::new();
    for (name, config) in ablation_configs(&cfg.train) {
        let mut trainer = Trainer::new(config.clone(), &sc.source, &sc.target_train, &sc.target_test)?;
        let reports = trainer.run()?;
        io::write_metrics_csv(&dir.join(format!("{name}.csv")), &reports)?;
        rows.push(AblationRow { name, config, reports });
    }
    io::write_atomic(&dir.join("summary.csv"), grid_table(&rows).as_bytes())?;
    Ok(rows)
}

/// Final-epoch metrics of each ablation row as CSV.
pub fn grid_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,rank1,rank5,rank10,rank20,mAP\n");
    for row in rows {
        if let Some(m) = row.final_metrics() {
            writeln!(out, "{},{},{},{},{},{}", row.name, m.rank1, m.rank5, m.rank10, m.rank20, m.map)
                .expect("writing to a String");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resumable_only_differs_in_budget() {
        let a = TrainConfig::default();
        check_resumable(&a, &TrainConfig { epochs: 50, threads: 4, ..a.clone() }).unwrap();
        let err = check_resumable(&a, &TrainConfig { lr: 0.1, ..a.clone() }).unwrap_err();
        assert!(err.to_string().contains("different [train]"), "{err}");
    }
}
