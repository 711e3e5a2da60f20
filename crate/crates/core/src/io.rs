//! On-disk formats: binary datasets, training checkpoints, per-epoch metrics.
//!
//! Dataset files (`.imda`) are little-endian:
//!
//! ```text
//! magic    5 bytes  "IMDA1"
//! in_dim   u32
//! count    u32
//! cameras  u32
//! count × { x: in_dim × f64, identity: u32, camera: u16, counterpart_of: i32 (-1 = none) }
//! ```
//!
//! so a file's length is `17 + count·(8·in_dim + 10)`.
//!
//! Checkpoints are JSON documents holding every parameter, both memories,
//! the config, the completed-epoch counter and the reports so far. Floats are
//! written in shortest round-trip form, so loading restores the state
//! bit-for-bit and a resumed run continues exactly like an uninterrupted one.

use crate::data::{Dataset, Sample};
use crate::embedder::{Embedder, IdentityClassifier};
use crate::error::{Error, Result};
use crate::eval::RetrievalMetrics;
use crate::gpp::GppNetwork;
use crate::memory::ExemplarMemory;
use crate::numerics::Matrix;
use crate::params::Parameterized;
use crate::trainer::{EpochReport, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 5] = b"IMDA1";
const HEADER_LEN: usize = 5 + 4 * 3;

fn record_len(in_dim: usize) -> usize {
    8 * in_dim + 4 + 2 + 4
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * record_len(ds.in_dim));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&as_u32(ds.in_dim, "in_dim")?.to_le_bytes());
    out.extend_from_slice(&as_u32(ds.len(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&as_u32(ds.num_cameras, "camera count")?.to_le_bytes());
    for s in &ds.samples {
        for v in &s.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.identity.to_le_bytes());
        out.extend_from_slice(&s.camera.to_le_bytes());
        let link = match s.counterpart_of {
            None => -1,
            Some(i) => i32::try_from(i)
                .map_err(|_| Error::Format(format!("counterpart index {i} too large")))?,
        };
        out.extend_from_slice(&link.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN || &bytes[..5] != DATASET_MAGIC {
        return Err(Error::Format("not an IMDA1 dataset file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let in_dim = u32_at(5) as usize;
    let count = u32_at(9) as usize;
    let num_cameras = u32_at(13) as usize;
    let expected = HEADER_LEN + count * record_len(in_dim);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset file is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut o = HEADER_LEN;
    for _ in 0..count {
        let x = (0..in_dim)
            .map(|k| f64::from_le_bytes(bytes[o + 8 * k..o + 8 * k + 8].try_into().expect("8 bytes")))
            .collect();
        o += 8 * in_dim;
        let identity = u32_at(o);
        let camera = u16::from_le_bytes([bytes[o + 4], bytes[o + 5]]);
        let link = i32::from_le_bytes(bytes[o + 6..o + 10].try_into().expect("4 bytes"));
        o += 10;
        let counterpart_of = match link {
            -1 => None,
            i if i >= 0 => Some(i as usize),
            i => return Err(Error::Format(format!("invalid counterpart index {i}"))),
        };
        samples.push(Sample {
            x,
            identity,
            camera,
            counterpart_of,
        });
    }
    let ds = Dataset {
        in_dim,
        num_cameras,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "meminv-checkpoint/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: TrainConfig,
    epoch: usize,
    in_dim: usize,
    num_classes: usize,
    embedder: Vec<Matrix>,
    classifier: Vec<Matrix>,
    gpp: Vec<Matrix>,
    gpp_running_mean: Vec<f64>,
    gpp_running_var: Vec<f64>,
    source_memory: Matrix,
    target_memory: Matrix,
    reports: Vec<EpochReport>,
}

fn owned(params: Vec<&Matrix>) -> Vec<Matrix> {
    params.into_iter().cloned().collect()
}

pub fn encode_checkpoint(state: &TrainState) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: state.config.clone(),
        epoch: state.epoch,
        in_dim: state.embedder.in_dim(),
        num_classes: state.classifier.num_classes(),
        embedder: owned(state.embedder.params()),
        classifier: owned(state.classifier.params()),
        gpp: owned(state.gpp.params()),
        gpp_running_mean: state.gpp.running_mean.clone(),
        gpp_running_var: state.gpp.running_var.clone(),
        source_memory: state.source_memory.slots().clone(),
        target_memory: state.target_memory.slots().clone(),
        reports: state.reports.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_checkpoint(text: &str) -> Result<TrainState> {
    let f: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if f.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", f.format)));
    }
    let cfg = f.config;
    cfg.validate()?;
    let mut embedder = Embedder::new(f.in_dim, cfg.hidden_dim, cfg.embed_dim, cfg.seed)?;
    embedder.load_params(&f.embedder)?;
    let mut classifier = IdentityClassifier::new(cfg.embed_dim, f.num_classes, cfg.seed)?;
    classifier.load_params(&f.classifier)?;
    let (dims, hidden) = cfg.gpp_shape();
    let mut gpp = GppNetwork::new(&dims, hidden, cfg.seed)?;
    gpp.load_params(&f.gpp)?;
    if f.gpp_running_mean.len() != hidden || f.gpp_running_var.len() != hidden {
        return Err(Error::Format("GPP running statistics have the wrong length".into()));
    }
    gpp.running_mean = f.gpp_running_mean;
    gpp.running_var = f.gpp_running_var;
    Ok(TrainState {
        epoch: f.epoch,
        embedder,
        classifier,
        gpp,
        source_memory: ExemplarMemory::from_slots(f.source_memory)?,
        target_memory: ExemplarMemory::from_slots(f.target_memory)?,
        reports: f.reports,
        config: cfg,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, encode_checkpoint(state)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read_to_string(path)?)
}

pub const METRICS_HEADER: &str =
    "epoch,L_src,L_tgt,L_gpp,rank1,rank5,rank10,rank20,mAP,neigh_precision,neigh_recall";

/// One header line and one row per report. Floats use Rust's shortest
/// round-trip formatting, so equal reports give byte-identical files.
pub fn metrics_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        let m = r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.l_src,
            r.l_tgt,
            r.l_gpp,
            m.rank1,
            m.rank5,
            m.rank10,
            m.rank20,
            m.map,
            r.neighbor_precision,
            r.neighbor_recall
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_metrics_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    write_atomic(path, metrics_csv(reports).as_bytes())
}

/// End-of-run summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub final_metrics: Option<RetrievalMetrics>,
    pub best_map: Option<f64>,
    pub best_map_epoch: Option<usize>,
    pub config: TrainConfig,
}

impl Summary {
    pub fn from_reports(config: &TrainConfig, reports: &[EpochReport]) -> Self {
        let best = reports
            .iter()
            .max_by(|a, b| a.metrics.map.total_cmp(&b.metrics.map).then(b.epoch.cmp(&a.epoch)));
        Self {
            epochs: reports.len(),
            final_metrics: reports.last().map(|r| r.metrics),
            best_map: best.map(|r| r.metrics.map),
            best_map_epoch: best.map(|r| r.epoch),
            config: config.clone(),
        }
    }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}
