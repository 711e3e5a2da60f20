//! The joint training schedule.
//!
//! Every iteration runs, in order:
//!
//! 1. a supervised step on a source batch (identity cross-entropy, updates
//!    embedder and classifier);
//! 2. an invariance step on a target batch: each sample is replaced by a
//!    uniform draw from itself and its camera-style counterparts, its
//!    reliable neighbors are chosen from the target memory, and the weighted
//!    memory loss updates the embedder;
//! 3. once GPP is active, a positive-prediction step on graphs built from
//!    the source memory around each source-batch anchor (updates the GPP
//!    network only);
//! 4. EMA updates of the memory slots of every sample in both batches.
//!
//! The target test split is evaluated at the end of every epoch.

use crate::data::Dataset;
use crate::embedder::{Embedder, IdentityClassifier};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, neighbor_counts, NeighborCounts, RetrievalMetrics};
use crate::gpp::{build_graph, gpp_labels, select_reliable, select_top, GppNetwork, GppStep};
use crate::losses::{source_ce_loss, target_loss, NeighborSet};
use crate::memory::{AlphaSchedule, ExemplarMemory};
use crate::numerics::Matrix;
use crate::params::{accumulate, Parameterized};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// How reliable neighbors are chosen on the target memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Top-`vns_k` nearest slots.
    Vns,
    /// Positive classifier on raw candidate features, thresholded at `mu`.
    VariantVns,
    /// Full GCN, but the top-`vns_k` candidates by positive probability.
    VariantGpp,
    /// Full GCN, candidates with positive probability `>= mu`.
    Gpp,
}

impl NeighborMode {
    pub fn uses_gpp(self) -> bool {
        !matches!(self, NeighborMode::Vns)
    }
}

/// What the run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Source supervision plus target invariance learning.
    Adapt,
    /// Source supervision only (lower bound).
    SourceOnly,
    /// Supervision on the labeled target training split (upper bound).
    TrainOnTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub ei: bool,
    pub ci: bool,
    pub ni: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        ei: true,
        ci: true,
        ni: true,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ei {
            parts.push("EI");
        }
        if self.ci {
            parts.push("CI");
        }
        if self.ni {
            parts.push("NI");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Softmax temperature of the memory losses.
    pub beta: f64,
    /// GPP candidate count; `None` means `min(100, N_t / 4)`.
    #[serde(with = "crate::config::auto")]
    pub k_candidates: Option<usize>,
    /// Positive-probability threshold for reliable neighbors.
    pub mu: f64,
    pub alpha_base: f64,
    /// Neighbor count for VNS and the top-k GPP variant.
    pub vns_k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub ni_start_epoch: usize,
    pub gpp_start_epoch: usize,
    pub toggles: Toggles,
    pub neighbor_mode: NeighborMode,
    pub objective: Objective,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub gpp_lr: f64,
    /// Epoch at which both learning rates drop by 10×; `None` means
    /// two thirds of `epochs`.
    #[serde(with = "crate::config::auto")]
    pub lr_decay_epoch: Option<usize>,
    pub gpp_layers: usize,
    /// Explicit GPP dimension chain `[d, …]` and classifier width.
    #[serde(with = "crate::config::auto")]
    pub gpp_dims: Option<Vec<usize>>,
    #[serde(with = "crate::config::auto")]
    pub gpp_hidden: Option<usize>,
    /// Drop same-camera same-identity gallery items at evaluation.
    pub cross_camera_eval: bool,
    /// Worker threads for per-sample work; results are reduced in index
    /// order so any value gives identical numbers.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            k_candidates: None,
            mu: 0.9,
            alpha_base: 0.01,
            vns_k: 8,
            batch_size: 32,
            epochs: 30,
            ni_start_epoch: 10,
            gpp_start_epoch: 5,
            toggles: Toggles::ALL,
            neighbor_mode: NeighborMode::Gpp,
            objective: Objective::Adapt,
            seed: 42,
            hidden_dim: 128,
            embed_dim: 64,
            lr: 0.05,
            gpp_lr: 0.5,
            lr_decay_epoch: None,
            gpp_layers: 4,
            gpp_dims: None,
            gpp_hidden: None,
            cross_camera_eval: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must be in [0, 1]");
        }
        if !(self.alpha_base >= 0.0) {
            return bad("alpha_base must be >= 0");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("batch_size, hidden_dim and embed_dim must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.gpp_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be >= 1");
        }
        if self.k_candidates == Some(0) || self.vns_k == 0 {
            return bad("neighbor counts must be >= 1");
        }
        if self.objective == Objective::Adapt {
            if self.toggles.ni && !(self.toggles.ei || self.toggles.ci) {
                return bad("NI requires EI or CI");
            }
            if self.toggles.ni
                && self.neighbor_mode.uses_gpp()
                && self.ni_start_epoch < self.gpp_start_epoch
            {
                return bad("ni_start_epoch must not precede gpp_start_epoch when neighbors come from GPP");
            }
        }
        if let Some(dims) = &self.gpp_dims {
            if dims.first() != Some(&self.embed_dim) {
                return bad("gpp_dims must start at embed_dim");
            }
        }
        Ok(())
    }

    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch
            .unwrap_or_else(|| (2 * self.epochs).div_ceil(3))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    pub fn gpp_lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.gpp_lr * 0.1
        } else {
            self.gpp_lr
        }
    }

    pub fn alpha(&self) -> AlphaSchedule {
        AlphaSchedule {
            base: self.alpha_base,
        }
    }

    fn target_branch(&self) -> bool {
        self.objective == Objective::Adapt && (self.toggles.ei || self.toggles.ci)
    }

    fn trains_gpp(&self) -> bool {
        self.target_branch() && self.toggles.ni && self.neighbor_mode.uses_gpp()
    }

    /// GPP dimension chain and classifier width for this config.
    pub fn gpp_shape(&self) -> (Vec<usize>, usize) {
        let (mut dims, mut hidden) = GppNetwork::default_dims(self.embed_dim, self.gpp_layers);
        if self.neighbor_mode == NeighborMode::VariantVns {
            dims.truncate(1);
        }
        if let Some(d) = &self.gpp_dims {
            dims = d.clone();
        }
        if let Some(h) = self.gpp_hidden {
            hidden = h;
        }
        (dims, hidden)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// One-based count of completed epochs.
    pub epoch: usize,
    pub l_src: f64,
    pub l_tgt: f64,
    pub l_gpp: f64,
    pub metrics: RetrievalMetrics,
    /// Micro-averaged over every neighbor set the loss used this epoch
    /// (precision 1 and recall 0 while neighborhood invariance is off).
    pub neighbor_precision: f64,
    pub neighbor_recall: f64,
    /// Total non-anchor neighbors selected this epoch.
    pub neighbors_selected: usize,
    pub seconds: f64,
}

impl EpochReport {
    /// Precision pooled over several epochs: selected neighbors weigh
    /// equally, so epochs that selected nothing do not count.
    pub fn pooled_precision(reports: &[EpochReport]) -> Option<f64> {
        let selected: usize = reports.iter().map(|r| r.neighbors_selected).sum();
        if selected == 0 {
            return None;
        }
        let hits: f64 = reports
            .iter()
            .map(|r| r.neighbor_precision * r.neighbors_selected as f64)
            .sum();
        Some(hits / selected as f64)
    }

    /// Equality on everything except wall-clock time.
    pub fn same_results(&self, other: &EpochReport) -> bool {
        EpochReport {
            seconds: 0.0,
            ..self.clone()
        } == EpochReport {
            seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub embedder: Embedder,
    pub classifier: IdentityClassifier,
    pub source_memory: ExemplarMemory,
    pub target_memory: ExemplarMemory,
    pub gpp: GppNetwork,
    pub reports: Vec<EpochReport>,
}

/// Callbacks for inspecting a run.
pub trait TrainObserver {
    /// The neighbor sets used for one target batch, in batch order.
    fn on_neighbor_sets(&mut self, _epoch: usize, _sets: &[NeighborSet]) {}
    /// Memory update rate applied during `epoch`.
    fn on_alpha(&mut self, _epoch: usize, _alpha: f64) {}
    fn on_epoch_end(&mut self, _state: &TrainState, _touched_target: &[usize], _touched_source: &[usize]) {}
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// The labeled set the supervised branch trains on, with identities mapped
/// to contiguous classes.
struct Labeled {
    inputs: Matrix,
    classes: Vec<usize>,
    identities: Vec<u32>,
    num_classes: usize,
}

impl Labeled {
    fn from_dataset(ds: &Dataset) -> Result<Self> {
        let real = ds.real_indices();
        if real.is_empty() {
            return Err(Error::Config("labeled set is empty".into()));
        }
        let mut map = BTreeMap::new();
        for &i in &real {
            let next = map.len();
            map.entry(ds.samples[i].identity).or_insert(next);
        }
        // contiguous classes in ascending identity order
        let ids: Vec<u32> = map.keys().copied().collect();
        let class_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        Ok(Self {
            inputs: ds.inputs(&real),
            classes: real.iter().map(|&i| class_of[&ds.samples[i].identity]).collect(),
            identities: real.iter().map(|&i| ds.samples[i].identity).collect(),
            num_classes: ids.len(),
        })
    }

    fn len(&self) -> usize {
        self.classes.len()
    }
}

/// Unlabeled target training set: real samples (one memory slot each) and
/// their counterparts' inputs.
struct TargetSet {
    inputs: Vec<Vec<f64>>,
    /// Row into `inputs` for each real sample followed by its counterparts.
    views: Vec<Vec<usize>>,
    identities: Vec<u32>,
}

impl TargetSet {
    fn from_dataset(ds: &Dataset) -> Result<Self> {
        let real = ds.real_indices();
        let mut slot_of = vec![usize::MAX; ds.len()];
        for (slot, &i) in real.iter().enumerate() {
            slot_of[i] = slot;
        }
        let inputs: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.x.clone()).collect();
        let mut views: Vec<Vec<usize>> = real.iter().map(|&i| vec![i]).collect();
        for (i, s) in ds.samples.iter().enumerate() {
            if let Some(o) = s.counterpart_of {
                let slot = *slot_of.get(o).filter(|&&s| s != usize::MAX).ok_or_else(|| {
                    Error::Format(format!("counterpart {i} points at non-real sample {o}"))
                })?;
                views[slot].push(i);
            }
        }
        Ok(Self {
            inputs,
            views,
            identities: real.iter().map(|&i| ds.samples[i].identity).collect(),
        })
    }

    fn len(&self) -> usize {
        self.views.len()
    }
}

struct TestSet {
    queries: Matrix,
    query_meta: Vec<(u32, u16)>,
    gallery: Matrix,
    gallery_meta: Vec<(u32, u16)>,
}

impl TestSet {
    fn from_dataset(ds: &Dataset) -> Self {
        let (q, g) = crate::data::query_gallery_split(&ds.samples);
        let meta = |idx: &[usize]| -> Vec<(u32, u16)> {
            idx.iter()
                .map(|&i| (ds.samples[i].identity, ds.samples[i].camera))
                .collect()
        };
        Self {
            queries: ds.inputs(&q),
            query_meta: meta(&q),
            gallery: ds.inputs(&g),
            gallery_meta: meta(&g),
        }
    }
}

/// Maps `f` over `items` on up to `threads` workers, keeping input order.
fn ordered_map<T, U, F>(threads: usize, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn check_finite(v: f64, term: &'static str, epoch: usize, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term,
            epoch,
            iteration,
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub struct Trainer<'a> {
    state: TrainState,
    labeled: Labeled,
    target: TargetSet,
    test: TestSet,
    observer: Box<dyn TrainObserver + 'a>,
}

struct EpochAccum {
    src: (f64, usize),
    tgt: (f64, usize),
    gpp: (f64, usize),
    neighbors: NeighborCounts,
}

impl EpochAccum {
    fn new() -> Self {
        Self {
            src: (0.0, 0),
            tgt: (0.0, 0),
            gpp: (0.0, 0),
            neighbors: NeighborCounts::default(),
        }
    }
}

fn mean((s, n): (f64, usize)) -> f64 {
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl<'a> Trainer<'a> {
    /// Fresh state for `config`. With [`Objective::TrainOnTarget`] the
    /// labeled branch trains on `target_train`'s identities instead of the
    /// source.
    pub fn new(
        config: TrainConfig,
        source: &Dataset,
        target_train: &Dataset,
        target_test: &Dataset,
    ) -> Result<Self> {
        config.validate()?;
        let labeled_ds = match config.objective {
            Objective::TrainOnTarget => target_train,
            _ => source,
        };
        let labeled = Labeled::from_dataset(labeled_ds)?;
        let target = TargetSet::from_dataset(target_train)?;
        check_disjoint(source, target_train)?;
        if target.len() == 0 {
            return Err(Error::Config("target training set is empty".into()));
        }
        if source.in_dim != target_train.in_dim || source.in_dim != target_test.in_dim {
            return Err(Error::Config("domains disagree on input dimension".into()));
        }
        let s = config.seed;
        let embedder = Embedder::new(source.in_dim, config.hidden_dim, config.embed_dim, s)?;
        let classifier = IdentityClassifier::new(config.embed_dim, labeled.num_classes, s ^ 0x5eed_0001)?;
        let (dims, hidden) = config.gpp_shape();
        let gpp = GppNetwork::new(&dims, hidden, s ^ 0x5eed_0002)?;
        let state = TrainState {
            source_memory: ExemplarMemory::new(labeled.len(), config.embed_dim)?,
            target_memory: ExemplarMemory::new(target.len(), config.embed_dim)?,
            config,
            epoch: 0,
            embedder,
            classifier,
            gpp,
            reports: Vec::new(),
        };
        Ok(Self {
            state,
            labeled,
            test: TestSet::from_dataset(target_test),
            target,
            observer: Box::new(NoObserver),
        })
    }

    /// Continues from a saved state over the same datasets.
    pub fn resume(
        state: TrainState,
        source: &Dataset,
        target_train: &Dataset,
        target_test: &Dataset,
    ) -> Result<Self> {
        let mut t = Self::new(state.config.clone(), source, target_train, target_test)?;
        if state.source_memory.len() != t.labeled.len() || state.target_memory.len() != t.target.len() {
            return Err(Error::Format("checkpoint memories do not match the datasets".into()));
        }
        t.state = state;
        Ok(t)
    }

    pub fn with_observer(mut self, observer: impl TrainObserver + 'a) -> Self {
        self.observer = Box::new(observer);
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    /// Candidate count for graphs on the target memory.
    pub fn k_candidates(&self) -> usize {
        let k = self
            .state
            .config
            .k_candidates
            .unwrap_or_else(|| 100.min(self.target.len() / 4));
        k.max(1)
    }

    /// Retrieval metrics of the current embedder on the target test split.
    pub fn evaluate(&self) -> Result<RetrievalMetrics> {
        let e = &self.state.embedder;
        let q = e.forward(&self.test.queries)?.features;
        let g = e.forward(&self.test.gallery)?.features;
        evaluate_retrieval(
            &q,
            &self.test.query_meta,
            &g,
            &self.test.gallery_meta,
            self.state.config.cross_camera_eval,
        )
    }

    /// Runs the remaining epochs and returns all reports so far.
    pub fn run(&mut self) -> Result<Vec<EpochReport>> {
        while self.state.epoch < self.state.config.epochs {
            self.run_epoch()?;
        }
        Ok(self.state.reports.clone())
    }

    /// Runs until `epoch` epochs are complete (or the configured total).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.state.epoch < epoch.min(self.state.config.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let cfg = self.state.config.clone();
        let alpha = cfg.alpha().alpha(epoch);
        self.observer.on_alpha(epoch, alpha);
        let mut rng = epoch_rng(cfg.seed, epoch);

        let mut src_order: Vec<usize> = (0..self.labeled.len()).collect();
        src_order.shuffle(&mut rng);
        let mut tgt_order: Vec<usize> = (0..self.target.len()).collect();
        tgt_order.shuffle(&mut rng);

        let target_branch = cfg.target_branch();
        let n_iter = if target_branch {
            self.labeled.len().max(self.target.len())
        } else {
            self.labeled.len()
        }
        .div_ceil(cfg.batch_size);

        let mut acc = EpochAccum::new();
        let mut touched_src = vec![false; self.labeled.len()];
        let mut touched_tgt = vec![false; self.target.len()];

        for it in 0..n_iter {
            let src_batch = cyclic_batch(&src_order, it, cfg.batch_size);
            let src_feats = self.source_step(&src_batch, epoch, it, &mut acc)?;

            let tgt_update = if target_branch {
                let tgt_batch = cyclic_batch(&tgt_order, it, cfg.batch_size);
                Some(self.target_step(&tgt_batch, epoch, it, &mut rng, &mut acc)?)
            } else {
                None
            };

            if cfg.trains_gpp() && epoch >= cfg.gpp_start_epoch {
                let l = self.gpp_step_with(&src_batch, &src_feats, epoch)?;
                acc.gpp.0 += check_finite(l, "L_gpp", epoch, it)?;
                acc.gpp.1 += 1;
            }

            for (r, &i) in src_batch.iter().enumerate() {
                self.state.source_memory.update_slot(i, src_feats.row(r), alpha)?;
                touched_src[i] = true;
            }
            if let Some((batch, feats)) = tgt_update {
                for (r, &i) in batch.iter().enumerate() {
                    self.state.target_memory.update_slot(i, feats.row(r), alpha)?;
                    touched_tgt[i] = true;
                }
            }
        }

        self.state.epoch += 1;
        let metrics = self.evaluate()?;
        let quality = acc.neighbors.quality();
        let report = EpochReport {
            epoch: self.state.epoch,
            l_src: mean(acc.src),
            l_tgt: mean(acc.tgt),
            l_gpp: mean(acc.gpp),
            metrics,
            neighbor_precision: quality.precision,
            neighbor_recall: quality.recall,
            neighbors_selected: acc.neighbors.selected,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.state.reports.push(report.clone());
        let ts: Vec<usize> = (0..touched_tgt.len()).filter(|&i| touched_tgt[i]).collect();
        let ss: Vec<usize> = (0..touched_src.len()).filter(|&i| touched_src[i]).collect();
        self.observer.on_epoch_end(&self.state, &ts, &ss);
        Ok(report)
    }

    /// Supervised step; returns the batch features computed before the
    /// update (used for the memory and GPP steps).
    fn source_step(
        &mut self,
        batch: &[usize],
        epoch: usize,
        it: usize,
        acc: &mut EpochAccum,
    ) -> Result<Matrix> {
        let x = rows_of(&self.labeled.inputs, batch);
        let cache = self.state.embedder.forward(&x)?;
        let logits = self.state.classifier.logits(&cache.features)?;
        let b = batch.len() as f64;
        let mut grad_logits = Matrix::zeros(logits.rows(), logits.cols());
        let mut total = 0.0;
        for (r, &i) in batch.iter().enumerate() {
            let l = source_ce_loss(logits.row(r), self.labeled.classes[i])?;
            total += l.value;
            for (g, v) in grad_logits.row_mut(r).iter_mut().zip(&l.grad) {
                *g = v / b;
            }
        }
        let l_src = check_finite(total / b, "L_src", epoch, it)?;
        acc.src.0 += l_src;
        acc.src.1 += 1;

        let (cls_grads, grad_f) = self.state.classifier.backward(&cache.features, &grad_logits)?;
        let emb_grads = self.state.embedder.backward(&cache, &grad_f)?;
        let lr = self.state.config.lr_at(epoch);
        self.state.classifier.sgd_update(&cls_grads, lr)?;
        self.state.embedder.sgd_update(&emb_grads, lr)?;
        Ok(cache.features)
    }

    /// Picks the reliable-neighbor set for target slot `i` with feature `f`.
    fn neighbors_for(
        state: &TrainState,
        k_candidates: usize,
        i: usize,
        f: &[f64],
        epoch: usize,
    ) -> Result<NeighborSet> {
        let cfg = &state.config;
        if !cfg.toggles.ni || epoch < cfg.ni_start_epoch {
            return Ok(NeighborSet::singleton(i));
        }
        let mem = &state.target_memory;
        let max_k = mem.len() - 1;
        match cfg.neighbor_mode {
            NeighborMode::Vns => Ok(NeighborSet::new(i, mem.topk(f, cfg.vns_k.min(max_k), Some(i))?)),
            mode => {
                let k = k_candidates.min(max_k);
                if k == 0 {
                    return Ok(NeighborSet::singleton(i));
                }
                let graph = build_graph(mem, Some(i), f, k)?;
                let scores = state.gpp.predict(&graph)?;
                Ok(match mode {
                    NeighborMode::VariantGpp => {
                        select_top(&scores, &graph.candidate_indices, cfg.vns_k, i)
                    }
                    _ => select_reliable(&scores, &graph.candidate_indices, cfg.mu, i),
                })
            }
        }
    }

    fn target_step(
        &mut self,
        batch: &[usize],
        epoch: usize,
        it: usize,
        rng: &mut ChaCha8Rng,
        acc: &mut EpochAccum,
    ) -> Result<(Vec<usize>, Matrix)> {
        let cfg = self.state.config.clone();
        let rows: Vec<usize> = batch
            .iter()
            .map(|&i| {
                let views = &self.target.views[i];
                let lo = if cfg.toggles.ei || views.len() == 1 { 0 } else { 1 };
                let hi = if cfg.toggles.ci { views.len() } else { 1 };
                views[rng.random_range(lo..hi)]
            })
            .collect();
        let mut x = Matrix::zeros(rows.len(), self.labeled.inputs.cols());
        for (r, &row) in rows.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&self.target.inputs[row]);
        }
        let cache = self.state.embedder.forward(&x)?;

        let positions: Vec<usize> = (0..batch.len()).collect();
        let state = &self.state;
        let k_candidates = self.k_candidates();
        let per_sample = ordered_map(cfg.threads, &positions, |&r| {
            let i = batch[r];
            let f = cache.features.row(r);
            let set = Self::neighbors_for(state, k_candidates, i, f, epoch)?;
            let loss = target_loss(&state.target_memory, &set, f, cfg.beta)?;
            Ok((set, loss))
        })?;

        let b = batch.len() as f64;
        let mut grad_f = Matrix::zeros(cache.features.rows(), cache.features.cols());
        let mut total = 0.0;
        let mut sets = Vec::with_capacity(per_sample.len());
        for (r, (set, loss)) in per_sample.into_iter().enumerate() {
            total += loss.value;
            for (g, v) in grad_f.row_mut(r).iter_mut().zip(&loss.grad) {
                *g = v / b;
            }
            if cfg.toggles.ni && epoch >= cfg.ni_start_epoch {
                acc.neighbors.add(neighbor_counts(&set, &self.target.identities));
            }
            sets.push(set);
        }
        self.observer.on_neighbor_sets(epoch, &sets);
        let l_tgt = check_finite(total / b, "L_tgt", epoch, it)?;
        acc.tgt.0 += l_tgt;
        acc.tgt.1 += 1;

        let grads = self.state.embedder.backward(&cache, &grad_f)?;
        self.state.embedder.sgd_update(&grads, cfg.lr_at(epoch))?;
        Ok((batch.to_vec(), cache.features))
    }

    /// One GPP update on graphs around the given source anchors, using their
    /// current embeddings. Touches only the GPP network.
    pub fn gpp_step(&mut self, anchors: &[usize]) -> Result<f64> {
        let x = rows_of(&self.labeled.inputs, anchors);
        let feats = self.state.embedder.forward(&x)?.features;
        let epoch = self.state.epoch;
        self.gpp_step_with(anchors, &feats, epoch)
    }

    fn gpp_step_with(&mut self, anchors: &[usize], feats: &Matrix, epoch: usize) -> Result<f64> {
        let mem = &self.state.source_memory;
        let k = self.k_candidates().min(mem.len() - 1);
        if k == 0 {
            return Ok(0.0);
        }
        let positions: Vec<usize> = (0..anchors.len()).collect();
        let net = &self.state.gpp;
        let identities = &self.labeled.identities;
        let steps: Vec<GppStep> = ordered_map(self.state.config.threads, &positions, |&r| {
            let i = anchors[r];
            let graph = build_graph(mem, Some(i), feats.row(r), k)?;
            let ids: Vec<u32> = graph.candidate_indices.iter().map(|&j| identities[j]).collect();
            net.train_step(&graph, &gpp_labels(&ids, identities[i]))
        })?;

        let mut grads = self.state.gpp.zero_grads();
        let mut total = 0.0;
        let n = steps.len() as f64;
        for step in &steps {
            total += step.loss;
            accumulate(&mut grads, &step.grads)?;
        }
        for g in &mut grads {
            g.scale_in_place(1.0 / n);
        }
        let lr = self.state.config.gpp_lr_at(epoch);
        self.state.gpp.sgd_update(&grads, lr)?;
        for step in &steps {
            self.state.gpp.update_running_stats(&step.classifier);
        }
        Ok(total / n)
    }
}

fn check_disjoint(source: &Dataset, target: &Dataset) -> Result<()> {
    let src: std::collections::HashSet<u32> = source.samples.iter().map(|s| s.identity).collect();
    if target.samples.iter().any(|s| src.contains(&s.identity)) {
        return Err(Error::Config(
            "source and target identity labels must be disjoint".into(),
        ));
    }
    Ok(())
}

fn cyclic_batch(order: &[usize], it: usize, size: usize) -> Vec<usize> {
    let n = order.len();
    let size = size.min(n);
    (0..size).map(|j| order[(it * size + j) % n]).collect()
}

fn rows_of(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    config: TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
) -> Result<TrainState> {
    let mut t = Trainer::new(config, source, target_train, target_test)?;
    t.run()?;
    Ok(t.into_state())
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
    pub reports: Vec<EpochReport>,
}

impl AblationRow {
    pub fn final_metrics(&self) -> Option<RetrievalMetrics> {
        self.reports.last().map(|r| r.metrics)
    }
}

/// Configurations of the ablation grid: source-only, the four invariance
/// combinations, and train-on-target, all sharing `base`'s seed and
/// schedule.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |objective, toggles| TrainConfig {
        objective,
        toggles,
        ..base.clone()
    };
    let t = |ei, ci, ni| Toggles { ei, ci, ni };
    vec![
        ("source_only".into(), with(Objective::SourceOnly, t(false, false, false))),
        ("ei".into(), with(Objective::Adapt, t(true, false, false))),
        ("ei_ci".into(), with(Objective::Adapt, t(true, true, false))),
        ("ei_ni".into(), with(Objective::Adapt, t(true, false, true))),
        ("ei_ci_ni".into(), with(Objective::Adapt, t(true, true, true))),
        ("train_on_target".into(), with(Objective::TrainOnTarget, t(false, false, false))),
    ]
}

pub fn run_ablation_grid(
    base: &TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(name, config)| {
            let state = train(config.clone(), source, target_train, target_test)?;
            Ok(AblationRow {
                name,
                config,
                reports: state.reports,
            })
        })
        .collect()
}
