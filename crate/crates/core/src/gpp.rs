//! Graph-based positive prediction.
//!
//! For an anchor feature `f`, the `k` nearest memory slots (anchor excluded)
//! form a complete graph. Node features are `slot − f`, edge weights are the
//! row-softmax of their inner products, and a stack of graph convolutions
//!
//! ```text
//! H(l+1) = ReLU([A·H(l) ‖ H(l)] · W(l))
//! ```
//!
//! refines them before a small per-node classifier
//! (FC → batch-norm → PReLU → FC → softmax) scores each candidate as a
//! positive of the anchor. The network is trained with binary cross-entropy on
//! the labeled source memory and used to pick reliable neighbors on the target
//! memory. Backpropagation stops at the graph: nothing flows back into the
//! memory or into the anchor feature.

use crate::embedder::{add_bias, column_sums};
use crate::error::{Error, Result};
use crate::losses::NeighborSet;
use crate::memory::ExemplarMemory;
use crate::numerics::{concat_cols, relu, softmax_temp, Matrix};
use crate::params::{uniform_init, Parameterized};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const PRELU_INIT: f64 = 0.25;

/// Complete graph over the top-`k` candidates of one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGraph {
    pub anchor_feature: Vec<f64>,
    pub candidate_indices: Vec<usize>,
    /// `k × d`, row `j` is `slot(V_j) − anchor_feature`.
    pub node_features: Matrix,
    /// `k × k`, row-stochastic.
    pub adjacency: Matrix,
}

/// Selects the `k` nearest slots to `anchor_f` (excluding `anchor_index`)
/// and builds their graph.
pub fn build_graph(
    mem: &ExemplarMemory,
    anchor_index: Option<usize>,
    anchor_f: &[f64],
    k: usize,
) -> Result<CandidateGraph> {
    if k == 0 {
        return Err(Error::param("candidate graph needs k >= 1"));
    }
    let candidates = mem.topk(anchor_f, k, anchor_index)?;
    graph_from_candidates(mem, anchor_f, candidates)
}

/// Builds the graph over an explicit candidate list.
pub fn graph_from_candidates(
    mem: &ExemplarMemory,
    anchor_f: &[f64],
    candidates: Vec<usize>,
) -> Result<CandidateGraph> {
    let d = mem.dim();
    if anchor_f.len() != d {
        return Err(Error::shape("anchor feature dimension"));
    }
    let k = candidates.len();
    let mut h = Matrix::zeros(k, d);
    for (r, &j) in candidates.iter().enumerate() {
        if j >= mem.len() {
            return Err(Error::Index {
                index: j,
                len: mem.len(),
            });
        }
        for ((out, s), a) in h.row_mut(r).iter_mut().zip(mem.slot(j)).zip(anchor_f) {
            *out = s - a;
        }
    }
    let raw = h.matmul_t(&h)?;
    let mut adjacency = Matrix::zeros(k, k);
    for r in 0..k {
        adjacency
            .row_mut(r)
            .copy_from_slice(&softmax_temp(raw.row(r), 1.0)?);
    }
    Ok(CandidateGraph {
        anchor_feature: anchor_f.to_vec(),
        candidate_indices: candidates,
        node_features: h,
        adjacency,
    })
}

/// Graph convolution stack plus positive classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GppNetwork {
    /// `W(l)`, shaped `2·d_in × d_out`.
    pub gcn_weights: Vec<Matrix>,
    /// No bias: batch-norm's shift absorbs it.
    pub fc1_w: Matrix,
    pub bn_gamma: Matrix,
    pub bn_beta: Matrix,
    /// Single PReLU slope, stored `1 × 1`.
    pub prelu: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl GppNetwork {
    /// `dims` is the feature-dimension chain `[d, d_1, …, d_L]`; a chain of
    /// length one means no graph convolution at all. `hidden` is the width of
    /// the classifier's first FC layer.
    pub fn new(dims: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || hidden == 0 {
            return Err(Error::param("GPP dimensions must be non-empty and positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcn_weights = dims
            .windows(2)
            .map(|w| uniform_init(&mut rng, 2 * w[0], w[1], 2 * w[0]))
            .collect();
        let z_dim = *dims.last().expect("non-empty");
        Ok(Self {
            gcn_weights,
            fc1_w: uniform_init(&mut rng, z_dim, hidden, z_dim),
            bn_gamma: Matrix::from_vec(1, hidden, vec![1.0; hidden])?,
            bn_beta: Matrix::zeros(1, hidden),
            prelu: Matrix::from_vec(1, 1, vec![PRELU_INIT])?,
            fc2_w: uniform_init(&mut rng, hidden, 2, hidden),
            fc2_b: Matrix::zeros(1, 2),
            running_mean: vec![0.0; hidden],
            running_var: vec![1.0; hidden],
        })
    }

    /// Default chain for feature dimension `d`: `d → d → d/2 → d/4 → d/4`
    /// with a `d/4`-wide classifier. Extra layers repeat the last width.
    pub fn default_dims(d: usize, layers: usize) -> (Vec<usize>, usize) {
        let full = [d, d, (d / 2).max(1), (d / 4).max(1), (d / 4).max(1)];
        let mut dims: Vec<usize> = full.iter().take(layers.min(4) + 1).copied().collect();
        while dims.len() < layers + 1 {
            dims.push(*dims.last().expect("non-empty"));
        }
        (dims, (d / 4).max(1))
    }

    pub fn num_layers(&self) -> usize {
        self.gcn_weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.gcn_weights
            .first()
            .map_or(self.fc1_w.rows(), |w| w.rows() / 2)
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1_w.cols()
    }

    /// Folds one graph's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &ClassifierCache) {
        if let Some(stats) = &cache.batch_stats {
            for c in 0..self.running_mean.len() {
                self.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
                self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c]
                    + BN_MOMENTUM * stats.unbiased_var[c];
            }
        }
    }

    /// Parameter gradients given `dL/dlogits` (`k × 2`). Only GCN and
    /// classifier parameters receive gradient; the graph is a constant.
    pub fn backward(
        &self,
        graph: &CandidateGraph,
        gcn: &GcnCache,
        cls: &ClassifierCache,
        grad_logits: &Matrix,
    ) -> Result<Vec<Matrix>> {
        let (cls_grads, grad_z) = self.classifier_backward(cls, grad_logits)?;
        let mut gcn_grads = Vec::with_capacity(self.num_layers());
        let mut grad_h = grad_z;
        for (l, layer) in gcn.layers.iter().enumerate().rev() {
            let w = &self.gcn_weights[l];
            let mut grad_pre = grad_h;
            for (g, &p) in grad_pre
                .as_mut_slice()
                .iter_mut()
                .zip(layer.pre_activation.as_slice())
            {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            gcn_grads.push(layer.concat.t_matmul(&grad_pre)?);
            if l == 0 {
                break;
            }
            let grad_concat = grad_pre.matmul_t(w)?;
            let (grad_agg, mut grad_direct) = grad_concat.split_cols(w.rows() / 2)?;
            grad_direct.add_scaled(&graph.adjacency.t_matmul(&grad_agg)?, 1.0)?;
            grad_h = grad_direct;
        }
        gcn_grads.reverse();
        gcn_grads.extend(cls_grads);
        Ok(gcn_grads)
    }

    fn classifier_backward(
        &self,
        cache: &ClassifierCache,
        grad_logits: &Matrix,
    ) -> Result<(Vec<Matrix>, Matrix)> {
        let k = cache.z.rows();
        let h = self.hidden_dim();
        let g_fc2w = cache.activated.t_matmul(grad_logits)?;
        let g_fc2b = column_sums(grad_logits);
        let grad_act = grad_logits.matmul_t(&self.fc2_w)?;

        let slope = self.prelu.get(0, 0);
        let mut g_slope = 0.0;
        let mut grad_bn = grad_act.clone();
        for (g, &y) in grad_bn
            .as_mut_slice()
            .iter_mut()
            .zip(cache.bn_out.as_slice())
        {
            if y <= 0.0 {
                g_slope += *g * y;
                *g *= slope;
            }
        }

        let mut g_gamma = Matrix::zeros(1, h);
        let g_beta = column_sums(&grad_bn);
        for r in 0..k {
            for c in 0..h {
                let v = g_gamma.get(0, c) + grad_bn.get(r, c) * cache.normalized.get(r, c);
                g_gamma.set(0, c, v);
            }
        }

        let mut grad_fc1 = Matrix::zeros(k, h);
        for c in 0..h {
            let gamma = self.bn_gamma.get(0, c);
            let inv_std = cache.inv_std[c];
            if cache.batch_stats.is_some() {
                let mut sum_dx = 0.0;
                let mut sum_dx_xhat = 0.0;
                for r in 0..k {
                    let dx = grad_bn.get(r, c) * gamma;
                    sum_dx += dx;
                    sum_dx_xhat += dx * cache.normalized.get(r, c);
                }
                let kf = k as f64;
                for r in 0..k {
                    let dx = grad_bn.get(r, c) * gamma;
                    let xhat = cache.normalized.get(r, c);
                    grad_fc1.set(r, c, inv_std / kf * (kf * dx - sum_dx - xhat * sum_dx_xhat));
                }
            } else {
                for r in 0..k {
                    grad_fc1.set(r, c, grad_bn.get(r, c) * gamma * inv_std);
                }
            }
        }

        let g_fc1w = cache.z.t_matmul(&grad_fc1)?;
        let grad_z = grad_fc1.matmul_t(&self.fc1_w)?;
        let g_prelu = Matrix::from_vec(1, 1, vec![g_slope])?;
        Ok((
            vec![g_fc1w, g_gamma, g_beta, g_prelu, g_fc2w, g_fc2b],
            grad_z,
        ))
    }
}

impl Parameterized for GppNetwork {
    fn params(&self) -> Vec<&Matrix> {
        let mut p: Vec<&Matrix> = self.gcn_weights.iter().collect();
        p.extend([
            &self.fc1_w,
            &self.bn_gamma,
            &self.bn_beta,
            &self.prelu,
            &self.fc2_w,
            &self.fc2_b,
        ]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p: Vec<&mut Matrix> = self.gcn_weights.iter_mut().collect();
        p.extend([
            &mut self.fc1_w,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.prelu,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]);
        p
    }
}

#[derive(Debug, Clone)]
pub struct GcnLayerCache {
    concat: Matrix,
    pre_activation: Matrix,
}

/// Per-layer activations of [`gcn_forward`]; `z` is the final node matrix.
#[derive(Debug, Clone)]
pub struct GcnCache {
    layers: Vec<GcnLayerCache>,
    pub z: Matrix,
}

/// Runs the graph convolutions over `graph`.
pub fn gcn_forward(graph: &CandidateGraph, net: &GppNetwork) -> Result<GcnCache> {
    if graph.node_features.cols() != net.input_dim() {
        return Err(Error::shape(format!(
            "node features of dim {} for network expecting {}",
            graph.node_features.cols(),
            net.input_dim()
        )));
    }
    let mut h = graph.node_features.clone();
    let mut layers = Vec::with_capacity(net.num_layers());
    for w in &net.gcn_weights {
        let aggregated = graph.adjacency.matmul(&h)?;
        let concat = concat_cols(&aggregated, &h)?;
        let pre_activation = concat.matmul(w)?;
        h = relu(&pre_activation);
        layers.push(GcnLayerCache {
            concat,
            pre_activation,
        });
    }
    Ok(GcnCache { layers, z: h })
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// Intermediate values of [`classify_positive`].
#[derive(Debug, Clone)]
pub struct ClassifierCache {
    z: Matrix,
    normalized: Matrix,
    inv_std: Vec<f64>,
    bn_out: Matrix,
    activated: Matrix,
    pub logits: Matrix,
    /// Present when batch statistics were used.
    pub batch_stats: Option<BatchStats>,
}

/// Probability that each candidate is a positive of the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveScores {
    pub probs: Vec<f64>,
}

/// Per-node FC → batch-norm → PReLU → FC → 2-way softmax; returns the
/// positive-class probability. Training mode normalizes with the statistics
/// of these `k` nodes, except when `k = 1`, which falls back to the running
/// statistics.
pub fn classify_positive(
    z: &Matrix,
    net: &GppNetwork,
    training: bool,
) -> Result<(PositiveScores, ClassifierCache)> {
    if z.cols() != net.fc1_w.rows() {
        return Err(Error::shape(format!(
            "node dim {} for classifier expecting {}",
            z.cols(),
            net.fc1_w.rows()
        )));
    }
    let k = z.rows();
    let h = net.hidden_dim();
    let fc1 = z.matmul(&net.fc1_w)?;

    let (mean, var, batch_stats) = if training && k > 1 {
        let mut mean = vec![0.0; h];
        for row in fc1.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        let mut var = vec![0.0; h];
        for row in fc1.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased_var = var.iter().map(|s| s / (k - 1) as f64).collect();
        var.iter_mut().for_each(|s| *s /= k as f64);
        let stats = BatchStats {
            mean: mean.clone(),
            unbiased_var,
        };
        (mean, var, Some(stats))
    } else {
        (net.running_mean.clone(), net.running_var.clone(), None)
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = Matrix::zeros(k, h);
    let mut bn_out = Matrix::zeros(k, h);
    let slope = net.prelu.get(0, 0);
    let mut activated = Matrix::zeros(k, h);
    for r in 0..k {
        for c in 0..h {
            let xhat = (fc1.get(r, c) - mean[c]) * inv_std[c];
            let y = net.bn_gamma.get(0, c) * xhat + net.bn_beta.get(0, c);
            normalized.set(r, c, xhat);
            bn_out.set(r, c, y);
            activated.set(r, c, if y > 0.0 { y } else { slope * y });
        }
    }
    let mut logits = activated.matmul(&net.fc2_w)?;
    add_bias(&mut logits, &net.fc2_b);
    let probs = logits
        .row_iter()
        .map(|o| 1.0 / (1.0 + (o[0] - o[1]).exp()))
        .collect();
    Ok((
        PositiveScores { probs },
        ClassifierCache {
            z: z.clone(),
            normalized,
            inv_std,
            bn_out,
            activated,
            logits,
            batch_stats,
        },
    ))
}

/// `1` where the candidate shares the anchor's identity.
pub fn gpp_labels(candidate_ids: &[u32], anchor_id: u32) -> Vec<bool> {
    candidate_ids.iter().map(|&id| id == anchor_id).collect()
}

/// Mean binary cross-entropy and its gradient with respect to the
/// classifier logits.
#[derive(Debug, Clone)]
pub struct GppLoss {
    pub value: f64,
    pub grad_logits: Matrix,
}

const PROB_CLIP: f64 = 1e-12;

/// `−(1/k) Σ_j [y_j log p_j + (1−y_j) log(1−p_j)]` with `p` clipped to
/// `[1e-12, 1−1e-12]` for the value.
pub fn gpp_loss(scores: &PositiveScores, labels: &[bool]) -> Result<GppLoss> {
    let k = scores.probs.len();
    if labels.len() != k {
        return Err(Error::shape(format!("{} labels for {k} candidates", labels.len())));
    }
    if k == 0 {
        return Err(Error::param("empty candidate set"));
    }
    let kf = k as f64;
    let mut value = 0.0;
    let mut grad_logits = Matrix::zeros(k, 2);
    for (j, (&p, &y)) in scores.probs.iter().zip(labels).enumerate() {
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        value -= if y { pc.ln() } else { (1.0 - pc).ln() };
        let t = if y { 1.0 } else { 0.0 };
        // p = σ(o₁ − o₀)
        grad_logits.set(j, 1, (p - t) / kf);
        grad_logits.set(j, 0, -(p - t) / kf);
    }
    Ok(GppLoss {
        value: value / kf,
        grad_logits,
    })
}

/// `{anchor} ∪ {V_j : p_j ≥ μ}`.
pub fn select_reliable(
    scores: &PositiveScores,
    candidate_indices: &[usize],
    mu: f64,
    anchor: usize,
) -> NeighborSet {
    NeighborSet::new(
        anchor,
        candidate_indices
            .iter()
            .zip(&scores.probs)
            .filter(|(_, &p)| p >= mu)
            .map(|(&j, _)| j),
    )
}

/// `{anchor}` plus the `n` candidates with the highest positive probability
/// (ties by candidate order).
pub fn select_top(
    scores: &PositiveScores,
    candidate_indices: &[usize],
    n: usize,
    anchor: usize,
) -> NeighborSet {
    let mut order: Vec<usize> = (0..candidate_indices.len()).collect();
    order.sort_by(|&a, &b| scores.probs[b].total_cmp(&scores.probs[a]).then(a.cmp(&b)));
    NeighborSet::new(
        anchor,
        order.into_iter().take(n).map(|r| candidate_indices[r]),
    )
}

/// Forward, loss and parameter gradients for one labeled anchor.
#[derive(Debug, Clone)]
pub struct GppStep {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub classifier: ClassifierCache,
}

impl GppNetwork {
    pub fn train_step(&self, graph: &CandidateGraph, labels: &[bool]) -> Result<GppStep> {
        let gcn = gcn_forward(graph, self)?;
        let (scores, cls) = classify_positive(&gcn.z, self, true)?;
        let loss = gpp_loss(&scores, labels)?;
        let grads = self.backward(graph, &gcn, &cls, &loss.grad_logits)?;
        Ok(GppStep {
            loss: loss.value,
            grads,
            classifier: cls,
        })
    }

    /// Inference-mode positive probabilities for a graph.
    pub fn predict(&self, graph: &CandidateGraph) -> Result<PositiveScores> {
        let gcn = gcn_forward(graph, self)?;
        Ok(classify_positive(&gcn.z, self, false)?.0)
    }
}
