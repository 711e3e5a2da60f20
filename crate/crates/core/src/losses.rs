//! Source identity cross-entropy and the memory-based target invariance
//! losses (exemplar, camera, neighborhood), each with its analytic gradient
//! with respect to the input embedding.
//!
//! Memory slots are constants here: no gradient flows into the memory.

use crate::error::{Error, Result};
use crate::memory::ExemplarMemory;

/// A loss value together with its gradient with respect to the input
/// (the embedding for memory losses, the logits for cross-entropy).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// The anchor's own class plus its selected reliable neighbors.
///
/// The anchor carries weight 1; each of the other members carries
/// `1 / (number of non-anchor members)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    anchor: usize,
    /// Anchor first, then neighbors in selection order.
    members: Vec<usize>,
}

impl NeighborSet {
    /// The exemplar/camera-invariance only set `{anchor}`.
    pub fn singleton(anchor: usize) -> Self {
        Self {
            anchor,
            members: vec![anchor],
        }
    }

    /// Builds `{anchor} ∪ neighbors`; duplicates and the anchor itself are
    /// dropped from `neighbors`.
    pub fn new(anchor: usize, neighbors: impl IntoIterator<Item = usize>) -> Self {
        let mut members = vec![anchor];
        for j in neighbors {
            if !members.contains(&j) {
                members.push(j);
            }
        }
        Self { anchor, members }
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Members other than the anchor.
    pub fn neighbors(&self) -> &[usize] {
        &self.members[1..]
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn weight(&self, j: usize) -> f64 {
        if j == self.anchor {
            1.0
        } else if self.members.contains(&j) {
            1.0 / self.neighbors().len() as f64
        } else {
            0.0
        }
    }

    /// `(member, weight)` pairs, anchor first.
    pub fn weighted(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let w = if self.is_singleton() {
            0.0
        } else {
            1.0 / self.neighbors().len() as f64
        };
        self.members
            .iter()
            .enumerate()
            .map(move |(pos, &j)| (j, if pos == 0 { 1.0 } else { w }))
    }
}

fn log_softmax(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {beta}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| ((s - max) / beta).exp()).sum::<f64>().ln();
    Ok(scores.iter().map(|s| (s - max) / beta - lse).collect())
}

/// `−log softmax(logits)[label]`, gradient `softmax(logits) − onehot(label)`.
pub fn source_ce_loss(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    let logp = log_softmax(logits, 1.0)?;
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok(LossValue {
        value: -logp[label],
        grad,
    })
}

/// `−log p(i | f)` against the memory: exemplar invariance when `f` embeds
/// the real sample, camera invariance when it embeds a style counterpart.
pub fn ei_ci_loss(mem: &ExemplarMemory, i: usize, f: &[f64], beta: f64) -> Result<LossValue> {
    target_loss(mem, &NeighborSet::singleton(i), f, beta)
}

/// `−Σ_j w_j log p(j | f)` over the members of `neigh`.
///
/// Gradient: `Σ_j w_j (Σ_m p_m slot_m − slot_j) / β`.
pub fn target_loss(
    mem: &ExemplarMemory,
    neigh: &NeighborSet,
    f: &[f64],
    beta: f64,
) -> Result<LossValue> {
    let n = mem.len();
    if let Some(&bad) = neigh.members().iter().find(|&&j| j >= n) {
        return Err(Error::Index { index: bad, len: n });
    }
    let logp = log_softmax(&mem.scores(f)?, beta)?;
    let d = mem.dim();

    let mut value = 0.0;
    let mut total_w = 0.0;
    let mut pulled = vec![0.0; d];
    for (j, w) in neigh.weighted() {
        value -= w * logp[j];
        total_w += w;
        for (acc, s) in pulled.iter_mut().zip(mem.slot(j)) {
            *acc += w * s;
        }
    }

    let mut expected = vec![0.0; d];
    for (m, lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        for (acc, s) in expected.iter_mut().zip(mem.slot(m)) {
            *acc += p * s;
        }
    }

    let grad = expected
        .iter()
        .zip(&pulled)
        .map(|(e, q)| (total_w * e - q) / beta)
        .collect();
    Ok(LossValue { value, grad })
}
