//! Exemplar memory: one unit-norm feature slot per training sample, refreshed
//! by an exponential moving average and queried as a non-parametric
//! classifier.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, softmax_temp, Matrix};

/// Slot table of `n` features of dimension `d`. Slots start at zero and are
/// unit-norm once written.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    slots: Matrix,
}

impl ExemplarMemory {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::param(format!("memory needs n, d >= 1 (got {n}, {d})")));
        }
        Ok(Self {
            slots: Matrix::zeros(n, d),
        })
    }

    /// Wraps an existing slot table, e.g. one loaded from a checkpoint.
    pub fn from_slots(slots: Matrix) -> Result<Self> {
        if slots.rows() == 0 || slots.cols() == 0 {
            return Err(Error::param("empty slot table"));
        }
        for (i, row) in slots.row_iter().enumerate() {
            let sq = dot(row, row);
            if sq != 0.0 && (sq.sqrt() - 1.0).abs() > 1e-8 {
                return Err(Error::Format(format!("slot {i} is neither zero nor unit norm")));
            }
        }
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        self.slots.row(i)
    }

    /// `slot_i ← normalize(α·slot_i + (1−α)·f)`
    pub fn update_slot(&mut self, i: usize, f: &[f64], alpha: f64) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Index {
                index: i,
                len: self.len(),
            });
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::param(format!("alpha {alpha} outside [0, 1]")));
        }
        if f.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature of dim {} into memory of dim {}",
                f.len(),
                self.dim()
            )));
        }
        let mixed: Vec<f64> = self
            .slot(i)
            .iter()
            .zip(f)
            .map(|(s, x)| alpha * s + (1.0 - alpha) * x)
            .collect();
        self.slots.row_mut(i).copy_from_slice(&l2_normalize(&mixed));
        Ok(())
    }

    /// Cosine scores `slot_jᵀ f` against every slot.
    pub fn scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::shape(format!(
                "query of dim {} against memory of dim {}",
                f.len(),
                self.dim()
            )));
        }
        // `+ 0.0` folds −0 into +0 so that equal scores tie under `total_cmp`.
        Ok(self.slots.row_iter().map(|s| dot(s, f) + 0.0).collect())
    }

    /// Probability that `f` belongs to each slot's class, a tempered softmax
    /// over all slot scores.
    pub fn probabilities(&self, f: &[f64], beta: f64) -> Result<Vec<f64>> {
        softmax_temp(&self.scores(f)?, beta)
    }

    /// Indices of the `k` highest-scoring slots, best first, ties broken by
    /// ascending index. `exclude` is removed before ranking.
    pub fn topk(&self, f: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let scores = self.scores(f)?;
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::param(format!(
                "top-{k} requested from {available} candidates"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).filter(|&j| Some(j) != exclude).collect();
        let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if k < idx.len() && k > 0 {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx.truncate(k);
        Ok(idx)
    }
}

/// Memory update rate as a function of the (zero-based) epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub base: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self { base: 0.01 }
    }
}

impl AlphaSchedule {
    pub fn alpha(&self, epoch: usize) -> f64 {
        (self.base * epoch as f64).clamp(0.0, 1.0)
    }
}
