//! Uniform access to the trainable matrices of a model, used by SGD and by
//! checkpointing.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::Rng;

pub trait Parameterized {
    /// Trainable tensors in a fixed order.
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// In-place `p ← p − lr·g` over every parameter.
    fn sgd_update(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            p.add_scaled(g, -lr)?;
        }
        Ok(())
    }

    /// Zero gradients shaped like the parameters.
    fn zero_grads(&self) -> Vec<Matrix> {
        self.params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect()
    }

    /// Overwrites parameters from `values`, checking shapes.
    fn load_params(&mut self, values: &[Matrix]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.into_iter().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {:?}, expected {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
            *p = v.clone();
        }
        Ok(())
    }
}

/// Adds `src` into `dst` entry by entry.
pub fn accumulate(dst: &mut [Matrix], src: &[Matrix]) -> Result<()> {
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_scaled(s, 1.0)?;
    }
    Ok(())
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}
