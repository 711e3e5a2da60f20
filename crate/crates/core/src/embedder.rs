//! Two-layer MLP feature extractor with an L2-normalized output, and the
//! linear identity classifier trained on source labels.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, relu, Matrix};
use crate::params::{uniform_init, Parameterized};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `x ↦ normalize(W₂ᵀ·ReLU(W₁ᵀx + b₁) + b₂)`
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    input: Matrix,
    pre_hidden: Matrix,
    hidden: Matrix,
    /// Unit-norm output rows.
    pub features: Matrix,
    /// `||u||` of each pre-normalization row.
    norms: Vec<f64>,
}

/// Cache of a single-sample pass, enough to backpropagate through the final
/// normalization.
#[derive(Debug, Clone)]
pub struct NormalizeCache {
    pub feature: Vec<f64>,
    pub pre_norm: f64,
}

impl Embedder {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::param("embedder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w1: uniform_init(&mut rng, in_dim, hidden, in_dim),
            b1: uniform_init(&mut rng, 1, hidden, in_dim),
            w2: uniform_init(&mut rng, hidden, out_dim, hidden),
            b2: uniform_init(&mut rng, 1, out_dim, hidden),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Embeds every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<EmbedCache> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "input dim {} for embedder expecting {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut pre_hidden = x.matmul(&self.w1)?;
        add_bias(&mut pre_hidden, &self.b1);
        let hidden = relu(&pre_hidden);
        let mut out = hidden.matmul(&self.w2)?;
        add_bias(&mut out, &self.b2);
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = norm(row);
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(EmbedCache {
            input: x.clone(),
            pre_hidden,
            hidden,
            features: out,
            norms,
        })
    }

    /// Single-sample embedding.
    pub fn embed(&self, x: &[f64]) -> Result<(Vec<f64>, NormalizeCache)> {
        let cache = self.forward(&Matrix::row_vector(x))?;
        let feature = cache.features.row(0).to_vec();
        Ok((
            feature.clone(),
            NormalizeCache {
                feature,
                pre_norm: cache.norms[0],
            },
        ))
    }

    /// Parameter gradients given `dL/df` for every row of the cached batch.
    /// Returns gradients in [`Parameterized::params`] order.
    pub fn backward(&self, cache: &EmbedCache, grad_features: &Matrix) -> Result<Vec<Matrix>> {
        if grad_features.shape() != cache.features.shape() {
            return Err(Error::shape("feature gradient does not match batch"));
        }
        let mut grad_out = Matrix::zeros(grad_features.rows(), grad_features.cols());
        for r in 0..grad_features.rows() {
            let nc = NormalizeCache {
                feature: cache.features.row(r).to_vec(),
                pre_norm: cache.norms[r],
            };
            let g = backward_through_normalize(grad_features.row(r), &nc)?;
            grad_out.row_mut(r).copy_from_slice(&g);
        }
        let gw2 = cache.hidden.t_matmul(&grad_out)?;
        let gb2 = column_sums(&grad_out);
        let mut grad_hidden = grad_out.matmul_t(&self.w2)?;
        for (g, &z) in grad_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_hidden.as_slice())
        {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let gw1 = cache.input.t_matmul(&grad_hidden)?;
        let gb1 = column_sums(&grad_hidden);
        Ok(vec![gw1, gb1, gw2, gb2])
    }
}

impl Parameterized for Embedder {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Gradient with respect to the pre-normalization vector `u` given the
/// gradient with respect to `f = u/||u||`:
/// `(g − f·(fᵀg)) / ||u||`.
pub fn backward_through_normalize(grad_out: &[f64], cache: &NormalizeCache) -> Result<Vec<f64>> {
    if cache.pre_norm < 1e-12 {
        return Err(Error::Degenerate(format!(
            "normalizing a vector of norm {:e}",
            cache.pre_norm
        )));
    }
    let radial = dot(&cache.feature, grad_out);
    Ok(grad_out
        .iter()
        .zip(&cache.feature)
        .map(|(g, f)| (g - f * radial) / cache.pre_norm)
        .collect())
}

/// Linear `d → M` identity classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityClassifier {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl IdentityClassifier {
    pub fn new(dim: usize, num_ids: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_ids == 0 {
            return Err(Error::param("classifier dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            weight: uniform_init(&mut rng, dim, num_ids, dim),
            bias: uniform_init(&mut rng, 1, num_ids, dim),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    /// `Wᵀf + b`
    pub fn classify_identity(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(&Matrix::row_vector(f))?.into_vec())
    }

    /// Logits for every row of `features`.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = features.matmul(&self.weight)?;
        add_bias(&mut out, &self.bias);
        Ok(out)
    }

    /// Returns `(parameter grads, dL/dfeatures)` given `dL/dlogits`.
    pub fn backward(&self, features: &Matrix, grad_logits: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        let gw = features.t_matmul(grad_logits)?;
        let gb = column_sums(grad_logits);
        let gf = grad_logits.matmul_t(&self.weight)?;
        Ok((vec![gw, gb], gf))
    }
}

impl Parameterized for IdentityClassifier {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub(crate) fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
}

pub(crate) fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for row in m.row_iter() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
