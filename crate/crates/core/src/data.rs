//! Synthetic labeled domains with camera effects and a global domain shift.
//!
//! Every identity has a random unit prototype in input space. A sample is a
//! noisy copy of its prototype (the sample's *latent*) seen through the
//! linear effect `I + σ_cam·R_c` of its camera; target domains additionally
//! pass every sample through a shift map `I + σ_shift·S`. Camera-style
//! counterparts re-render a sample's latent through another camera's effect,
//! so identity is preserved exactly.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub num_cameras: usize,
    pub in_dim: usize,
    /// Standard deviation of the per-sample identity noise.
    pub cluster_spread: f64,
    pub camera_strength: f64,
    /// Ignored for source domains.
    pub shift_strength: f64,
    /// Label of the first identity; keeps domains' label spaces apart.
    pub identity_offset: u32,
    pub seed: u64,
}

impl DomainSpec {
    /// 50 identities × 12 samples over 4 cameras.
    pub fn default_source() -> Self {
        Self {
            kind: DomainKind::Source,
            num_identities: 50,
            samples_per_identity: 12,
            num_cameras: 4,
            in_dim: 32,
            cluster_spread: 0.15,
            camera_strength: 0.2,
            shift_strength: 0.0,
            identity_offset: 0,
            seed: 1,
        }
    }

    /// 40 identities × 12 samples over 5 cameras, labels starting at 1000.
    pub fn default_target() -> Self {
        Self {
            kind: DomainKind::Target,
            num_identities: 40,
            samples_per_identity: 12,
            num_cameras: 5,
            in_dim: 32,
            cluster_spread: 0.15,
            camera_strength: 0.2,
            shift_strength: 0.3,
            identity_offset: 1000,
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0
            || self.samples_per_identity == 0
            || self.num_cameras == 0
            || self.in_dim == 0
        {
            return Err(Error::Config("domain counts must all be >= 1".into()));
        }
        if self.num_cameras > u16::MAX as usize + 1 {
            return Err(Error::Config("too many cameras".into()));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("camera_strength", self.camera_strength),
            ("shift_strength", self.shift_strength),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// One input vector with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub identity: u32,
    pub camera: u16,
    /// Index of the real sample this one was rendered from.
    pub counterpart_of: Option<usize>,
}

/// An ordered sample list over a fixed input dimension and camera count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub in_dim: usize,
    pub num_cameras: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples that are not counterparts.
    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].counterpart_of.is_none())
            .collect()
    }

    /// Input rows of the given samples.
    pub fn inputs(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.in_dim);
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.samples[i].x);
        }
        m
    }

    pub fn identities(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Checks internal consistency: vector lengths, camera range, and that
    /// every counterpart points at a real sample of the same identity seen by
    /// a different camera.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.in_dim {
                return Err(Error::Format(format!("sample {i} has dim {}", s.x.len())));
            }
            if s.camera as usize >= self.num_cameras {
                return Err(Error::Format(format!("sample {i} camera {} out of range", s.camera)));
            }
            if let Some(o) = s.counterpart_of {
                let orig = self.samples.get(o).ok_or_else(|| {
                    Error::Format(format!("sample {i} is a counterpart of missing sample {o}"))
                })?;
                if orig.counterpart_of.is_some()
                    || orig.identity != s.identity
                    || orig.camera == s.camera
                {
                    return Err(Error::Format(format!("sample {i} is not a valid counterpart of {o}")));
                }
            }
        }
        Ok(())
    }
}

/// A generated domain plus everything needed to render counterparts.
#[derive(Debug, Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
    /// `num_identities × in_dim`, unit rows.
    pub prototypes: Matrix,
    /// Per-sample `prototype + σ_id·noise`, aligned with `samples`.
    pub latents: Matrix,
    pub camera_maps: Vec<Matrix>,
    pub shift_map: Option<Matrix>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// `I + strength·R`, applied to row vectors as `x·Mᵀ`; stored transposed so
/// rendering is a plain product.
fn perturbed_identity(rng: &mut ChaCha8Rng, dim: usize, strength: f64) -> Matrix {
    let mut m = gaussian_matrix(rng, dim, dim);
    m.scale_in_place(strength);
    for i in 0..dim {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m.transpose()
}

impl Domain {
    /// Deterministic in `spec`. Cameras are assigned round-robin within each
    /// identity.
    pub fn generate(spec: &DomainSpec) -> Result<Domain> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.in_dim;

        let mut prototypes = Matrix::zeros(spec.num_identities, d);
        for r in 0..spec.num_identities {
            let g = gaussian_matrix(&mut rng, 1, d);
            prototypes.row_mut(r).copy_from_slice(&l2_normalize(g.as_slice()));
        }
        let camera_maps: Vec<Matrix> = (0..spec.num_cameras)
            .map(|_| perturbed_identity(&mut rng, d, spec.camera_strength))
            .collect();
        let shift_map = match spec.kind {
            DomainKind::Target => Some(perturbed_identity(&mut rng, d, spec.shift_strength)),
            DomainKind::Source => None,
        };

        let n = spec.num_identities * spec.samples_per_identity;
        let mut latents = Matrix::zeros(n, d);
        let mut samples = Vec::with_capacity(n);
        for id in 0..spec.num_identities {
            for s in 0..spec.samples_per_identity {
                let row = id * spec.samples_per_identity + s;
                let noise = gaussian_matrix(&mut rng, 1, d);
                for ((z, p), e) in latents
                    .row_mut(row)
                    .iter_mut()
                    .zip(prototypes.row(id))
                    .zip(noise.as_slice())
                {
                    *z = p + spec.cluster_spread * e;
                }
                samples.push(Sample {
                    x: Vec::new(),
                    identity: spec.identity_offset + id as u32,
                    camera: (s % spec.num_cameras) as u16,
                    counterpart_of: None,
                });
            }
        }
        let mut domain = Domain {
            spec: spec.clone(),
            samples,
            prototypes,
            latents,
            camera_maps,
            shift_map,
        };
        for i in 0..n {
            let cam = domain.samples[i].camera as usize;
            domain.samples[i].x = domain.render(i, cam)?;
        }
        Ok(domain)
    }

    /// The latent of sample `i` seen by `camera` (and the shift, if any).
    pub fn render(&self, i: usize, camera: usize) -> Result<Vec<f64>> {
        if i >= self.latents.rows() {
            return Err(Error::Index {
                index: i,
                len: self.latents.rows(),
            });
        }
        let map = self.camera_maps.get(camera).ok_or(Error::Index {
            index: camera,
            len: self.camera_maps.len(),
        })?;
        let mut x = Matrix::row_vector(self.latents.row(i)).matmul(map)?;
        if let Some(shift) = &self.shift_map {
            x = x.matmul(shift)?;
        }
        Ok(x.into_vec())
    }

    /// Renders sample `i` under `how_many` other cameras, taken in order
    /// `c+1, c+2, …` (mod C). Counterpart indices are left unset; the caller
    /// places them.
    pub fn camstyle_counterparts(&self, i: usize, how_many: usize) -> Result<Vec<Sample>> {
        let c = self.spec.num_cameras;
        if how_many > c - 1 {
            return Err(Error::param(format!(
                "{how_many} counterparts requested with only {c} cameras"
            )));
        }
        let orig = self.samples.get(i).ok_or(Error::Index {
            index: i,
            len: self.samples.len(),
        })?;
        (1..=how_many)
            .map(|step| {
                let cam = (orig.camera as usize + step) % c;
                Ok(Sample {
                    x: self.render(i, cam)?,
                    identity: orig.identity,
                    camera: cam as u16,
                    counterpart_of: Some(i),
                })
            })
            .collect()
    }

    /// All samples as a dataset, without counterparts.
    pub fn dataset(&self) -> Dataset {
        self.subset(&(0..self.samples.len()).collect::<Vec<_>>(), 0)
            .expect("indices in range")
    }

    /// The listed samples, each followed in a trailing block by
    /// `counterparts` camera-style copies whose `counterpart_of` points at
    /// the sample's position in the returned dataset.
    pub fn subset(&self, indices: &[usize], counterparts: usize) -> Result<Dataset> {
        let mut samples: Vec<Sample> = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or(Error::Index {
                    index: i,
                    len: self.samples.len(),
                })
            })
            .collect::<Result<_>>()?;
        for (pos, &i) in indices.iter().enumerate() {
            for mut cp in self.camstyle_counterparts(i, counterparts)? {
                cp.counterpart_of = Some(pos);
                samples.push(cp);
            }
        }
        Ok(Dataset {
            in_dim: self.spec.in_dim,
            num_cameras: self.spec.num_cameras,
            samples,
        })
    }
}

/// Convenience: the samples of a freshly generated domain.
pub fn generate_domain(spec: &DomainSpec) -> Result<Vec<Sample>> {
    Ok(Domain::generate(spec)?.samples)
}

/// Target train/test split: a fraction of identities is held out for
/// testing. Returns `(train identities, test identities)` as sorted
/// zero-based identity positions.
pub fn split_identities(num_identities: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((num_identities as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(num_identities);
    let n_train = num_identities - n_test;
    ((0..n_train).collect(), (n_train..num_identities).collect())
}

/// The three datasets of one adaptation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub source: Dataset,
    /// Training identities of the target domain, with counterparts.
    pub target_train: Dataset,
    /// Held-out target identities, real samples only.
    pub target_test: Dataset,
}

impl Scenario {
    /// Generates both domains and splits the target by identity. Every
    /// target training sample gets `counterparts` camera-style copies
    /// (`None` means one per other camera).
    pub fn build(
        source: &DomainSpec,
        target: &DomainSpec,
        test_fraction: f64,
        counterparts: Option<usize>,
    ) -> Result<Scenario> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        let (s_lo, s_hi) = label_range(source);
        let (t_lo, t_hi) = label_range(target);
        if s_lo < t_hi && t_lo < s_hi {
            return Err(Error::Config(
                "source and target identity label ranges overlap".into(),
            ));
        }
        if source.in_dim != target.in_dim {
            return Err(Error::Config("source and target in_dim differ".into()));
        }
        let src = Domain::generate(source)?;
        let tgt = Domain::generate(target)?;
        let (train_ids, test_ids) = split_identities(target.num_identities, test_fraction);
        if train_ids.is_empty() || test_ids.is_empty() {
            return Err(Error::Config(
                "target split leaves no training or no test identities".into(),
            ));
        }
        let per = target.samples_per_identity;
        let rows = |ids: &[usize]| -> Vec<usize> {
            ids.iter().flat_map(|&id| id * per..(id + 1) * per).collect()
        };
        let counterparts = counterparts.unwrap_or(target.num_cameras - 1);
        Ok(Scenario {
            source: src.dataset(),
            target_train: tgt.subset(&rows(&train_ids), counterparts)?,
            target_test: tgt.subset(&rows(&test_ids), 0)?,
        })
    }
}

fn label_range(spec: &DomainSpec) -> (u64, u64) {
    let lo = spec.identity_offset as u64;
    (lo, lo + spec.num_identities as u64)
}

/// Splits a test domain's samples into queries (the first sample of each
/// identity under each camera) and gallery (everything else).
pub fn query_gallery_split(samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashSet::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.counterpart_of.is_some() {
            continue;
        }
        if seen.insert((s.identity, s.camera)) {
            query.push(i);
        } else {
            gallery.push(i);
        }
    }
    (query, gallery)
}
