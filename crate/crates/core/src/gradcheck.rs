//! Finite-difference verification of every hand-written gradient.
//!
//! Each component is checked on freshly drawn random instances (memories,
//! features, networks, neighbor sets); a component passes when its worst
//! relative error over all instances and all coordinates stays below the
//! tolerance.

use crate::embedder::{backward_through_normalize, Embedder, IdentityClassifier};
use crate::error::Result;
use crate::gpp::{build_graph, classify_positive, gcn_forward, gpp_loss, CandidateGraph, GppNetwork};
use crate::losses::{ei_ci_loss, source_ce_loss, target_loss, NeighborSet};
use crate::memory::ExemplarMemory;
use crate::numerics::{finite_diff_check, l2_normalize, Matrix};
use crate::params::Parameterized;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Names of the checked components, in report order.
pub const COMPONENTS: [&str; 9] = [
    "source_ce",
    "identity_classifier",
    "exemplar_invariance",
    "camera_invariance",
    "neighborhood_invariance",
    "l2_normalize",
    "embedder",
    "gcn_layers",
    "positive_classifier",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Random instances per component.
    pub instances: usize,
    pub eps: f64,
    pub tol: f64,
    /// Test fixture: perturbs the analytic gradient of the named component
    /// so that its check must fail.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            instances: 16,
            eps: 1e-6,
            tol: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub components: Vec<ComponentReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn total_instances(&self) -> usize {
        self.components.iter().map(|c| c.instances).sum()
    }

    /// The component with the largest relative error.
    pub fn worst(&self) -> Option<&ComponentReport> {
        self.components
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

struct Tracker<'a> {
    opts: &'a GradCheckOptions,
    report: ComponentReport,
}

impl<'a> Tracker<'a> {
    fn new(name: &'static str, opts: &'a GradCheckOptions) -> Self {
        Self {
            opts,
            report: ComponentReport {
                name,
                instances: 0,
                max_relative_error: 0.0,
                worst_instance: 0,
                passed: true,
            },
        }
    }

    /// Checks one analytic gradient; counts as part of instance `inst`.
    fn check(&mut self, inst: usize, loss: impl Fn(&Matrix) -> f64, point: &Matrix, grad: &Matrix) -> Result<()> {
        let mut grad = grad.clone();
        if self.opts.corrupt.as_deref() == Some(self.report.name) {
            let g = grad.as_slice()[0];
            grad.as_mut_slice()[0] = g + 1e-2 * (1.0 + g.abs());
        }
        let r = finite_diff_check(loss, point, &grad, self.opts.eps, self.opts.tol)?;
        let err = r.max_relative_error;
        if err > self.report.max_relative_error || err.is_nan() {
            self.report.max_relative_error = err;
            self.report.worst_instance = inst;
        }
        self.report.passed &= r.passed;
        self.report.instances = self.report.instances.max(inst + 1);
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&gaussian(rng, d))
}

fn memory(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<ExemplarMemory> {
    let mut m = ExemplarMemory::new(n, d)?;
    for i in 0..n {
        m.update_slot(i, &unit(rng, d), 0.0)?;
    }
    Ok(m)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> NeighborSet {
    let anchor = rng.random_range(0..n);
    let extra: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..n)).collect();
    NeighborSet::new(anchor, extra)
}

fn beta(rng: &mut ChaCha8Rng) -> f64 {
    [0.05, 0.1, 0.5, 1.0][rng.random_range(0..4)]
}

/// Checks every parameter of `model` against the scalar `loss`.
fn check_params<M: Parameterized + Clone>(
    t: &mut Tracker,
    inst: usize,
    model: &M,
    grads: &[Matrix],
    loss: impl Fn(&M) -> f64,
) -> Result<()> {
    for (p, g) in grads.iter().enumerate() {
        t.check(
            inst,
            |m| {
                let mut copy = model.clone();
                *copy.params_mut()[p] = m.clone();
                loss(&copy)
            },
            model.params()[p],
            g,
        )?;
    }
    Ok(())
}

fn random_gpp(rng: &mut ChaCha8Rng, d: usize, layers: usize, seed: u64) -> Result<GppNetwork> {
    let mut dims = vec![d];
    for _ in 0..layers {
        dims.push(rng.random_range(3..=8));
    }
    let hidden = rng.random_range(3..=6);
    let mut net = GppNetwork::new(&dims, hidden, seed)?;
    // batch-norm output exactly 0 (a dead GCN column) would sit on the PReLU
    // kink; nonzero shifts keep the check away from it
    for c in 0..hidden {
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        net.bn_beta.set(0, c, sign * rng.random_range(0.1..0.5));
        net.bn_gamma.set(0, c, rng.random_range(0.5..1.5));
    }
    net.prelu.set(0, 0, rng.random_range(0.1..0.4));
    Ok(net)
}

fn gpp_value(net: &GppNetwork, graph: &CandidateGraph, labels: &[bool]) -> f64 {
    let gcn = gcn_forward(graph, net).expect("shapes fixed");
    let (scores, _) = classify_positive(&gcn.z, net, true).expect("shapes fixed");
    gpp_loss(&scores, labels).expect("labels sized").value
}

pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut components = Vec::with_capacity(COMPONENTS.len());

    let mut t = Tracker::new("source_ce", opts);
    for inst in 0..opts.instances {
        let m = rng.random_range(2..=30);
        let logits = gaussian(&mut rng, m);
        let label = rng.random_range(0..m);
        let lv = source_ce_loss(&logits, label)?;
        t.check(
            inst,
            |x| source_ce_loss(x.as_slice(), label).expect("label in range").value,
            &Matrix::row_vector(&logits),
            &Matrix::row_vector(&lv.grad),
        )?;
    }
    components.push(t.report);

    let mut t = Tracker::new("identity_classifier", opts);
    for inst in 0..opts.instances {
        let d = rng.random_range(2..=12);
        let m = rng.random_range(2..=10);
        let mut c = IdentityClassifier::new(d, m, rng.random())?;
        c.bias = Matrix::row_vector(&gaussian(&mut rng, m));
        let b = rng.random_range(1..=4);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let f = Matrix::from_rows(&rows)?;
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let total = |c: &IdentityClassifier, f: &Matrix| -> (f64, Matrix) {
            let logits = c.logits(f).expect("shapes fixed");
            let mut g = Matrix::zeros(b, m);
            let mut v = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let lv = source_ce_loss(logits.row(r), y).expect("label in range");
                v += lv.value;
                g.row_mut(r).copy_from_slice(&lv.grad);
            }
            (v, g)
        };
        let (_, g_logits) = total(&c, &f);
        let (grads, g_f) = c.backward(&f, &g_logits)?;
        check_params(&mut t, inst, &c, &grads, |c| total(c, &f).0)?;
        t.check(inst, |x| total(&c, x).0, &f, &g_f)?;
    }
    components.push(t.report);

    let mut t = Tracker::new("exemplar_invariance", opts);
    for inst in 0..opts.instances {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(2..=16);
        let mem = memory(&mut rng, n, d)?;
        let f = unit(&mut rng, d);
        let i = rng.random_range(0..n);
        let b = beta(&mut rng);
        let lv = ei_ci_loss(&mem, i, &f, b)?;
        t.check(
            inst,
            |x| ei_ci_loss(&mem, i, x.as_slice(), b).expect("index in range").value,
            &Matrix::row_vector(&f),
            &Matrix::row_vector(&lv.grad),
        )?;
    }
    components.push(t.report);

    // a counterpart's embedding pulled toward its original's slot, checked
    // through the embedder
    let mut t = Tracker::new("camera_invariance", opts);
    for inst in 0..opts.instances {
        let (din, h, d) = (rng.random_range(2..=8), rng.random_range(2..=10), rng.random_range(2..=8));
        let e = Embedder::new(din, h, d, rng.random())?;
        let n = rng.random_range(2..=20);
        let mem = memory(&mut rng, n, d)?;
        let i = rng.random_range(0..n);
        let b = beta(&mut rng);
        let x_hat = Matrix::row_vector(&gaussian(&mut rng, din));
        let loss = |e: &Embedder| -> (f64, Matrix) {
            let cache = e.forward(&x_hat).expect("shapes fixed");
            let lv = ei_ci_loss(&mem, i, cache.features.row(0), b).expect("index in range");
            (lv.value, Matrix::row_vector(&lv.grad))
        };
        let (_, g_f) = loss(&e);
        let grads = e.backward(&e.forward(&x_hat)?, &g_f)?;
        check_params(&mut t, inst, &e, &grads, |e| loss(e).0)?;
    }
    components.push(t.report);

    let mut t = Tracker::new("neighborhood_invariance", opts);
    for inst in 0..opts.instances {
        let n = rng.random_range(3..=50);
        let d = rng.random_range(2..=16);
        let mem = memory(&mut rng, n, d)?;
        let f = unit(&mut rng, d);
        let set = random_set(&mut rng, n);
        let b = beta(&mut rng);
        let lv = target_loss(&mem, &set, &f, b)?;
        t.check(
            inst,
            |x| target_loss(&mem, &set, x.as_slice(), b).expect("members in range").value,
            &Matrix::row_vector(&f),
            &Matrix::row_vector(&lv.grad),
        )?;
    }
    components.push(t.report);

    let mut t = Tracker::new("l2_normalize", opts);
    for inst in 0..opts.instances {
        let d = rng.random_range(2..=16);
        let u = gaussian(&mut rng, d);
        let w = gaussian(&mut rng, d);
        let norm = crate::numerics::norm(&u);
        let cache = crate::embedder::NormalizeCache {
            feature: l2_normalize(&u),
            pre_norm: norm,
        };
        // scalar probe wᵀ·normalize(u)
        let g_u = backward_through_normalize(&w, &cache)?;
        t.check(
            inst,
            |x| crate::numerics::dot(&w, &l2_normalize(x.as_slice())),
            &Matrix::row_vector(&u),
            &Matrix::row_vector(&g_u),
        )?;
    }
    components.push(t.report);

    let mut t = Tracker::new("embedder", opts);
    for inst in 0..opts.instances {
        let (din, h, d) = (rng.random_range(2..=8), rng.random_range(2..=10), rng.random_range(2..=8));
        let e = Embedder::new(din, h, d, rng.random())?;
        let n = rng.random_range(3..=20);
        let mem = memory(&mut rng, n, d)?;
        let b = rng.random_range(1..=4);
        let x = Matrix::from_vec(b, din, gaussian(&mut rng, b * din))?;
        let sets: Vec<NeighborSet> = (0..b).map(|_| random_set(&mut rng, n)).collect();
        let beta = beta(&mut rng);
        let total = |e: &Embedder| -> (f64, Matrix) {
            let cache = e.forward(&x).expect("shapes fixed");
            let mut g = Matrix::zeros(b, d);
            let mut v = 0.0;
            for (r, s) in sets.iter().enumerate() {
                let lv = target_loss(&mem, s, cache.features.row(r), beta).expect("members in range");
                v += lv.value;
                g.row_mut(r).copy_from_slice(&lv.grad);
            }
            (v, g)
        };
        let (_, g_f) = total(&e);
        let grads = e.backward(&e.forward(&x)?, &g_f)?;
        check_params(&mut t, inst, &e, &grads, |e| total(e).0)?;
    }
    components.push(t.report);

    let mut gcn = Tracker::new("gcn_layers", opts);
    let mut cls = Tracker::new("positive_classifier", opts);
    for inst in 0..opts.instances {
        let k = rng.random_range(2..=10);
        let d = rng.random_range(3..=8);
        let mem = memory(&mut rng, k + 3, d)?;
        let f = unit(&mut rng, d);
        let graph = build_graph(&mem, Some(0), &f, k)?;
        let layers = rng.random_range(1..=4);
        let seed = rng.random();
        let net = random_gpp(&mut rng, d, layers, seed)?;
        let labels: Vec<bool> = (0..k).map(|_| rng.random_bool(0.4)).collect();
        let step = net.train_step(&graph, &labels)?;
        for (p, g) in step.grads.iter().enumerate() {
            let tracker = if p < layers { &mut gcn } else { &mut cls };
            tracker.check(
                inst,
                |m| {
                    let mut copy = net.clone();
                    *copy.params_mut()[p] = m.clone();
                    gpp_value(&copy, &graph, &labels)
                },
                net.params()[p],
                g,
            )?;
        }
    }
    components.push(gcn.report);
    components.push(cls.report);

    Ok(SuiteReport { components })
}
