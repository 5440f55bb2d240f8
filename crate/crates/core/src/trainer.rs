//! Small μP multilayer perceptrons trained from scratch with SGD, Adam or Muon.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, h: f64) -> f64 {
        match self {
            Self::Relu => h.max(0.0),
            Self::Tanh => h.tanh(),
            Self::Linear => h,
        }
    }

    fn derivative(self, h: f64) -> f64 {
        match self {
            Self::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - h.tanh().powi(2),
            Self::Linear => 1.0,
        }
    }
}

/// Width exponents (a, b, c) and constants (α, σ, η) of one layer:
/// multiplier α n^{-a}, init std σ n^{-b}, lr η n^{-c}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerScaling {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub eta: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Muon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub activation: Activation,
    pub use_bias: bool,
    /// One entry per weight matrix, input first.
    pub abc: Vec<LayerScaling>,
    pub output_dim: usize,
}

impl NetworkSpec {
    /// Default μP table for the given optimizer.
    pub fn mup(input_dim: usize, width: usize, depth: usize, activation: Activation, output_dim: usize, opt: OptimizerKind) -> Self {
        let s = |a, b, c, sigma| LayerScaling { a, b, c, alpha: 1.0, sigma, eta: 1.0 };
        let sig_in = 1.0 / (input_dim.max(1) as f64).sqrt();
        let (ci, ch, co) = match opt {
            OptimizerKind::Adam => (0.0, 1.0, 0.0),
            OptimizerKind::Muon => (0.0, 0.0, 0.0),
            OptimizerKind::Sgd => (-1.0, 0.0, -1.0),
        };
        let mut abc = vec![s(0.0, 0.0, ci, sig_in)];
        abc.extend((1..depth).map(|_| s(0.0, 0.5, ch, 1.0)));
        abc.push(s(1.0, 0.5, co, 1.0));
        Self { input_dim, width, depth, activation, use_bias: true, abc, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.output_dim == 0 || self.depth == 0 {
            return invalid("dimensions and depth must be positive");
        }
        if self.abc.len() != self.depth + 1 {
            return invalid(format!("abc table has {} rows, expected {}", self.abc.len(), self.depth + 1));
        }
        if self.abc.iter().any(|l| !(l.sigma >= 0.0 && l.eta >= 0.0 && l.alpha.is_finite())) {
            return invalid("abc constants must be finite with σ, η ≥ 0");
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.depth + 1
    }

    /// (rows, cols) of weight matrix ℓ (0-based).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let rows = if l == self.depth { self.output_dim } else { self.width };
        let cols = if l == 0 { self.input_dim } else { self.width };
        (rows, cols)
    }

    pub fn multiplier(&self, l: usize) -> f64 {
        let s = &self.abc[l];
        s.alpha * (self.width as f64).powf(-s.a)
    }

    pub fn layer_lr(&self, l: usize) -> f64 {
        let s = &self.abc[l];
        s.eta * (self.width as f64).powf(-s.c)
    }

    /// Parameter tensors in storage order: W₁, b₁, W₂, b₂, …
    pub fn params(&self) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        for l in 0..self.n_layers() {
            let (r, c) = self.layer_shape(l);
            v.push(ParamInfo { name: format!("W{}", l + 1), layer: l, matrix: true, rows: r, cols: c });
            if self.use_bias {
                v.push(ParamInfo { name: format!("b{}", l + 1), layer: l, matrix: false, rows: r, cols: 1 });
            }
        }
        v
    }

    fn tensor_index(&self, l: usize) -> usize {
        if self.use_bias {
            2 * l
        } else {
            l
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub layer: usize,
    pub matrix: bool,
    pub rows: usize,
    pub cols: usize,
}

/// All parameter tensors, biases stored as column vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub tensors: Vec<DMatrix<f64>>,
}

impl Weights {
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| DMatrix::zeros(t.nrows(), t.ncols())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { tensors: self.tensors.iter().zip(&other.tensors).map(|(a, b)| a - b).collect() }
    }
}

pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Weights> {
    spec.validate()?;
    let mut rng = stream(seed, "init");
    let n = spec.width as f64;
    let mut tensors = Vec::new();
    for l in 0..spec.n_layers() {
        let (r, c) = spec.layer_shape(l);
        let s = &spec.abc[l];
        let std = s.sigma * n.powf(-s.b);
        tensors.push(DMatrix::from_fn(r, c, |_, _| std * rng.sample::<f64, _>(StandardNormal)));
        if spec.use_bias {
            tensors.push(DMatrix::zeros(r, 1));
        }
    }
    Ok(Weights { tensors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Bce,
    SoftmaxCe,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample losses and their derivatives with respect to the outputs.
/// Squared loss is Σ_out (f − y)²; softmax targets hold class indices.
fn loss_terms(out: &DMatrix<f64>, y: &DMatrix<f64>, kind: LossKind) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = out.ncols();
    if y.ncols() != p {
        return Err(Error::Shape(format!("{p} outputs but {} targets", y.ncols())));
    }
    let mut d = DMatrix::zeros(out.nrows(), p);
    let mut l = vec![0.0; p];
    match kind {
        LossKind::Squared => {
            if y.nrows() != out.nrows() {
                return Err(Error::Shape("target rows differ from output_dim".into()));
            }
            for i in 0..p {
                for r in 0..out.nrows() {
                    let e = out[(r, i)] - y[(r, i)];
                    l[i] += e * e;
                    d[(r, i)] = 2.0 * e;
                }
            }
        }
        LossKind::Bce => {
            if out.nrows() != 1 || y.nrows() != 1 {
                return Err(Error::Shape("binary cross-entropy needs a single logit".into()));
            }
            for i in 0..p {
                let (f, t) = (out[(0, i)], y[(0, i)]);
                l[i] = softplus(f) - t * f;
                d[(0, i)] = sigmoid(f) - t;
            }
        }
        LossKind::SoftmaxCe => {
            if y.nrows() != 1 {
                return Err(Error::Shape("softmax targets are class indices".into()));
            }
            for i in 0..p {
                let col = out.column(i);
                let m = col.max();
                let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
                let cls = y[(0, i)] as usize;
                if cls >= out.nrows() {
                    return invalid(format!("class {cls} out of range"));
                }
                l[i] = m + z.ln() - col[cls];
                for r in 0..out.nrows() {
                    d[(r, i)] = (col[r] - m).exp() / z - if r == cls { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok((l, d))
}

pub struct ForwardPass {
    /// Preactivations per layer.
    pub hs: Vec<DMatrix<f64>>,
    /// Layer inputs: zs[0] is the batch, zs[ℓ] the activation of hidden layer ℓ.
    pub zs: Vec<DMatrix<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &DMatrix<f64> {
        self.hs.last().unwrap()
    }
}

/// Forward pass on a batch stored column-wise (d × P).
pub fn forward(w: &Weights, spec: &NetworkSpec, x: &DMatrix<f64>) -> Result<ForwardPass> {
    if x.nrows() != spec.input_dim {
        return Err(Error::Shape(format!("batch has {} features, network expects {}", x.nrows(), spec.input_dim)));
    }
    let mut hs = Vec::with_capacity(spec.n_layers());
    let mut zs = vec![x.clone()];
    for l in 0..spec.n_layers() {
        let ti = spec.tensor_index(l);
        let mut h = &w.tensors[ti] * zs.last().unwrap();
        h *= spec.multiplier(l);
        if spec.use_bias {
            let b = w.tensors[ti + 1].column(0);
            for mut c in h.column_iter_mut() {
                c += &b;
            }
        }
        if l < spec.depth {
            zs.push(h.map(|v| spec.activation.apply(v)));
        }
        hs.push(h);
    }
    Ok(ForwardPass { hs, zs })
}

pub fn loss(w: &Weights, spec: &NetworkSpec, x: &DMatrix<f64>, y: &DMatrix<f64>, kind: LossKind) -> Result<f64> {
    let f = forward(w, spec, x)?;
    let (l, _) = loss_terms(f.output(), y, kind)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Per-sample gradients in factored form: sample i's gradient of layer ℓ is
/// left[ℓ][:, i] · right[ℓ][:, i]ᵀ, and its bias gradient is left[ℓ][:, i].
pub struct PerSampleGrads {
    pub left: Vec<DMatrix<f64>>,
    pub right: Vec<DMatrix<f64>>,
}

impl PerSampleGrads {
    pub fn samples(&self) -> usize {
        self.left[0].ncols()
    }

    pub fn matrix(&self, l: usize, i: usize) -> DMatrix<f64> {
        self.left[l].column(i) * self.right[l].column(i).transpose()
    }
}

pub struct LossGrad {
    pub loss: f64,
    pub grads: Weights,
    pub per_sample: Option<PerSampleGrads>,
}

/// Mean loss over the batch and its exact gradient.
pub fn loss_and_grad(
    w: &Weights,
    spec: &NetworkSpec,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kind: LossKind,
    per_sample: bool,
) -> Result<LossGrad> {
    let fp = forward(w, spec, x)?;
    let (ls, dl) = loss_terms(fp.output(), y, kind)?;
    let p = ls.len() as f64;
    let loss = ls.iter().sum::<f64>() / p;
    // Per-sample loss derivative; the batch mean divides by P at accumulation.
    let mut delta = dl;
    let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(w.tensors.len());
    let mut left = Vec::new();
    let mut right = Vec::new();
    for l in (0..spec.n_layers()).rev() {
        let m = spec.multiplier(l);
        let ti = spec.tensor_index(l);
        let z = &fp.zs[l];
        let mut gw = &delta * z.transpose();
        gw *= m / p;
        if spec.use_bias {
            let gb = DMatrix::from_fn(delta.nrows(), 1, |r, _| delta.row(r).sum() / p);
            grads.push(gb);
        }
        grads.push(gw);
        if per_sample {
            left.push(&delta * m);
            right.push(z.clone());
        }
        if l > 0 {
            let mut dz = w.tensors[ti].tr_mul(&delta);
            dz *= m;
            let h = &fp.hs[l - 1];
            dz.zip_apply(h, |d, hv| *d *= spec.activation.derivative(hv));
            delta = dz;
        }
    }
    grads.reverse();
    left.reverse();
    right.reverse();
    let ps = per_sample.then_some(PerSampleGrads { left, right });
    Ok(LossGrad { loss, grads: Weights { tensors: grads }, per_sample: ps })
}

/// Linear warmup, constant phase, linear cooldown to zero.
pub fn wsd_lr(t: usize, total: usize, peak: f64, warmup_frac: f64, cooldown_frac: f64) -> f64 {
    let (t, tf) = (t as f64, total as f64);
    let warm = warmup_frac * tf;
    let cool = cooldown_frac * tf;
    let mut f = 1.0f64;
    if warm > 0.0 && t < warm {
        f = f.min(t / warm);
    }
    if cool > 0.0 && t > tf - cool {
        f = f.min((tf - t) / cool);
    }
    peak * f.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsSchedule {
    /// Quintic steps followed by two cubic polishing steps.
    #[default]
    Default,
    Quintic,
}

const QUINTIC: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Newton–Schulz iteration toward msgn(X); X should have spectral norm ≤ 1.
pub fn newton_schulz(x: &DMatrix<f64>, iters: usize, schedule: NsSchedule) -> DMatrix<f64> {
    let tall = x.nrows() > x.ncols();
    let mut y = if tall { x.transpose() } else { x.clone() };
    let cubic = match schedule {
        NsSchedule::Default => iters.min(2),
        NsSchedule::Quintic => 0,
    };
    for it in 0..iters {
        let a = &y * y.transpose();
        y = if it < iters - cubic {
            let (qa, qb, qc) = QUINTIC;
            let poly = &a * qb + &a * &a * qc;
            &y * qa + poly * &y
        } else {
            &y * 1.5 - (&a * &y) * 0.5
        };
    }
    if tall {
        y.transpose()
    } else {
        y
    }
}

/// Power-iteration estimate of the largest singular value.
pub fn spectral_norm_estimate(m: &DMatrix<f64>, iters: usize) -> f64 {
    let mut rng = stream(0, "power-iteration");
    let mut v = DVector::from_fn(m.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut s = 0.0;
    for _ in 0..iters {
        let nv = v.norm();
        if nv == 0.0 {
            return 0.0;
        }
        v /= nv;
        let u = m * &v;
        s = u.norm();
        v = m.tr_mul(&u);
    }
    s
}

/// Spectrally pre-normalized Newton–Schulz orthogonalization.
pub fn orthogonalize(m: &DMatrix<f64>, iters: usize, schedule: NsSchedule) -> DMatrix<f64> {
    let s = spectral_norm_estimate(m, 30);
    newton_schulz(&(m / (1.01 * s + 1e-7)), iters, schedule)
}

/// Exact matrix sign U Vᵀ from a singular value decomposition.
pub fn msgn_exact(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub peak_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_ns")]
    pub ns_iters: usize,
    #[serde(default)]
    pub ns_schedule: NsSchedule,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_cooldown")]
    pub cooldown_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub per_layer_lr_multipliers: Option<Vec<f64>>,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_ns() -> usize {
    5
}
fn default_warmup() -> f64 {
    0.04
}
fn default_cooldown() -> f64 {
    0.2
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, peak_lr: f64, steps: usize, batch_size: usize) -> Self {
        Self {
            kind,
            peak_lr,
            momentum: if kind == OptimizerKind::Muon { 0.95 } else { 0.9 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ns_iters: 5,
            ns_schedule: NsSchedule::Default,
            warmup_frac: 0.04,
            cooldown_frac: 0.2,
            steps,
            batch_size,
            per_layer_lr_multipliers: None,
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.momentum) && unit(self.beta1) && unit(self.beta2)) {
            return invalid("momentum coefficients must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.ns_iters == 0 || self.batch_size == 0 {
            return invalid("eps, ns_iters and batch_size must be positive");
        }
        if !(self.peak_lr >= 0.0) {
            return invalid("peak_lr must be nonnegative");
        }
        let s = self.warmup_frac + self.cooldown_frac;
        if self.warmup_frac < 0.0 || self.cooldown_frac < 0.0 || s > 1.0 {
            return invalid("schedule fractions must be nonnegative and sum to at most 1");
        }
        if let Some(m) = &self.per_layer_lr_multipliers {
            if m.len() != spec.n_layers() {
                return invalid("one lr multiplier per layer is required");
            }
        }
        Ok(())
    }
}

enum SlotState {
    Sgd(DMatrix<f64>),
    Adam(DMatrix<f64>, DMatrix<f64>),
    Muon(DMatrix<f64>),
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    lr_scale: Vec<f64>,
    state: Vec<SlotState>,
    t: usize,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, spec: &NetworkSpec, w: &Weights) -> Result<Self> {
        cfg.validate(spec)?;
        let params = spec.params();
        let mut lr_scale = Vec::new();
        let mut state = Vec::new();
        for (p, t) in params.iter().zip(&w.tensors) {
            let mult = cfg.per_layer_lr_multipliers.as_ref().map_or(1.0, |m| m[p.layer]);
            lr_scale.push(spec.layer_lr(p.layer) * mult);
            let z = || DMatrix::zeros(t.nrows(), t.ncols());
            let hidden_matrix = p.matrix && p.layer > 0 && p.layer < spec.depth;
            state.push(match cfg.kind {
                OptimizerKind::Sgd => SlotState::Sgd(z()),
                OptimizerKind::Muon if hidden_matrix => SlotState::Muon(z()),
                _ => SlotState::Adam(z(), z()),
            });
        }
        Ok(Self { cfg: cfg.clone(), lr_scale, state, t: 0 })
    }

    /// Apply one update with the scheduled global lr.
    pub fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t as i32), 1.0 - c.beta2.powi(self.t as i32));
        for ((wt, gt), (st, &scale)) in w.tensors.iter_mut().zip(&g.tensors).zip(self.state.iter_mut().zip(&self.lr_scale)) {
            let lr = lr * scale;
            match st {
                SlotState::Sgd(v) => {
                    *v *= c.momentum;
                    *v += gt;
                    wt.zip_apply(v, |a, b| *a -= lr * b);
                }
                SlotState::Adam(m, v) => {
                    m.zip_apply(gt, |a, b| *a = c.beta1 * *a + (1.0 - c.beta1) * b);
                    v.zip_apply(gt, |a, b| *a = c.beta2 * *a + (1.0 - c.beta2) * b * b);
                    for ((x, &mm), &vv) in wt.iter_mut().zip(m.iter()).zip(v.iter()) {
                        *x -= lr * (mm / bc1) / ((vv / bc2).sqrt() + c.eps);
                    }
                }
                SlotState::Muon(m) => {
                    m.zip_apply(gt, |a, b| *a = c.momentum * *a + (1.0 - c.momentum) * b);
                    let o = orthogonalize(m, c.ns_iters, c.ns_schedule);
                    let shape = (wt.nrows() as f64 / wt.ncols() as f64).sqrt();
                    wt.zip_apply(&o, |a, b| *a -= lr * shape * b);
                }
            }
        }
    }
}

pub fn sgd_step(w: &mut DMatrix<f64>, g: &DMatrix<f64>, velocity: &mut DMatrix<f64>, momentum: f64, lr: f64) {
    *velocity *= momentum;
    *velocity += g;
    w.zip_apply(velocity, |a, b| *a -= lr * b);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BallIndicator,
    KIndex,
    SingleIndex,
    ExternalCsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub noise: f64,
    pub loss: LossKind,
    /// Fixed training set size; online sampling when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default = "default_val")]
    pub val_size: usize,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub standardize: bool,
}

fn default_k() -> usize {
    1
}
fn default_val() -> usize {
    4096
}

impl TaskSpec {
    pub fn new(kind: TaskKind, d: usize, loss: LossKind) -> Self {
        Self { kind, d, k: 1, noise: 0.0, loss, train_size: None, val_size: 4096, path: None, standardize: false }
    }

    pub fn ball_indicator(d: usize) -> Self {
        Self::new(TaskKind::BallIndicator, d, LossKind::Bce)
    }
}

pub struct Task {
    pub spec: TaskSpec,
    threshold: f64,
    beta: DVector<f64>,
    data: Option<(DMatrix<f64>, DMatrix<f64>)>,
    data_seed: u64,
}

fn columns(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), idx.len(), |r, c| x[(r, idx[c])])
}

impl Task {
    /// `data_seed` fixes the teacher, the validation set and any fixed training set.
    pub fn new(spec: &TaskSpec, data_seed: u64) -> Result<Self> {
        if spec.d == 0 {
            return invalid("task dimension must be positive");
        }
        if spec.kind == TaskKind::KIndex && (spec.k == 0 || spec.k > spec.d) {
            return invalid(format!("k={} must lie in [1, d={}]", spec.k, spec.d));
        }
        if spec.noise < 0.0 {
            return invalid("noise must be nonnegative");
        }
        let threshold = match spec.kind {
            TaskKind::BallIndicator => ChiSquared::new(spec.d as f64)
                .map_err(|e| Error::Invalid(e.to_string()))?
                .inverse_cdf(0.5),
            _ => 0.0,
        };
        let mut rng = stream(data_seed, "task/teacher");
        let mut beta = DVector::from_fn(spec.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        beta /= beta.norm();
        let data = match spec.kind {
            TaskKind::ExternalCsv => Some(load_csv(spec)?),
            _ => None,
        };
        let mut task = Self { spec: spec.clone(), threshold, beta, data, data_seed };
        if let (Some(m), None) = (spec.train_size, &task.data) {
            let mut r = stream(data_seed, "task/train");
            let (x, y) = task.draw(m, &mut r);
            // Validation draws use their own stream, so prepend nothing here.
            task.data = Some((x, y));
        }
        Ok(task)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn label(&self, x: &[f64], noise: f64) -> f64 {
        match self.spec.kind {
            TaskKind::BallIndicator => {
                let r: f64 = x.iter().map(|v| v * v).sum();
                if r <= self.threshold {
                    1.0
                } else {
                    0.0
                }
            }
            TaskKind::KIndex => {
                let s: f64 = x[..self.spec.k].iter().map(|v| v * v).sum();
                (self.spec.d as f64 / (4.0 * self.spec.k as f64) * s).sqrt() + self.spec.noise * noise
            }
            TaskKind::SingleIndex => {
                let p: f64 = x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum();
                p.max(0.0) + self.spec.noise * noise
            }
            TaskKind::ExternalCsv => unreachable!(),
        }
    }

    fn draw(&self, m: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.spec.d;
        let scale = if self.spec.kind == TaskKind::KIndex { 2.0 / (d as f64).sqrt() } else { 1.0 };
        let mut x = DMatrix::zeros(d, m);
        let mut y = DMatrix::zeros(1, m);
        for i in 0..m {
            for r in 0..d {
                x[(r, i)] = scale * rng.sample::<f64, _>(StandardNormal);
            }
            let xi: Vec<f64> = x.column(i).iter().copied().collect();
            y[(0, i)] = self.label(&xi, rng.sample::<f64, _>(StandardNormal));
        }
        (x, y)
    }

    /// One training batch.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.data {
            Some((x, y)) => {
                let (lo, hi) = self.train_range(x.ncols());
                let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(lo..hi)).collect();
                (columns(x, &idx), columns(y, &idx))
            }
            None => self.draw(batch, rng),
        }
    }

    fn train_range(&self, total: usize) -> (usize, usize) {
        if self.spec.kind == TaskKind::ExternalCsv {
            (self.spec.val_size.min(total - 1), total)
        } else {
            (0, total)
        }
    }

    /// Fixed validation set determined by the data seed.
    pub fn validation(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        match (&self.data, self.spec.kind) {
            (Some((x, y)), TaskKind::ExternalCsv) => {
                let idx: Vec<usize> = (0..self.spec.val_size.min(x.ncols() - 1)).collect();
                (columns(x, &idx), columns(y, &idx))
            }
            _ => {
                let mut rng = stream(self.data_seed, "task/val");
                self.draw(self.spec.val_size, &mut rng)
            }
        }
    }
}

/// Rows of (features…, label); the first `val_size` rows form the validation split.
fn load_csv(spec: &TaskSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let path = spec.path.as_ref().ok_or_else(|| Error::Config("external_csv needs a path".into()))?;
    let mut rd = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != spec.d + 1 {
            return invalid(format!("row has {} fields, expected d+1 = {}", rec.len(), spec.d + 1));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        xs.extend_from_slice(&vals[..spec.d]);
        ys.push(vals[spec.d]);
    }
    if ys.len() < 2 {
        return invalid("csv needs at least two rows");
    }
    let mut x = DMatrix::from_column_slice(spec.d, ys.len(), &xs);
    if spec.standardize {
        for mut row in x.row_iter_mut() {
            let m = row.mean();
            let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
            row.apply(|v| *v = (*v - m) / if sd > 0.0 { sd } else { 1.0 });
        }
    }
    Ok((x, DMatrix::from_row_slice(1, ys.len(), &ys)))
}

pub fn sample_task(task: &Task, batch: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    task.sample(batch, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        *self == Self::Completed
    }
}

/// One element of the raw iterate stream; `train_loss` is absent at t = T.
pub struct Iterate<'a> {
    pub step: usize,
    pub weights: &'a Weights,
    pub train_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub status: RunStatus,
    pub weights: Weights,
    pub losses: Vec<f64>,
}

pub const DIVERGENCE_LOSS: f64 = 1e6;

fn diverged(l: f64) -> bool {
    !l.is_finite() || l.abs() > DIVERGENCE_LOSS
}

/// Train for `opt.steps` steps, streaming (t, w_t, loss) to `observer`.
pub fn train(
    spec: &NetworkSpec,
    opt: &OptimizerConfig,
    task: &Task,
    seed: u64,
    mut observer: impl FnMut(Iterate<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if task.spec.d != spec.input_dim {
        return invalid("task dimension differs from network input_dim");
    }
    let mut w = init_network(spec, seed)?;
    let mut optim = Optimizer::new(opt, spec, &w)?;
    let mut rng = stream(seed, "batches");
    let mut losses = Vec::with_capacity(opt.steps);
    for t in 0..opt.steps {
        let (x, y) = task.sample(opt.batch_size, &mut rng);
        let lg = loss_and_grad(&w, spec, &x, &y, task.spec.loss, false)?;
        if diverged(lg.loss) {
            return Ok(TrainOutcome { status: RunStatus::Diverged { step: t }, weights: w, losses });
        }
        losses.push(lg.loss);
        observer(Iterate { step: t, weights: &w, train_loss: Some(lg.loss) })?;
        let lr = wsd_lr(t, opt.steps, opt.peak_lr, opt.warmup_frac, opt.cooldown_frac);
        optim.step(&mut w, &lg.grads, lr);
        if !w.is_finite() {
            return Ok(TrainOutcome { status: RunStatus::Diverged { step: t + 1 }, weights: w, losses });
        }
    }
    observer(Iterate { step: opt.steps, weights: &w, train_loss: None })?;
    Ok(TrainOutcome { status: RunStatus::Completed, weights: w, losses })
}

/// Full-set loss and gradient on a fixed evaluation set.
pub struct ValidationSet {
    pub spec: NetworkSpec,
    pub loss: LossKind,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl ValidationSet {
    pub fn new(spec: &NetworkSpec, task: &Task) -> Self {
        let (x, y) = task.validation();
        Self { spec: spec.clone(), loss: task.spec.loss, x, y }
    }

    pub fn loss(&self, w: &Weights) -> Result<f64> {
        loss(w, &self.spec, &self.x, &self.y, self.loss)
    }

    pub fn loss_and_grad(&self, w: &Weights, per_sample: bool) -> Result<LossGrad> {
        loss_and_grad(w, &self.spec, &self.x, &self.y, self.loss, per_sample)
    }
}
