//! EMA-smoothed trajectories and the stepwise linearization of a metric
//! along them.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::table::{fmt_float, write_csv};
use crate::trainer::{self, NetworkSpec, OptimizerConfig, ParamInfo, RunStatus, Task, ValidationSet, Weights};

/// EMA decay and checkpoint stride, both warmed up linearly over `warmup_steps`.
/// The decay is interpolated in the effective window (1 − α)⁻¹.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub warmup_steps: usize,
    pub tau_start: usize,
    pub tau_end: usize,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self { alpha_start: 0.98, alpha_end: 0.9995, warmup_steps: 2000, tau_start: 2, tau_end: 10 }
    }
}

impl EmaSchedule {
    /// No smoothing, every step recorded.
    pub fn raw() -> Self {
        Self { alpha_start: 0.0, alpha_end: 0.0, warmup_steps: 0, tau_start: 1, tau_end: 1 }
    }

    pub fn with_stride(tau: usize) -> Self {
        Self { tau_start: tau, tau_end: tau, ..Self::raw() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..1.0).contains(&a);
        if !ok(self.alpha_start) || !ok(self.alpha_end) {
            return invalid("EMA decay must lie in [0, 1)");
        }
        if self.tau_start == 0 || self.tau_end == 0 {
            return invalid("strides must be at least 1");
        }
        Ok(())
    }

    fn progress(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn window(&self, t: usize) -> f64 {
        let (w0, w1) = (1.0 / (1.0 - self.alpha_start), 1.0 / (1.0 - self.alpha_end));
        w0 + (w1 - w0) * self.progress(t)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - 1.0 / self.window(t)
    }

    pub fn stride(&self, t: usize) -> usize {
        let s = self.tau_start as f64 + (self.tau_end as f64 - self.tau_start as f64) * self.progress(t);
        (s.round() as usize).max(1)
    }

    /// Checkpoint steps: 0, then by the current stride, always ending at `total`.
    pub fn checkpoints(&self, total: usize) -> Vec<usize> {
        let mut v = vec![0];
        let mut t = 0;
        while t < total {
            t = (t + self.stride(t)).min(total);
            v.push(t);
        }
        v
    }
}

/// ema′ = α·ema + (1 − α)·w.
pub fn ema_step(ema: &mut Weights, w: &Weights, alpha: f64) {
    for (e, x) in ema.tensors.iter_mut().zip(&w.tensors) {
        e.zip_apply(x, |a, b| *a = alpha * *a + (1.0 - alpha) * b);
    }
}

/// Evaluation metric with its gradient.
pub trait Metric {
    fn eval(&self, w: &Weights) -> Result<(f64, Weights)>;
}

impl Metric for ValidationSet {
    fn eval(&self, w: &Weights) -> Result<(f64, Weights)> {
        let lg = self.loss_and_grad(w, false)?;
        Ok((lg.loss, lg.grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ParamInfo>,
    pub width: usize,
    pub hps: Vec<(String, f64)>,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub ema: Weights,
    pub grad: Weights,
    pub delta: Weights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub manifest: Manifest,
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<f64>,
    pub diverged: bool,
}

/// Streaming recorder: feed every iterate in order, then call `finish`.
pub struct Recorder<'a, M: Metric> {
    schedule: EmaSchedule,
    total: usize,
    metric: &'a M,
    ema: Option<Weights>,
    next: usize,
    raw: Vec<(usize, Weights, Weights)>,
    metrics: Vec<f64>,
    diverged: bool,
}

impl<'a, M: Metric> Recorder<'a, M> {
    pub fn new(schedule: &EmaSchedule, total: usize, metric: &'a M) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { schedule: schedule.clone(), total, metric, ema: None, next: 0, raw: Vec::new(), metrics: Vec::new(), diverged: false })
    }

    pub fn push(&mut self, step: usize, w: &Weights) -> Result<()> {
        match &mut self.ema {
            None => {
                if step != 0 {
                    return invalid("the first iterate must be step 0");
                }
                self.ema = Some(w.clone());
            }
            Some(e) => ema_step(e, w, self.schedule.alpha(step)),
        }
        if step == self.next && !self.diverged {
            let ema = self.ema.as_ref().unwrap();
            let (m, g) = self.metric.eval(ema)?;
            if !m.is_finite() || !g.is_finite() {
                self.diverged = true;
                return Ok(());
            }
            self.metrics.push(m);
            self.raw.push((step, ema.clone(), g));
            self.next = if step >= self.total { usize::MAX } else { (step + self.schedule.stride(step)).min(self.total) };
        }
        Ok(())
    }

    pub fn finish(self, manifest: Manifest) -> TrajectoryRecord {
        let n = self.raw.len();
        let emas: Vec<Weights> = self.raw.iter().map(|r| r.1.clone()).collect();
        let checkpoints = self
            .raw
            .into_iter()
            .enumerate()
            .map(|(i, (step, ema, grad))| {
                let delta = if i + 1 < n { emas[i + 1].sub(&ema) } else { ema.zeros_like() };
                Checkpoint { step, ema, grad, delta }
            })
            .collect();
        TrajectoryRecord { manifest, checkpoints, metrics: self.metrics, diverged: self.diverged }
    }
}

/// Train one cell and record its smoothed trajectory on the task's validation set.
pub fn record_training(
    spec: &NetworkSpec,
    opt: &OptimizerConfig,
    task: &Task,
    seed: u64,
    schedule: &EmaSchedule,
    val: &ValidationSet,
    hps: Vec<(String, f64)>,
    config_hash: &str,
) -> Result<(TrajectoryRecord, RunStatus)> {
    let mut rec = Recorder::new(schedule, opt.steps, val)?;
    let out = trainer::train(spec, opt, task, seed, |it| rec.push(it.step, it.weights))?;
    let manifest = Manifest {
        params: spec.params(),
        width: spec.width,
        hps,
        seed,
        config_hash: config_hash.to_owned(),
        steps: opt.steps,
    };
    let mut r = rec.finish(manifest);
    r.diverged |= out.status != RunStatus::Completed;
    Ok((r, out.status))
}

/// δφ = ⟨g, δw⟩ over every tensor.
pub fn linearized_step(g: &Weights, dw: &Weights) -> f64 {
    g.dot(dw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedSeries {
    pub steps: Vec<usize>,
    pub delta_phi: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub phi: f64,
}

pub fn linearized_total(rec: &TrajectoryRecord) -> LinearizedSeries {
    let mut acc = 0.0;
    let mut s = LinearizedSeries { steps: vec![], delta_phi: vec![], cumulative: vec![], phi: 0.0 };
    for c in &rec.checkpoints {
        let d = linearized_step(&c.grad, &c.delta);
        acc += d;
        s.steps.push(c.step);
        s.delta_phi.push(d);
        s.cumulative.push(acc);
    }
    s.phi = acc;
    s
}

/// Metric change between the first and last checkpoints.
pub fn loss_delta(rec: &TrajectoryRecord) -> f64 {
    match (rec.metrics.first(), rec.metrics.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    }
}

const MAGIC: &[u8; 8] = b"HPTRAJ01";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    manifest: Manifest,
    checkpoints: usize,
    metrics: Vec<f64>,
    diverged: bool,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_row_major(out: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_row_major(inp: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    inp.read_exact(&mut buf)?;
    Ok(DMatrix::from_row_iterator(rows, cols, buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))))
}

/// Binary trajectory plus a JSON manifest next to it.
pub fn write_binary(rec: &TrajectoryRecord, path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for c in &rec.checkpoints {
        f.write_all(&(c.step as u64).to_le_bytes())?;
        for i in 0..rec.manifest.params.len() {
            write_row_major(&mut f, &c.ema.tensors[i])?;
            write_row_major(&mut f, &c.grad.tensors[i])?;
            write_row_major(&mut f, &c.delta.tensors[i])?;
        }
    }
    f.flush()?;
    let side = Sidecar {
        manifest: rec.manifest.clone(),
        checkpoints: rec.checkpoints.len(),
        metrics: rec.metrics.clone(),
        diverged: rec.diverged,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<TrajectoryRecord> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Invalid(format!("{} is not a trajectory file", path.display())));
    }
    let mut checkpoints = Vec::with_capacity(side.checkpoints);
    for _ in 0..side.checkpoints {
        let mut s = [0u8; 8];
        f.read_exact(&mut s)?;
        let (mut e, mut g, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for p in &side.manifest.params {
            e.push(read_row_major(&mut f, p.rows, p.cols)?);
            g.push(read_row_major(&mut f, p.rows, p.cols)?);
            d.push(read_row_major(&mut f, p.rows, p.cols)?);
        }
        checkpoints.push(Checkpoint {
            step: u64::from_le_bytes(s) as usize,
            ema: Weights { tensors: e },
            grad: Weights { tensors: g },
            delta: Weights { tensors: d },
        });
    }
    Ok(TrajectoryRecord { manifest: side.manifest, checkpoints, metrics: side.metrics, diverged: side.diverged })
}

/// CSV of (step, metric, delta_phi, cumulative_phi).
pub fn write_series_csv(rec: &TrajectoryRecord, path: &Path) -> Result<()> {
    let s = linearized_total(rec);
    let rows: Vec<Vec<String>> = (0..s.steps.len())
        .map(|i| vec![s.steps[i].to_string(), fmt_float(rec.metrics[i]), fmt_float(s.delta_phi[i]), fmt_float(s.cumulative[i])])
        .collect();
    write_csv(path, Some(&rec.manifest.config_hash), &["step", "metric", "delta_phi", "cumulative_phi"], &rows)
}
