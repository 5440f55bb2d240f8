//! Experiment configuration, artifact layout and the commands behind `hptx`.
//!
//! A single TOML file describes a sweep and the analyses run on it. Every
//! artifact lands under `<out>/<hash>/`, where `hash` is a digest of the
//! canonicalized config, so two configs never share outputs.

mod analysis;
mod sweep;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::{Activation, NetworkSpec, NsSchedule, OptimizerConfig, OptimizerKind, TaskSpec};
use crate::trajectory::EmaSchedule;
use crate::truncation::ToleranceConfig;

pub use analysis::{
    cmd_fit, cmd_gridsim_frontier, cmd_gridsim_run, cmd_report, cmd_rf_closed_forms, cmd_rf_curve, cmd_rf_mc,
    cmd_rf_rates, gridsim_surfaces, rf_surfaces, surface_report, SurfaceReport,
};
pub use sweep::{cmd_decompose, cmd_mci, cmd_train, cmd_truncate, sweep_surfaces, tn_table, Cell, TnRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TrainSweep,
    Decompose,
    Truncate,
    Mci,
    Rf,
    Gridsim,
    Fit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Output directory. Not part of the hash.
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub truncate: ToleranceConfig,
    #[serde(default)]
    pub mci: MciConfig,
    #[serde(default)]
    pub rf: Option<RfConfig>,
    #[serde(default)]
    pub gridsim: Option<GridsimConfig>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_out() -> String {
    "runs".into()
}

/// Width × learning-rate × seed sweep of one μP network family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub widths: Vec<usize>,
    /// Peak learning rates; the hp axis is log2 of these.
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub depth: usize,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub use_bias: bool,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_frac: Option<f64>,
    #[serde(default)]
    pub cooldown_frac: Option<f64>,
    #[serde(default)]
    pub ns_schedule: NsSchedule,
    pub task: TaskSpec,
    #[serde(default)]
    pub ema: EmaSchedule,
}

fn one() -> usize {
    1
}
fn relu() -> Activation {
    Activation::Relu
}
fn yes() -> bool {
    true
}

impl SweepConfig {
    pub fn network(&self, width: usize) -> NetworkSpec {
        let out = if self.task.loss == crate::trainer::LossKind::SoftmaxCe { self.task.k.max(2) } else { 1 };
        let mut s = NetworkSpec::mup(self.task.d, width, self.depth, self.activation, out, self.optimizer);
        s.use_bias = self.use_bias;
        s
    }

    pub fn optimizer(&self, lr: f64) -> OptimizerConfig {
        let mut o = OptimizerConfig::new(self.optimizer, lr, self.steps, self.batch_size);
        if let Some(w) = self.warmup_frac {
            o.warmup_frac = w;
        }
        if let Some(c) = self.cooldown_frac {
            o.cooldown_frac = c;
        }
        o.ns_schedule = self.ns_schedule;
        o
    }

    /// hp axis of the sweep: log2 of each learning rate.
    pub fn hp(&self) -> Vec<f64> {
        self.lrs.iter().map(|l| l.log2()).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.widths.is_empty() {
            return bad("sweep.widths is empty");
        }
        if self.lrs.is_empty() || self.lrs.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return bad("sweep.lrs must be a nonempty list of positive rates");
        }
        if self.lrs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep.lrs must be strictly increasing");
        }
        if self.seeds.is_empty() {
            return bad("sweep.seeds is empty");
        }
        if self.steps == 0 {
            return bad("sweep.steps must be positive");
        }
        self.ema.validate().map_err(|e| Error::Config(e.to_string()))?;
        for &w in &self.widths {
            let spec = self.network(w);
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            self.optimizer(self.lrs[0]).validate(&spec).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// k of the over-time split table, capped at each width.
    pub k_fixed: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self { k_fixed: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MciConfig {
    /// Index into `sweep.lrs`; the middle of the grid when absent.
    pub hp_index: Option<usize>,
    pub k_max: usize,
    pub q: f64,
}

impl Default for MciConfig {
    fn default() -> Self {
        Self { hp_index: None, k_max: 256, q: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    pub student: String,
    pub teacher: String,
    pub psi1: f64,
    pub sigma_eps_sq: f64,
    pub psi2: Vec<f64>,
    /// Log-spaced ridge grid.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_count: usize,
    /// Input dimension and trial count of the finite-size check.
    pub mc_d: usize,
    pub mc_trials: usize,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            student: "tanh".into(),
            teacher: "relu".into(),
            psi1: 4.0,
            sigma_eps_sq: 1.0 / 16.0,
            psi2: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0],
            lambda_min: 1e-3,
            lambda_max: 10.0,
            lambda_count: 41,
            mc_d: 100,
            mc_trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridsimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub tau_sc: f64,
    pub h: usize,
    /// Cost exponent: a run at width n costs n^r.
    pub r: f64,
    pub budget_min: f64,
    pub budget_max: f64,
    pub per_decade: usize,
    pub placements: usize,
}

impl Default for GridsimConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            a: 1.0,
            b: 1.0,
            tau_sc: 2.0,
            h: 1,
            r: 2.0,
            budget_min: 1e6,
            budget_max: 1e11,
            per_decade: 3,
            placements: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub input: String,
    #[serde(default = "col_x")]
    pub x: String,
    #[serde(default = "col_y")]
    pub y: String,
    /// Also fit y = C n^e + y∞.
    #[serde(default)]
    pub offset: bool,
}

fn col_x() -> String {
    "width".into()
}
fn col_y() -> String {
    "gap".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceSource {
    Sweep,
    Csv,
    Gridsim,
    Rf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub source: SurfaceSource,
    /// CSV with columns width, hp, loss when `source = "csv"`.
    pub path: Option<String>,
    pub argmin: crate::hpcore::ArgminMode,
    /// Widths sampled from the synthetic family when `source = "gridsim"`.
    pub widths: Vec<u64>,
    /// Points on the hp axis for synthetic sources.
    pub grid_points: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            source: SurfaceSource::Sweep,
            path: None,
            argmin: crate::hpcore::ArgminMode::Parabolic,
            widths: (3..=12).map(|k| 1u64 << k).collect(),
            grid_points: 201,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        if self.decompose.k_fixed == 0 {
            return Err(Error::Config("decompose.k_fixed must be positive".into()));
        }
        if !(self.mci.q > 0.0 && self.mci.q <= 0.5) || self.mci.k_max == 0 {
            return Err(Error::Config("mci.q must lie in (0, 0.5] and mci.k_max be positive".into()));
        }
        if let Some(g) = &self.gridsim {
            if !(g.budget_min > 0.0 && g.budget_max > g.budget_min) || g.per_decade == 0 {
                return Err(Error::Config("gridsim budgets must satisfy 0 < budget_min < budget_max".into()));
            }
        }
        if let Some(r) = &self.rf {
            if r.psi2.is_empty() || r.psi2.iter().any(|p| !(*p > 0.0)) {
                return Err(Error::Config("rf.psi2 must be a nonempty list of positive ratios".into()));
            }
            if !(r.lambda_min > 0.0 && r.lambda_max > r.lambda_min) || r.lambda_count < 2 {
                return Err(Error::Config("rf lambda grid needs 0 < lambda_min < lambda_max and 2+ points".into()));
            }
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form, with the output directory left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sweep(&self) -> Result<&SweepConfig> {
        self.sweep.as_ref().ok_or_else(|| Error::Config("config has no [sweep] section".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Diverged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub command: String,
    pub cell: String,
    pub status: CellStatus,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Append-only JSON-lines record of every cell a command touched.
pub struct RunLedger {
    path: PathBuf,
    lock: Mutex<()>,
}

impl RunLedger {
    pub fn open(path: PathBuf) -> Self {
        Self { path, lock: Mutex::new(()) }
    }

    pub fn append(&self, e: &LedgerEntry) -> Result<()> {
        let _g = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(d) = self.path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(e)?)?;
        Ok(())
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(vec![]);
        }
        let text = std::fs::read_to_string(&self.path)?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Latest entry per cell for one command.
    pub fn latest(&self, command: &str) -> Result<BTreeMap<String, LedgerEntry>> {
        let mut m = BTreeMap::new();
        for e in self.entries()? {
            if e.command == command {
                m.insert(e.cell.clone(), e);
            }
        }
        Ok(m)
    }
}

/// What a command produced. Exit status 3 when anything is missing or failed.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub failed: Vec<String>,
}

impl Outcome {
    pub fn add(&mut self, p: PathBuf) {
        self.artifacts.push(p);
    }

    pub fn missing(&self) -> Vec<&PathBuf> {
        self.artifacts.iter().filter(|p| !p.exists()).collect()
    }

    pub fn complete(&self) -> bool {
        self.failed.is_empty() && self.missing().is_empty()
    }
}

/// Resolved config, output root and run options shared by all commands.
pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub root: PathBuf,
    pub force: bool,
    pool: rayon::ThreadPool,
    pub ledger: RunLedger,
}

impl Context {
    pub fn new(mut config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>, workers: Option<usize>, force: bool) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        let hash = config.hash();
        let base = out.unwrap_or_else(|| PathBuf::from(&config.out));
        let root = base.join(&hash[..16]);
        std::fs::create_dir_all(&root)?;
        let canon = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(root.join("config.toml"), canon)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let ledger = RunLedger::open(root.join("ledger.jsonl"));
        Ok(Self { config, hash, root, force, pool, ledger })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
kind = "train_sweep"
seed = 3
[sweep]
widths = [8, 16]
lrs = [0.01, 0.02]
seeds = [0]
optimizer = "adam"
steps = 20
batch_size = 8
[sweep.task]
kind = "ball_indicator"
d = 4
loss = "bce"
val_size = 64
"#;

    #[test]
    fn parse_and_hash() {
        let c = ExperimentConfig::from_toml(MINI).unwrap();
        assert_eq!(c.sweep().unwrap().widths, vec![8, 16]);
        let h = c.hash();
        assert_eq!(h.len(), 64);
        let mut moved = c.clone();
        moved.out = "elsewhere".into();
        assert_eq!(moved.hash(), h);
        let mut reseeded = c.clone();
        reseeded.seed = 4;
        assert_ne!(reseeded.hash(), h);
        // Defaults written out explicitly hash the same.
        let explicit = MINI.replace("[sweep.task]", "depth = 1\n[sweep.task]");
        assert_eq!(ExperimentConfig::from_toml(&explicit).unwrap().hash(), h);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(ExperimentConfig::from_toml(&MINI.replace("widths = [8, 16]", "widths = []")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&format!("{MINI}\nbogus = 1")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&MINI.replace("steps = 20", "steps = 20\nstep = 2")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(&MINI.replace("[0.01, 0.02]", "[0.02, 0.01]")), Err(Error::Config(_))));
    }

    #[test]
    fn ledger_is_append_only() {
        let dir = std::env::temp_dir().join(format!("hptx-ledger-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let l = RunLedger::open(dir.join("l.jsonl"));
        let e = |s| LedgerEntry { command: "train".into(), cell: "a".into(), status: s, seconds: 0.0, artifacts: vec![], message: None };
        l.append(&e(CellStatus::Failed)).unwrap();
        l.append(&e(CellStatus::Done)).unwrap();
        assert_eq!(l.entries().unwrap().len(), 2);
        assert_eq!(l.latest("train").unwrap()["a"].status, CellStatus::Done);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
