//! Per-sample spectral components and the mean component index (MCI).
//! Samples whose loss change sits in the leading components at one width
//! tend to do so at other widths too.

use std::collections::BTreeMap;

use hptransfer::decomposition::{overlap_consistency, sample_components, Side};
use hptransfer::trainer::{Activation, NetworkSpec, OptimizerConfig, OptimizerKind, Task, TaskSpec, ValidationSet};
use hptransfer::trajectory::{record_training, EmaSchedule};

fn main() -> hptransfer::Result<()> {
    let mut ts = TaskSpec::ball_indicator(8);
    ts.val_size = 400;
    let task = Task::new(&ts, 0)?;
    let ema = EmaSchedule { alpha_start: 0.8, alpha_end: 0.95, warmup_steps: 100, tau_start: 4, tau_end: 8 };
    let mut tables = BTreeMap::new();
    for width in [32usize, 64, 128] {
        for seed in [0u64, 1] {
            let spec = NetworkSpec::mup(8, width, 1, Activation::Relu, 1, OptimizerKind::Adam);
            let opt = OptimizerConfig::new(OptimizerKind::Adam, 2f64.powi(-5), 200, 32);
            let val = ValidationSet::new(&spec, &task);
            let (rec, _) = record_training(&spec, &opt, &task, seed, &ema, &val, vec![], "")?;
            let tab = sample_components(&rec, &val, 16, None)?;
            let m: Vec<f64> = tab.mci().into_iter().flatten().collect();
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            println!("width {width:>3} seed {seed}: mean MCI {mean:.2}, mean total {:.4}", tab.mean_total());
            tables.insert((width, seed), tab.mci());
        }
    }
    for side in [Side::Top, Side::Bottom] {
        println!("\n{side:?} 10% overlap");
        for ((a, b), v) in overlap_consistency(&tables, 0.1, side)? {
            println!("  {a:>3} vs {b:>3}: {v:.3}");
        }
    }
    Ok(())
}
