//! Train one μP MLP on the ball-indicator task, record its smoothed
//! trajectory, and split the linearized loss change into top-k parts.

use hptransfer::decomposition::{decompose_record, topk_series};
use hptransfer::trainer::{Activation, NetworkSpec, OptimizerConfig, OptimizerKind, Task, TaskSpec, ValidationSet};
use hptransfer::trajectory::{linearized_total, loss_delta, record_training, EmaSchedule};

fn main() -> hptransfer::Result<()> {
    let mut ts = TaskSpec::ball_indicator(16);
    ts.val_size = 1024;
    let task = Task::new(&ts, 0)?;
    let ema = EmaSchedule { alpha_start: 0.9, alpha_end: 0.99, warmup_steps: 200, tau_start: 2, tau_end: 5 };

    for width in [64, 256] {
        let spec = NetworkSpec::mup(16, width, 1, Activation::Relu, 1, OptimizerKind::Adam);
        let opt = OptimizerConfig::new(OptimizerKind::Adam, 2f64.powi(-6), 400, 64);
        let val = ValidationSet::new(&spec, &task);
        let (rec, status) = record_training(&spec, &opt, &task, 1, &ema, &val, vec![("lr".into(), opt.peak_lr)], "")?;
        let d = decompose_record(&rec, None)?;
        let lin = linearized_total(&rec);
        println!("width {width}: {status:?}, {} checkpoints", rec.checkpoints.len());
        println!("  loss change {:.4}, linearized {:.4}, trace error {:.1e}", loss_delta(&rec), d.phi, d.max_trace_error);
        println!("  vector parameters contribute {:.4}; series ends at {:.4}", d.vector_part, lin.cumulative.last().copied().unwrap_or(0.0));
        for k in [1, 2, 4, 8, 16, 64] {
            if k <= width {
                println!("  phi^{k:<3} = {:>8.4}  ({:>5.1}% of total)", d.topk(k), 100.0 * d.topk(k) / d.phi);
            }
        }
        let series = topk_series(&rec, 4, None)?;
        let mid = &series[series.len() / 2];
        println!("  at step {}: phi^4 {:.4} of {:.4}", mid.0, mid.1, mid.2);
    }
    Ok(())
}
