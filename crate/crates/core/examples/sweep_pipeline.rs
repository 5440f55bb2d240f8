//! The full sweep pipeline driven by a TOML config: train every cell, build
//! the top-k profile, pick truncation indices, and report the transfer gaps.
//!
//! Artifacts land under `runs/<config hash>/`. The same steps are available
//! from the `hptx` binary:
//!
//! ```text
//! hptx --config examples/configs/tiny.toml train
//! hptx --config examples/configs/tiny.toml decompose
//! hptx --config examples/configs/tiny.toml truncate
//! hptx --config examples/configs/tiny.toml report
//! ```

use std::path::PathBuf;

use hptransfer::experiment::{self as ex, Context, ExperimentConfig};

fn main() -> hptransfer::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/tiny.toml").into());
    let cfg = ExperimentConfig::load(&PathBuf::from(path))?;
    let ctx = Context::new(cfg, None, None, None, false)?;
    println!("artifacts in {}", ctx.root.display());
    for (name, step) in [
        ("train", ex::cmd_train as fn(&Context) -> hptransfer::Result<ex::Outcome>),
        ("decompose", ex::cmd_decompose),
        ("truncate", ex::cmd_truncate),
        ("report", ex::cmd_report),
    ] {
        let o = step(&ctx)?;
        println!("{name}: {} artifacts, {} failures", o.artifacts.len(), o.failed.len());
    }
    let report = std::fs::read_to_string(ctx.path("report.json"))?;
    println!("{report}");
    Ok(())
}
