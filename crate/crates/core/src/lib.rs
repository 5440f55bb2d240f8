//! Tools for studying hyperparameter transfer across network width.
//!
//! The crate trains small μP networks, records EMA-smoothed trajectories,
//! splits their linearized loss into width-stable top-k and residual parts,
//! picks truncation indices, solves random-features ridge asymptotics and
//! simulates compute-optimal grid search.
//!
//! Most users start from the runnable programs under `examples/` or the
//! `hptx` binary.

pub mod decomposition;
pub mod error;
pub mod experiment;
pub mod gridsim;
pub mod hpcore;
pub mod rf;
pub mod rng;
pub mod table;
pub mod trainer;
pub mod trajectory;
pub mod truncation;

pub use error::{Error, Result};
