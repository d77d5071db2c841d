//! Collaborative multi-task defence toolkit.
//!
//! A self-contained adversarial-robustness workbench: a small tape-based
//! autodiff engine and CNN stack ([`tensor`], [`nn`]), five gradient-based
//! attacks plus a combined dual-head attack ([`attacks`]), the robust
//! label-pair defence with its Classmap detector ([`defence`]), dataset
//! and artifact I/O ([`data`]), and an experiment harness ([`eval`]).
//!
//! Start with the runnable programs under `examples/`; each one exercises
//! a single capability end to end.

mod container;

pub mod data;
pub mod defence;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;

pub mod attacks;

/// Crate version string embedded in reports and containers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Worker-thread cap, taken from the `CMTD_THREADS` environment variable.
/// Falls back to the machine's parallelism when unset or invalid.
pub fn worker_threads() -> usize {
    std::env::var("CMTD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(std::num::NonZeroUsize::get)
                .unwrap_or(1)
        })
}
