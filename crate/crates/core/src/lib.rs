//! Simulation and numerical-verification toolkit for the one-dimensional
//! self-interacting diffusion
//!
//! ```text
//! dX_t = dB_t + g_t(X_t) dt,   g_t(x) = ∫₀ᵗ f(x − X_s) ds,
//! ```
//!
//! with the repelling kernel `f(x) = x/(1+|x|^{1+β})`, `0 < β < 1`, and its
//! nonnegative relatives. The drift at time `t` is the kernel convolved with
//! the occupation measure of the whole path on `[0, t]`, so the integrator is
//! built around a binned occupation measure with a dyadic aggregate that
//! answers far-field drift queries in sublinear time.
//!
//! The crate has three layers:
//!
//! * building blocks: [`kernels`], [`scaling`] (the exponent `α = 2/(1+β)`
//!   and limit constant `c₀`), [`occupation`] (the measure and every drift
//!   evaluation against it), and [`rng`] (a counter-based generator so that
//!   results are reproducible regardless of scheduling);
//! * simulation: [`integrator`] advances one path by Euler–Maruyama with the
//!   history-dependent drift and records level hitting times, [`ensemble`]
//!   fans out over independent paths and pools the scaling-law diagnostics;
//! * certification: [`lemmalab`] checks the deterministic and probabilistic
//!   facts the asymptotic analysis relies on against brute-force oracles.

pub mod checkpoint;
pub mod ensemble;
pub mod integrator;
pub mod kernels;
pub mod lemmalab;
pub mod occupation;
pub mod rng;
pub mod scaling;
pub mod stats;

pub use kernels::Kernel;
pub use occupation::{DriftMode, DriftQuerySpec, OccupationMeasure};
pub use scaling::ScalingConstants;

/// Errors from domain-level misuse of the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("beta must lie in the open interval (0,1), got {0}")]
    BetaOutOfRange(f64),
    #[error("parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("operation is only defined for the Durrett-Rogers kernel, got {0}")]
    UnsupportedKernel(&'static str),
    #[error("interval [{0}, {1}] is degenerate")]
    DegenerateInterval(f64, f64),
    #[error("grid is invalid: {0}")]
    InvalidGrid(String),
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("lemma 7 requires a*h >= 6 with a, h > 0, got a={a}, h={h}")]
    Lemma7Domain { a: f64, h: f64 },
    #[error("no occupation snapshots were recorded")]
    NoSnapshots,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint is invalid: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
