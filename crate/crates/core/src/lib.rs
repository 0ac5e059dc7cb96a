//! Implied volatility surface construction from sparse option quotes.
//!
//! The pipeline transfers smile structure from a parametric SABR fit into a
//! multitask Gaussian process: per-expiry SABR calibrations are interpolated
//! into a parameter term structure, sampled on a dense synthetic grid, and
//! used as a source task alongside the sparse market quotes (the target
//! task). An intrinsic coregionalization model with learned task embeddings
//! couples the two tasks; hyperparameters are fit by MAP with a hierarchical
//! prior on the embeddings.
//!
//! Modules follow the data flow: `market_data` (quote ingestion and the
//! synthetic market design), `black_scholes` (pricing and implied vol),
//! `heston` (ground-truth surface generation), `sabr` (slice calibration and
//! the synthetic source grid), `optim` (Nelder-Mead, L-BFGS and the interval
//! transform), `gp` / `mtgp` (single-task and multitask regression),
//! `diagnostics` (error metrics and no-arbitrage checks) and `bench` (the
//! experiment driver behind the CLI).

pub mod black_scholes;
pub mod bench;
pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod heston;
pub mod market_data;
pub mod mtgp;
pub mod optim;
pub mod sabr;

pub use error::{IvsError, Result};
