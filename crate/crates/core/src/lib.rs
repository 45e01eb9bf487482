//! Deferral rules, oracles and evaluation for classifier cascades.
//!
//! The crate is organized bottom-up:
//!
//! - [`prob`], [`data`], [`rng`], [`par`]: simplex vectors, datasets,
//!   deterministic randomness and the data-parallel helpers.
//! - [`worlds`]: synthetic distributions with known posteriors and the
//!   specialist / label-noise / long-tail transforms.
//! - [`models`]: analytic and trained probabilistic classifiers, the MLP
//!   engine and Adam.
//! - [`deferral`]: scored deferral rules, the K-model cascade executor and
//!   the optimal selector.
//! - [`posthoc`]: features, targets and training for learned deferral rules.
//! - [`eval`]: risk, excess risk, deferral curves, calibration and
//!   brute-force oracles.
//! - [`scenario`]: config-driven experiment runner, plotting and run
//!   comparison.

pub mod data;
pub mod deferral;
pub mod error;
pub mod eval;
pub mod models;
pub mod par;
pub mod posthoc;
pub mod prob;
pub mod rng;
pub mod scenario;
pub mod worlds;

pub use error::{Error, Result};
pub use prob::ProbVector;
pub use rng::RngSeed;
