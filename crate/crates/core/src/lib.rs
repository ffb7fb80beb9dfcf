//! Smoothed ANOVA (SANOVA) with intrinsic CAR spatial smoothing, and a
//! separable multivariate CAR (MCAR) comparator, for areal disease mapping.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: region adjacency, the intrinsic CAR precision and its
//!   spectral factors.
//! * [`design`]: contrast matrices, the orthonormal two-way design and the
//!   induced prior precision of the cell-level effects.
//! * [`models`]: model specifications, log-likelihoods and log-priors.
//! * [`samplers`]: Gibbs and Metropolis-within-Gibbs engines, chain
//!   management, posterior storage and R-hat.
//! * [`simulation`]: the repeated-measures simulation tournament.
//! * [`metrics`]: AMSE, MBIAS, interval coverage and DIC.
//! * [`io`]: file formats, expected-count standardisation, configuration.

pub mod design;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod samplers;
pub mod simulation;

pub use error::{Error, Result};
