//! Multi-pitch estimation for noisy sinusoids-in-noise signals, with the
//! pitch structure enforced through entropy-regularized optimal transport.
//!
//! The library provides two convex estimators: a covariance-domain
//! ("stochastic") one operating on sample autocovariances, and a
//! waveform-domain ("deterministic") one operating on the complex signal
//! itself. Both infer a spectral mass distribution over a uniform frequency
//! grid while transporting that mass onto a small set of active pitch
//! candidates. Support identification is followed by a debiasing refit.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`signal`]: synthetic inharmonic multi-pitch signals, noise injection,
//!   analytic signals, autocovariance estimation.
//! - [`grids`]: frequency / pitch-candidate grids and harmonic ground costs.
//! - [`dictionary`]: Fourier measurement operators and data-fit gradients.
//! - [`ot`]: transport-plan machinery and the two proximal solvers.
//! - [`estimators`]: outer optimization loops, pitch extraction, debiasing.
//! - [`evaluation`]: cents errors, gross error rate, 1-D Wasserstein-2.
//! - [`io`]: WAV/CSV signal ingestion and CSV/JSON result emission.

pub mod dictionary;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod grids;
pub mod io;
pub mod mat;
pub mod ot;
pub mod signal;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use error::CoreError;
pub use mat::MatF64;

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex<f64>;

pub type Result<T> = std::result::Result<T, CoreError>;
