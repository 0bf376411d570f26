//! Matrix-free atmospheric tomography for multi-conjugate adaptive optics.
//!
//! Turbulence layers are represented in an orthonormal Daubechies wavelet
//! basis and reconstructed from Shack–Hartmann slopes by solving the MAP
//! normal equations with (preconditioned) conjugate gradients. A diagonal,
//! scale-weighted penalty on the wavelet coefficients stands in for the
//! inverse von Kármán covariance.
//!
//! The crate also carries everything needed to exercise the reconstructor
//! in a closed loop: phase-screen synthesis with frozen flow, geometric
//! NGS/LGS propagation, the Fried-geometry wavefront sensor with
//! spot-elongation noise, least-squares DM fitting, pseudo-open-loop
//! control and Maréchal/long-exposure Strehl evaluation.
//!
//! Module map:
//!  - [`atmosphere`]: von Kármán screens and frozen flow
//!  - [`propagation`]: layer-to-pupil projections and their adjoints
//!  - [`wfs`]: Shack–Hartmann operator, noise model, tip–tilt projector
//!  - [`wavelet`]: 2-D periodic DWT and the diagonal prior
//!  - [`tomography`]: normal operator, CG/PCG, Jacobi preconditioner
//!  - [`fitting`]: DM commands from a reconstructed atmosphere
//!  - [`control`]: POLC controller and the closed-loop simulator
//!  - [`evaluation`]: residual RMS, Strehl, long-exposure summaries
//!  - [`harness`]: configuration, presets, dense oracle, runs and sweeps

pub mod atmosphere;
pub mod control;
pub mod error;
pub mod evaluation;
pub mod fitting;
pub mod grid;
pub mod harness;
pub mod propagation;
pub mod rng;
pub mod tomography;
pub mod wavelet;
pub mod wfs;

pub use error::{Error, Result};

/// Radians per arcsecond.
pub const ARCSEC: f64 = std::f64::consts::PI / (180.0 * 3600.0);
/// Radians per arcminute.
pub const ARCMIN: f64 = 60.0 * ARCSEC;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
