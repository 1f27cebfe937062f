//! Spectral boundary-integral solver for rotating vortex patches (V-states)
//! of the 2D incompressible Euler equations that bifurcate from the family
//! of Kirchhoff ellipses.
//!
//! The patch boundary is represented as a perturbed conformal image of the
//! unit circle, `Φ(w) = w + Q/w + Σ_{n≥2} a_n wⁿ` with real coefficients.
//! The crate evaluates the steady-rotation contour functional, its
//! linearization in closed form and by singular-integral assembly, locates
//! the dispersion set of bifurcation points, and traces the nontrivial
//! solution branches with a bordered Newton continuation.
//!
//! Modules follow the pipeline:
//!
//! * [`boundary`] — boundary maps and grids on the unit circle
//! * [`quadrature`] — mean-value contour integrals with spectral accuracy
//! * [`functional`] — the rotation functional G and the residual F
//! * [`linop`] — linearizations of F (closed form and assembled)
//! * [`spectrum`] — dispersion set, kernel vectors, transversality
//! * [`continuation`] — branch tracing and steadiness certification
//! * [`report`] — machine-readable CLI outputs (CSV/JSON)

pub mod boundary;
pub mod continuation;
pub mod functional;
pub mod linop;
pub mod quadrature;
pub mod report;
pub mod spectrum;

pub use boundary::{
    BoundaryMap, EllipseParam, GridOffset, GridSamples, GridSpec, GuardReport,
    PerturbationCoeffs, DEFAULT_COERCIVITY_MARGIN,
};

use thiserror::Error;

/// Errors shared by all solver stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid too small: {0}")]
    GridTooSmall(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(
        "coercivity guard violated (ratio {ratio:.6} > {limit:.6}); \
         quadrature accuracy is not guaranteed for this boundary"
    )]
    GuardViolation { ratio: f64, limit: f64 },
    #[error(
        "boundary map lost sampled injectivity: min |ΔΦ|/|Δw| = {kappa:.3e} \
         below floor {floor:.3e}; shrink the continuation step"
    )]
    InjectivityLoss { kappa: f64, floor: f64 },
    #[error("kernel bound exceeded: sampled sup {sampled:.6e} > declared bound {declared:.6e}")]
    KernelBound { sampled: f64, declared: f64 },
    #[error("residual has cosine energy {energy:.3e} above {limit:.3e}; symmetry is broken")]
    CosineEnergy { energy: f64, limit: f64 },
    #[error("residual not in range: |g_m| = {gm:.3e} exceeds {limit:.3e}")]
    NotInRange { gm: f64, limit: f64 },
    #[error("Newton did not converge after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("continuation step size underflowed at eps = {eps:.3e}")]
    StepUnderflow { eps: f64 },
    #[error("branch discontinuity: step ratio {ratio:.3e} exceeds {limit:.3e} at eps = {eps:.3e}")]
    BranchDiscontinuity { ratio: f64, limit: f64, eps: f64 },
    #[error("linear solve failed: {0}")]
    SingularSystem(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
