//! Iterative solvers for systems of ill-posed operator equations
//! `F_i(x) = y_i`, `i = 1..n`, together with a limited-view circular Radon
//! transform workbench on which the solvers are exercised.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`space`]: finite-dimensional weighted inner-product spaces and the
//!   [`space::Element`] vectors living in them.
//! - [`opsys`]: the block operator abstraction ([`opsys::Operator`],
//!   [`opsys::BlockOperatorSystem`]) with residuals, gradients, power-iteration
//!   norm estimation and system rescaling.
//! - [`solvers`]: Landweber, Kaczmarz, averaged Kaczmarz (AVEK), incremental
//!   aggregated gradient (IAG) and error-minimizing relaxation (EMR) variants,
//!   with residual-based skipping, discrepancy stopping and full run traces.
//! - [`radon`]: the discrete circular Radon transform, its continuous-adjoint
//!   backprojection and exact discrete transpose, detector geometry,
//!   phantoms and noise injection.
//! - [`seqconv`]: truncated power series and vector sequences (Cauchy
//!   products, reciprocals, deconvolution kernels) used to probe the decay of
//!   consecutive-iterate differences of the averaged iteration.
//! - [`selftest`]: a deterministic invariant battery over all of the above.
//!
//! With the default `parallel` feature the Radon kernels use rayon with
//! per-row ownership and ordered reductions, so results are bit-identical to
//! the sequential fallback (`--no-default-features`).

pub mod io;
pub mod opsys;
pub mod radon;
pub mod selftest;
pub mod seqconv;
pub mod solvers;
pub mod space;

mod rng;

pub use space::{Element, Space, SpaceTag};

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("space mismatch in {context}: expected {expected}, found {found}")]
    SpaceMismatch {
        expected: String,
        found: String,
        context: String,
    },
    #[error("block {block}: expected element of {expected}, found {found}")]
    BlockMismatch {
        block: usize,
        expected: String,
        found: String,
    },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("block {0} has zero norm bound and cannot be rescaled")]
    DegenerateBlock(usize),
    #[error("series is not invertible (leading coefficient is zero)")]
    NotInvertible,
    #[error("stationary point, no EMR step defined")]
    StationaryPoint,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
