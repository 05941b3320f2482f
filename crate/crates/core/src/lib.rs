//! Numerical core for point-process regression models.
//!
//! A `d`-dimensional counting process `N` on `[T0, T1]` has intensity `n·λ(t, θ)` with
//!
//! ```text
//! λ(t, θ) = g(t, θ) + ∫_{T̂0}^{t-} K(t, s, θ) dX_s
//! ```
//!
//! where `g` is a baseline, `K` a nonnegative kernel and `X` a nondecreasing covariate
//! (for Hawkes-type models `X = N / n`). The crate provides:
//!
//! * [`model`]: declarative model descriptions and intensity evaluation,
//! * [`simulate`]: thinning and exact exponential-kernel samplers, compensators and
//!   time-rescaling diagnostics,
//! * [`likelihood`]: the quasi log-likelihood with analytic score and Hessian, plus the
//!   local random field `Z_n(u)`, `Δ_n`, `Y_n` and the LAMN residual,
//! * [`estimate`]: quasi maximum likelihood and quasi Bayesian estimators,
//! * [`asymptotics`]: limit intensities, the information matrix `Γ`, the limit field `Y`,
//!   the index `χ0` and identifiability checks for exponential Hawkes models,
//! * [`lob`]: digital price maps and limit order book replay.
//!
//! The crate is `no_std` (with `alloc`); IO, the CLI and the Monte Carlo harness live in
//! the `qlapp` companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod engine;
mod error;
pub mod linalg;
pub mod quad;
pub mod special;

pub mod asymptotics;
pub mod estimate;
pub mod likelihood;
pub mod lob;
pub mod model;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    BaselineSpec, Coef, ComponentRate, CovariateJump, CovariateSpec, KernelSpec, ModelSpec,
    ParamSpace, QueueDriver, TimeHorizon,
};
pub use simulate::PointPath;
