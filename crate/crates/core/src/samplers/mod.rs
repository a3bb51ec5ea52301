//! Reusable MCMC kernels: univariate slice sampling and leapfrog HMC.
//!
//! Kernels are pure given an explicit generator argument; callers own their
//! generators, so concurrent use with distinct generators is safe.

mod hmc;
mod slice;

pub use hmc::{hmc_step, leapfrog, run_hmc, DualAveraging, HmcConfig, HmcRun, HmcStep};
pub use slice::{slice_step, SliceConfig, SliceOutcome};
