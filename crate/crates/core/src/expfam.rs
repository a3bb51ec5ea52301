//! Exponential-family observation models and their conjugate priors.
//!
//! Densities are written as p(x | ψ) = h(x) exp(s(x)·ψ − A(ψ)) with natural
//! parameter ψ, sufficient statistic s(x) and log-partition A(ψ). Three
//! families are provided:
//!
//! * Gaussian with fixed noise variance σ²: A(ψ) = ψ²/(2σ²), s(x) = x/σ².
//!   The mean of x is ψ itself; σ² = 1 gives the textbook identity forms.
//! * Bernoulli on {0, 1}: A(ψ) = log(1 + e^ψ), s(x) = x.
//! * Poisson on the non-negative integers: A(ψ) = e^ψ, s(x) = x,
//!   log h(x) = −log x!.
//!
//! All log-densities are in nats.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::ln_factorial;

/// Which exponential family an observation matrix follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// An exponential-family descriptor. For the Gaussian kind the noise
/// variance is a fixed configuration value (default 1.0), never inferred.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: Family,
    /// Noise variance σ²; only meaningful when `kind == Gaussian`.
    #[serde(default = "default_noise_variance")]
    pub gaussian_noise_variance: f64,
}

fn default_noise_variance() -> f64 {
    1.0
}

impl FamilySpec {
    pub fn gaussian(noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self {
            kind: Family::Gaussian,
            gaussian_noise_variance: noise_variance,
        })
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: Family::Bernoulli,
            gaussian_noise_variance: 1.0,
        }
    }

    pub fn poisson() -> Self {
        Self {
            kind: Family::Poisson,
            gaussian_noise_variance: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    /// Whether `x` lies in the family's support.
    pub fn in_support(&self, x: f64) -> bool {
        match self.kind {
            Family::Gaussian => x.is_finite(),
            Family::Bernoulli => x == 0.0 || x == 1.0,
            Family::Poisson => x.is_finite() && x >= 0.0 && x.fract() == 0.0,
        }
    }

    /// Log-partition A(ψ).
    pub fn log_partition(&self, psi: f64) -> Result<f64> {
        check_finite(psi)?;
        Ok(self.a(psi))
    }

    /// log p(x | ψ) in nats.
    pub fn log_prob(&self, x: f64, psi: f64) -> Result<f64> {
        check_finite(psi)?;
        if !self.in_support(x) {
            return Err(Error::InvalidArgument(format!(
                "{x} is outside the {} support",
                self.name()
            )));
        }
        Ok(self.lp(x, psi))
    }

    /// dA/dψ, the mean of the sufficient statistic. Also the gradient hook
    /// used by the optimisation and sampling code: d log p / dψ = s(x) − A'(ψ).
    pub fn mean_function(&self, psi: f64) -> Result<f64> {
        check_finite(psi)?;
        Ok(self.a_prime(psi))
    }

    // --- raw forms used in inner loops (inputs validated at the boundary) ---

    pub(crate) fn a(&self, psi: f64) -> f64 {
        match self.kind {
            Family::Gaussian => psi * psi / (2.0 * self.gaussian_noise_variance),
            Family::Bernoulli => softplus(psi),
            Family::Poisson => psi.exp(),
        }
    }

    pub(crate) fn a_prime(&self, psi: f64) -> f64 {
        match self.kind {
            Family::Gaussian => psi / self.gaussian_noise_variance,
            Family::Bernoulli => sigmoid(psi),
            Family::Poisson => psi.exp(),
        }
    }

    /// A''(ψ); the curvature used by the Laplace approximation.
    pub(crate) fn a_double_prime(&self, psi: f64) -> f64 {
        match self.kind {
            Family::Gaussian => 1.0 / self.gaussian_noise_variance,
            Family::Bernoulli => {
                let s = sigmoid(psi);
                s * (1.0 - s)
            }
            Family::Poisson => psi.exp(),
        }
    }

    pub(crate) fn suff_stat(&self, x: f64) -> f64 {
        match self.kind {
            Family::Gaussian => x / self.gaussian_noise_variance,
            Family::Bernoulli | Family::Poisson => x,
        }
    }

    pub(crate) fn log_base(&self, x: f64) -> f64 {
        match self.kind {
            Family::Gaussian => {
                let s2 = self.gaussian_noise_variance;
                -x * x / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
            }
            Family::Bernoulli => 0.0,
            Family::Poisson => -ln_factorial(x),
        }
    }

    pub(crate) fn lp(&self, x: f64, psi: f64) -> f64 {
        self.log_base(x) + self.suff_stat(x) * psi - self.a(psi)
    }

    /// E[x | ψ] on the data scale; coincides with `mean_function` except for
    /// the Gaussian with σ² ≠ 1, where the sufficient statistic is x/σ².
    pub fn data_mean(&self, psi: f64) -> f64 {
        match self.kind {
            Family::Gaussian => psi,
            Family::Bernoulli => sigmoid(psi),
            Family::Poisson => psi.exp(),
        }
    }

    /// Draw one observation x ~ p(x | ψ).
    pub fn sample<R: Rng + ?Sized>(&self, psi: f64, rng: &mut R) -> f64 {
        match self.kind {
            Family::Gaussian => Normal::new(psi, self.gaussian_noise_variance.sqrt())
                .expect("valid noise variance")
                .sample(rng),
            Family::Bernoulli => {
                if rng.random_bool(sigmoid(psi)) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => {
                let rate = psi.exp();
                if rate == 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("positive rate").sample(rng)
                }
            }
        }
    }
}

/// Hyperparameters of the conjugate prior p(θ) ∝ exp(λ·θ − ν A(θ)).
#[derive(Clone, Debug)]
pub struct ConjugateHyper {
    pub lambda: Array1<f64>,
    pub nu: f64,
}

impl ConjugateHyper {
    pub fn new(lambda: Array1<f64>, nu: f64) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "conjugate pseudo-count nu must be positive, got {nu}"
            )));
        }
        Ok(Self { lambda, nu })
    }

    /// λ = 0, ν = 1 for a D-dimensional parameter row.
    pub fn flat(d: usize) -> Self {
        Self {
            lambda: Array1::zeros(d),
            nu: 1.0,
        }
    }
}

/// Unnormalised conjugate log-prior λ·θ − ν Σ_d A(θ_d). The normalising
/// constant is omitted; it cancels in every MCMC ratio and optimisation
/// gradient this crate computes.
pub fn conjugate_log_prior(
    family: FamilySpec,
    theta_row: ArrayView1<f64>,
    hyper: &ConjugateHyper,
) -> Result<f64> {
    if theta_row.len() != hyper.lambda.len() {
        return Err(Error::DimensionMismatch(format!(
            "theta row has {} entries, lambda has {}",
            theta_row.len(),
            hyper.lambda.len()
        )));
    }
    let linear = theta_row.dot(&hyper.lambda);
    let partition: f64 = theta_row.iter().map(|&t| family.a(t)).sum();
    Ok(linear - hyper.nu * partition)
}

/// Gradient of `conjugate_log_prior` with respect to the parameter row:
/// λ_d − ν A'(θ_d).
pub fn conjugate_log_prior_grad(
    family: FamilySpec,
    theta_row: ArrayView1<f64>,
    hyper: &ConjugateHyper,
) -> Result<Array1<f64>> {
    if theta_row.len() != hyper.lambda.len() {
        return Err(Error::DimensionMismatch(format!(
            "theta row has {} entries, lambda has {}",
            theta_row.len(),
            hyper.lambda.len()
        )));
    }
    Ok(Array1::from_iter(
        theta_row
            .iter()
            .zip(hyper.lambda.iter())
            .map(|(&t, &l)| l - hyper.nu * family.a_prime(t)),
    ))
}

fn check_finite(psi: f64) -> Result<()> {
    if psi.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "natural parameter must be finite, got {psi}"
        )))
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
