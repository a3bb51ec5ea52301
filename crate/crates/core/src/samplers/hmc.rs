//! Leapfrog HMC with Metropolis correction and dual-averaging step-size
//! adaptation. Identity mass matrix; adaptation runs during burn-in and is
//! frozen afterwards.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HmcConfig {
    pub leapfrog_steps: u32,
    /// Initial step size; dual averaging moves it during burn-in.
    pub step_size: f64,
    /// Target acceptance probability for adaptation.
    pub adapt_target: f64,
    pub burn_in: u32,
    pub keep: u32,
    pub thin: u32,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            step_size: 0.1,
            adapt_target: 0.8,
            burn_in: 1000,
            keep: 2000,
            thin: 5,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 {
            return Err(Error::InvalidArgument(
                "leapfrog_steps must be at least 1".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "adapt_target must lie in (0, 1), got {}",
                self.adapt_target
            )));
        }
        if self.keep == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument(
                "keep and thin must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of a single HMC proposal.
#[derive(Clone, Debug)]
pub struct HmcStep {
    pub x: Vec<f64>,
    pub accepted: bool,
    /// Non-finite Hamiltonian mid-trajectory; the proposal was rejected.
    pub divergent: bool,
    /// min(1, exp(H0 − H1)); feeds the dual-averaging update.
    pub accept_prob: f64,
}

/// Leapfrog integration of Hamiltonian dynamics under an identity mass
/// matrix. `grad` is the gradient of the log-target. Returns (q, p) after
/// `steps` steps of size `eps`.
pub fn leapfrog<G>(grad: G, q0: &[f64], p0: &[f64], eps: f64, steps: u32) -> (Vec<f64>, Vec<f64>)
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut q = q0.to_vec();
    let mut p = p0.to_vec();
    let mut g = grad(&q);
    for _ in 0..steps {
        for i in 0..p.len() {
            p[i] += 0.5 * eps * g[i];
        }
        for i in 0..q.len() {
            q[i] += eps * p[i];
        }
        g = grad(&q);
        for i in 0..p.len() {
            p[i] += 0.5 * eps * g[i];
        }
        if p.iter().any(|x| !x.is_finite()) || q.iter().any(|x| !x.is_finite()) {
            break;
        }
    }
    (q, p)
}

/// One HMC update: momentum refresh, leapfrog trajectory, Metropolis
/// accept/reject on the Hamiltonian.
pub fn hmc_step<F, R>(
    target: F,
    x0: &[f64],
    step_size: f64,
    leapfrog_steps: u32,
    rng: &mut R,
) -> HmcStep
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    let (logp0, _) = target(x0);
    debug_assert!(logp0.is_finite(), "hmc_step requires finite log-target at x0");
    let p0: Vec<f64> = (0..x0.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let h0 = -logp0 + 0.5 * p0.iter().map(|p| p * p).sum::<f64>();

    let grad = |q: &[f64]| target(q).1;
    let (q1, p1) = leapfrog(grad, x0, &p0, step_size, leapfrog_steps);

    let (logp1, _) = target(&q1);
    let h1 = -logp1 + 0.5 * p1.iter().map(|p| p * p).sum::<f64>();

    if !h1.is_finite() {
        return HmcStep {
            x: x0.to_vec(),
            accepted: false,
            divergent: true,
            accept_prob: 0.0,
        };
    }

    let accept_prob = (h0 - h1).exp().min(1.0);
    let accepted = rng.random_range(0.0..1.0) < accept_prob;
    HmcStep {
        x: if accepted { q1 } else { x0.to_vec() },
        accepted,
        divergent: false,
        accept_prob,
    }
}

/// Dual-averaging step-size adaptation (Nesterov-style primal averaging as
/// used for HMC tuning): drives the running acceptance statistic toward the
/// target, then freezes at the averaged step.
#[derive(Clone, Debug)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_bar: f64,
    t: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(target: f64, initial_step: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            h_bar: 0.0,
            t: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// Feed one acceptance probability; returns the step size for the next
    /// iteration.
    pub fn observe(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let frac = 1.0 / (self.t + self.t0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob);
        self.log_step = self.mu - self.t.sqrt() / self.gamma * self.h_bar;
        let eta = self.t.powf(-self.kappa);
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg;
        self.log_step.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// The averaged step size to freeze after burn-in.
    pub fn adapted(&self) -> f64 {
        self.log_step_avg.exp()
    }
}

/// A finished HMC run.
#[derive(Clone, Debug)]
pub struct HmcRun {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub divergences: u64,
    /// Step size in force after adaptation froze.
    pub step_size: f64,
    pub warnings: Vec<String>,
}

/// Burn-in with dual averaging, then keep·thin further iterations retaining
/// every thin-th state.
pub fn run_hmc<F, R>(target: F, x0: &[f64], cfg: &HmcConfig, rng: &mut R) -> Result<HmcRun>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut step_size = cfg.step_size;
    let mut adapt = DualAveraging::new(cfg.adapt_target, cfg.step_size);

    for _ in 0..cfg.burn_in {
        let step = hmc_step(&target, &x, step_size, cfg.leapfrog_steps, rng);
        step_size = adapt.observe(step.accept_prob);
        x = step.x;
    }
    if cfg.burn_in > 0 {
        step_size = adapt.adapted();
    }

    let mut samples = Vec::with_capacity(cfg.keep as usize);
    let mut accepted = 0u64;
    let mut divergences = 0u64;
    let total = cfg.keep as u64 * cfg.thin as u64;
    for i in 0..total {
        let step = hmc_step(&target, &x, step_size, cfg.leapfrog_steps, rng);
        if step.accepted {
            accepted += 1;
        }
        if step.divergent {
            divergences += 1;
        }
        x = step.x;
        if (i + 1) % cfg.thin as u64 == 0 {
            samples.push(x.clone());
        }
    }

    let acceptance_rate = accepted as f64 / total as f64;
    let mut warnings = Vec::new();
    if !(0.05..=0.995).contains(&acceptance_rate) {
        warnings.push(format!(
            "post-adaptation acceptance rate {acceptance_rate:.3} outside [0.05, 0.995]"
        ));
    }
    Ok(HmcRun {
        samples,
        acceptance_rate,
        divergences,
        step_size,
        warnings,
    })
}
