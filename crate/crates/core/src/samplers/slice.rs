//! Univariate slice sampling with stepping out and shrinkage (Neal 2003).

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct SliceConfig {
    pub initial_width: f64,
    pub max_step_out: u32,
    pub max_shrink: u32,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            initial_width: 1.0,
            max_step_out: 100,
            max_shrink: 100,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_width.is_finite() && self.initial_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slice initial_width must be positive, got {}",
                self.initial_width
            )));
        }
        if self.max_shrink < 1 {
            return Err(Error::InvalidArgument(
                "slice max_shrink must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SliceOutcome {
    pub x: f64,
    /// Set when the shrink budget ran out and x0 was returned unchanged.
    pub stalled: bool,
}

/// One stepping-out-and-shrinkage update of a univariate target.
///
/// The returned point always satisfies log_target(x) ≥ log u, where
/// log u = log_target(x0) − Exponential(1).
pub fn slice_step<F, R>(mut log_target: F, x0: f64, cfg: &SliceConfig, rng: &mut R) -> SliceOutcome
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = log_target(x0);
    assert!(f0.is_finite(), "slice_step requires a finite log-target at x0");

    // Slice level: log u = f(x0) − Exp(1).
    let e: f64 = -rng.random_range(f64::MIN_POSITIVE..1.0_f64).ln();
    let level = f0 - e;

    // Stepping out, with the step budget split at random between the sides.
    let w = cfg.initial_width;
    let mut left = x0 - w * rng.random_range(0.0..1.0);
    let mut right = left + w;
    if cfg.max_step_out > 0 {
        let mut j = (rng.random_range(0.0..1.0) * cfg.max_step_out as f64).floor() as u32;
        let mut k = cfg.max_step_out - 1 - j;
        while j > 0 && level < log_target(left) {
            left -= w;
            j -= 1;
        }
        while k > 0 && level < log_target(right) {
            right += w;
            k -= 1;
        }
    }

    // Shrinkage.
    for _ in 0..cfg.max_shrink {
        let candidate = left + rng.random_range(0.0..1.0) * (right - left);
        if level < log_target(candidate) {
            return SliceOutcome {
                x: candidate,
                stalled: false,
            };
        }
        if candidate < x0 {
            left = candidate;
        } else {
            right = candidate;
        }
    }

    // Budget exhausted; x0 itself is on the slice (level < f0 almost surely).
    SliceOutcome {
        x: x0,
        stalled: true,
    }
}
