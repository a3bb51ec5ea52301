//! Strongly sparse factor model: a spike-and-slab prior on V sampled by
//! collapsed Metropolis-within-Gibbs.
//!
//! Each sweep runs three steps: (1) for every (n, k), draw the indicator
//! z_nk with v_nk integrated out, then draw v_nk from the spike (exactly
//! zero) or the slab (slice sampling); (2) slice-sample every θ_kd; (3)
//! conjugate Gibbs draws for the slab means/variances and the mixture
//! weights π.
//!
//! The z-decision needs only row n's observed likelihood terms: all other
//! rows cancel in the two-way ratio, so restricting to the row is exact,
//! not an approximation. The slab integral is closed-form for the Gaussian
//! family; Bernoulli and Poisson use a Laplace approximation with a
//! Gauss-Hermite fallback when the Newton search fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::{conjugate_log_prior, ConjugateHyper, Family, FamilySpec};
use crate::model::{observed_loglik, FactorState, ObservationMatrix};
use crate::quad::gauss_hermite;
use crate::samplers::{slice_step, SliceConfig};
use crate::util::{derive_seed, ln_gamma, logsumexp, logsumexp2};

/// Sampler state Ω = {Z, V, Θ, π, μ, σ²}. The spike is exact: z_nk = 0 if
/// and only if v_nk = 0.
#[derive(Clone, Debug)]
pub struct SpikeSlabState {
    pub factor: FactorState,
    pub z: Array2<bool>,
    pub pi: Array1<f64>,
    pub mu: Array1<f64>,
    pub sigma2: Array1<f64>,
}

impl SpikeSlabState {
    /// Count of active indicators.
    pub fn active_count(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }

    /// Checks the exact-zero invariant.
    pub fn zeros_consistent(&self) -> bool {
        self.z
            .iter()
            .zip(self.factor.v.iter())
            .all(|(&z, &v)| z == (v != 0.0))
    }
}

/// Hyperparameters Ψ = {e, f, λ, ν} plus the Gaussian-Gamma prior on each
/// slab's (mean, precision).
#[derive(Clone, Debug)]
pub struct SpikeSlabHyper {
    /// Beta(e, f) prior on each π_k.
    pub e: f64,
    pub f: f64,
    /// Gaussian-Gamma prior: μ | ρ ~ N(ng_mean, 1/(ng_precision_scale·ρ)),
    /// ρ ~ Gamma(ng_shape, rate ng_rate), with σ² = 1/ρ.
    pub ng_mean: f64,
    pub ng_precision_scale: f64,
    pub ng_shape: f64,
    pub ng_rate: f64,
    pub conj: ConjugateHyper,
}

impl SpikeSlabHyper {
    pub fn new(
        e: f64,
        f: f64,
        ng_mean: f64,
        ng_precision_scale: f64,
        ng_shape: f64,
        ng_rate: f64,
        conj: ConjugateHyper,
    ) -> Result<Self> {
        for (name, value) in [
            ("e", e),
            ("f", f),
            ("ng_precision_scale", ng_precision_scale),
            ("ng_shape", ng_shape),
            ("ng_rate", ng_rate),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        Ok(Self {
            e,
            f,
            ng_mean,
            ng_precision_scale,
            ng_shape,
            ng_rate,
            conj,
        })
    }

    /// Uniform π prior, unit Gaussian-Gamma, flat conjugate prior.
    pub fn default_for(d: usize) -> Self {
        Self {
            e: 1.0,
            f: 1.0,
            ng_mean: 0.0,
            ng_precision_scale: 1.0,
            ng_shape: 1.0,
            ng_rate: 1.0,
            conj: ConjugateHyper::flat(d),
        }
    }
}

/// Visit order for the (n, k) entries in step (1). Rows are conditionally
/// independent given Θ, π, μ, σ², so only the within-row order matters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanOrder {
    #[default]
    Systematic,
    /// Permute the rows and the factor order within each row every sweep.
    RandomPermutation,
}

#[derive(Clone, Debug)]
pub struct SpikeSlabConfig {
    pub burn_in: u32,
    pub keep: u32,
    pub thin: u32,
    pub seed: u64,
    pub scan: ScanOrder,
    pub slice: SliceConfig,
    /// Wall-clock budget; the sampler stops before starting a sweep that
    /// would follow budget expiry, so overshoot is at most one sweep.
    pub time_budget: Option<Duration>,
    /// Parallelise step (1) across rows; per-row generators derive from the
    /// seed and sweep index, so results do not depend on thread count.
    pub parallel_rows: bool,
}

impl Default for SpikeSlabConfig {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            keep: 2000,
            thin: 5,
            seed: 0,
            scan: ScanOrder::Systematic,
            slice: SliceConfig::default(),
            time_budget: None,
            parallel_rows: false,
        }
    }
}

impl SpikeSlabConfig {
    pub fn validate(&self) -> Result<()> {
        self.slice.validate()?;
        if self.keep == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument(
                "keep and thin must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn gh20() -> &'static (Vec<f64>, Vec<f64>) {
    static GH: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GH.get_or_init(|| gauss_hermite(20))
}

/// Row-restricted slab integrand: the observed entries of one row with the
/// candidate factor's contribution isolated.
struct RowSlab {
    family: FamilySpec,
    /// Observed values, their ψ with v_nk removed, and θ_kd, aligned.
    x: Vec<f64>,
    psi_minus: Vec<f64>,
    theta_k: Vec<f64>,
    mu: f64,
    sigma2: f64,
}

impl RowSlab {
    fn gather(data: &ObservationMatrix, state: &SpikeSlabState, n: usize, k: usize) -> Self {
        let d = data.ncols();
        let mut x = Vec::new();
        let mut psi_minus = Vec::new();
        let mut theta_k = Vec::new();
        let v_n = state.factor.v.row(n);
        for j in 0..d {
            if data.is_observed(n, j) {
                let psi = v_n.dot(&state.factor.theta.column(j));
                x.push(data.value(n, j));
                psi_minus.push(psi - state.factor.v[(n, k)] * state.factor.theta[(k, j)]);
                theta_k.push(state.factor.theta[(k, j)]);
            }
        }
        Self {
            family: data.family(),
            x,
            psi_minus,
            theta_k,
            mu: state.mu[k],
            sigma2: state.sigma2[k],
        }
    }

    fn loglik_at(&self, v: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() {
            total += self.family.lp(self.x[i], self.psi_minus[i] + v * self.theta_k[i]);
        }
        total
    }

    fn log_slab_density(&self, v: f64) -> f64 {
        let diff = v - self.mu;
        -0.5 * diff * diff / self.sigma2 - 0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln()
    }

    /// log ∫ p(x_row | v) N(v | μ, σ²) dv.
    fn log_integral(&self) -> (f64, bool) {
        if self.x.is_empty() {
            return (0.0, false);
        }
        if self.family.kind == Family::Gaussian {
            return (self.gaussian_closed_form(), false);
        }
        match self.laplace_approx() {
            Some(value) => (value, false),
            None => (self.gauss_hermite_fallback(), true),
        }
    }

    /// Exact marginalisation for the Gaussian family: the integrand is a
    /// Gaussian in v, so complete the square.
    fn gaussian_closed_form(&self) -> f64 {
        let s2 = self.family.gaussian_noise_variance;
        let mut a = 1.0 / self.sigma2;
        let mut b = self.mu / self.sigma2;
        let mut c = self.mu * self.mu / self.sigma2;
        for i in 0..self.x.len() {
            let r = self.x[i] - self.psi_minus[i];
            let t = self.theta_k[i];
            a += t * t / s2;
            b += r * t / s2;
            c += r * r / s2;
        }
        let base = -(self.x.len() as f64 / 2.0) * (2.0 * std::f64::consts::PI * s2).ln()
            - 0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln();
        base - 0.5 * (c - b * b / a) + 0.5 * (2.0 * std::f64::consts::PI / a).ln()
    }

    /// Newton-locate the mode of log[p(x_row | v) N(v | μ, σ²)], then apply
    /// the Gaussian curvature correction. None signals fallback.
    fn laplace_approx(&self) -> Option<f64> {
        let mut v = self.mu;
        let mut converged = false;
        for _ in 0..50 {
            let (g1, g2) = self.grad_curv(v);
            if !(g1.is_finite() && g2.is_finite()) || g2 >= 0.0 {
                return None;
            }
            let step = g1 / g2;
            v -= step;
            if !v.is_finite() {
                return None;
            }
            if g1.abs() <= 1e-8 {
                converged = true;
                break;
            }
        }
        // One more gradient check: the loop may have exited on the step
        // that reached tolerance.
        if !converged {
            let (g1, _) = self.grad_curv(v);
            if !(g1.is_finite() && g1.abs() <= 1e-6) {
                return None;
            }
        }
        let (_, g2) = self.grad_curv(v);
        let height = self.loglik_at(v) + self.log_slab_density(v);
        if !(height.is_finite() && g2.is_finite()) {
            return None;
        }
        let curvature = (-g2).max(1e-8);
        Some(height + 0.5 * (2.0 * std::f64::consts::PI / curvature).ln())
    }

    fn grad_curv(&self, v: f64) -> (f64, f64) {
        let mut g1 = -(v - self.mu) / self.sigma2;
        let mut g2 = -1.0 / self.sigma2;
        for i in 0..self.x.len() {
            let psi = self.psi_minus[i] + v * self.theta_k[i];
            let t = self.theta_k[i];
            g1 += (self.family.suff_stat(self.x[i]) - self.family.a_prime(psi)) * t;
            g2 -= self.family.a_double_prime(psi) * t * t;
        }
        (g1, g2)
    }

    /// 20-point Gauss-Hermite centred at (μ, σ): the prior factor is
    /// absorbed by the substitution v = μ + √2 σ t.
    fn gauss_hermite_fallback(&self) -> f64 {
        let (nodes, weights) = gh20();
        let sigma = self.sigma2.sqrt();
        let terms: Vec<f64> = nodes
            .iter()
            .zip(weights)
            .map(|(&t, &w)| {
                w.ln() + self.loglik_at(self.mu + std::f64::consts::SQRT_2 * sigma * t)
            })
            .collect();
        logsumexp(&terms) - 0.5 * std::f64::consts::PI.ln()
    }
}

fn check_entry(data: &ObservationMatrix, state: &SpikeSlabState, n: usize, k: usize) -> Result<()> {
    if n >= data.nrows() || k >= state.factor.k() {
        return Err(Error::InvalidArgument(format!(
            "entry index ({n}, {k}) out of range"
        )));
    }
    Ok(())
}

/// log[(1 − π_k) p(x_row n | v_nk = 0)], restricted to row n's observed
/// entries (all other rows cancel in the z_nk ratio).
pub fn spike_weight(
    n: usize,
    k: usize,
    data: &ObservationMatrix,
    state: &SpikeSlabState,
) -> Result<f64> {
    check_entry(data, state, n, k)?;
    let row = RowSlab::gather(data, state, n, k);
    Ok((1.0 - state.pi[k]).ln() + row.loglik_at(0.0))
}

/// The slab side of the z decision plus whether the quadrature fallback was
/// taken.
#[derive(Clone, Copy, Debug)]
pub struct SlabWeight {
    pub log_weight: f64,
    pub fallback: bool,
}

/// log[π_k ∫ p(x_row n | v_nk = v) N(v | μ_k, σ_k²) dv].
pub fn slab_weight(
    n: usize,
    k: usize,
    data: &ObservationMatrix,
    state: &SpikeSlabState,
) -> Result<SlabWeight> {
    check_entry(data, state, n, k)?;
    let row = RowSlab::gather(data, state, n, k);
    let (integral, fallback) = row.log_integral();
    Ok(SlabWeight {
        log_weight: state.pi[k].ln() + integral,
        fallback,
    })
}

/// One draw of (z_nk, v_nk).
#[derive(Clone, Copy, Debug)]
pub struct ZvDraw {
    pub z: bool,
    pub v: f64,
    pub fallback: bool,
    pub stalled: bool,
}

/// Draws z_nk from the collapsed two-way ratio, then v_nk from the spike
/// (exactly zero) or by one slice-sampling update of the slab conditional.
pub fn sample_zv<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    data: &ObservationMatrix,
    state: &SpikeSlabState,
    slice_cfg: &SliceConfig,
    rng: &mut R,
) -> Result<ZvDraw> {
    check_entry(data, state, n, k)?;
    let row = RowSlab::gather(data, state, n, k);
    Ok(sample_zv_row(
        &row,
        state.pi[k],
        state.factor.v[(n, k)],
        slice_cfg,
        rng,
    ))
}

fn sample_zv_row<R: Rng + ?Sized>(
    row: &RowSlab,
    pi_k: f64,
    current_v: f64,
    slice_cfg: &SliceConfig,
    rng: &mut R,
) -> ZvDraw {
    let spike = (1.0 - pi_k).ln() + row.loglik_at(0.0);
    let (integral, fallback) = row.log_integral();
    let slab = pi_k.ln() + integral;

    let p_slab = if slab == f64::NEG_INFINITY {
        0.0
    } else {
        (slab - logsumexp2(spike, slab)).exp()
    };
    if !(rng.random_range(0.0..1.0) < p_slab) {
        return ZvDraw {
            z: false,
            v: 0.0,
            fallback,
            stalled: false,
        };
    }

    // Slab conditional: one slice update of log p(x_row | v) + log N(v).
    let target = |v: f64| row.loglik_at(v) + row.log_slab_density(v);
    let mut start = None;
    for candidate in [
        current_v,
        row.mu,
        row.mu + row.sigma2.sqrt(),
        row.mu - row.sigma2.sqrt(),
        0.1,
        -0.1,
    ] {
        if candidate != 0.0 && target(candidate).is_finite() {
            start = Some(candidate);
            break;
        }
    }
    let Some(x0) = start else {
        // No finite starting point: the slab is numerically unreachable.
        return ZvDraw {
            z: false,
            v: 0.0,
            fallback,
            stalled: true,
        };
    };
    let out = slice_step(target, x0, slice_cfg, rng);
    if out.x == 0.0 {
        // Measure-zero draw that would break the exact-zero pairing.
        return ZvDraw {
            z: false,
            v: 0.0,
            fallback,
            stalled: out.stalled,
        };
    }
    ZvDraw {
        z: true,
        v: out.x,
        fallback,
        stalled: out.stalled,
    }
}

/// Conjugate update π_k ~ Beta(e + Σ_n z_nk, f + N − Σ_n z_nk). Draws are
/// clamped away from the float boundaries to keep 0 < π < 1 exact.
pub fn gibbs_pi<R: Rng + ?Sized>(
    state: &SpikeSlabState,
    hyper: &SpikeSlabHyper,
    rng: &mut R,
) -> Array1<f64> {
    let n = state.z.nrows() as f64;
    Array1::from_iter((0..state.z.ncols()).map(|k| {
        let active = state.z.column(k).iter().filter(|&&z| z).count() as f64;
        let draw: f64 = Beta::new(hyper.e + active, hyper.f + n - active)
            .expect("positive Beta parameters")
            .sample(rng);
        draw.clamp(1e-300, 1.0 - 1e-15)
    }))
}

/// Normal-Gamma posterior draw of (μ_k, σ_k²) conditioned on the active
/// slab values of column k; a column with no active entries draws from the
/// prior.
pub fn gibbs_mu_sigma<R: Rng + ?Sized>(
    state: &SpikeSlabState,
    hyper: &SpikeSlabHyper,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let k_total = state.z.ncols();
    let mut mu = Array1::zeros(k_total);
    let mut sigma2 = Array1::zeros(k_total);
    for k in 0..k_total {
        let active: Vec<f64> = state
            .z
            .column(k)
            .iter()
            .zip(state.factor.v.column(k))
            .filter_map(|(&z, &v)| z.then_some(v))
            .collect();
        let (m, s2) = normal_gamma_draw(&active, hyper, rng);
        mu[k] = m;
        sigma2[k] = s2;
    }
    (mu, sigma2)
}

fn normal_gamma_draw<R: Rng + ?Sized>(
    values: &[f64],
    hyper: &SpikeSlabHyper,
    rng: &mut R,
) -> (f64, f64) {
    let n = values.len() as f64;
    let (m0, k0, a0, b0) = (
        hyper.ng_mean,
        hyper.ng_precision_scale,
        hyper.ng_shape,
        hyper.ng_rate,
    );
    let (kn, mn, an, bn) = if values.is_empty() {
        (k0, m0, a0, b0)
    } else {
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let kn = k0 + n;
        let mn = (k0 * m0 + n * mean) / kn;
        let an = a0 + n / 2.0;
        let bn = b0 + 0.5 * ss + k0 * n * (mean - m0) * (mean - m0) / (2.0 * kn);
        (kn, mn, an, bn)
    };
    let precision: f64 = Gamma::new(an, 1.0 / bn)
        .expect("positive posterior parameters")
        .sample(rng);
    let sigma2 = 1.0 / precision;
    let mu = Normal::new(mn, (sigma2 / kn).sqrt())
        .expect("positive posterior variance")
        .sample(rng);
    (mu, sigma2)
}

/// Element-wise slice-sampling update of Θ under log-likelihood plus the
/// conjugate log-prior. Returns the updated matrix.
pub fn sample_theta<R: Rng + ?Sized>(
    data: &ObservationMatrix,
    state: &SpikeSlabState,
    hyper: &SpikeSlabHyper,
    slice_cfg: &SliceConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if hyper.conj.lambda.len() != data.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "conjugate lambda has {} entries for {} columns",
            hyper.conj.lambda.len(),
            data.ncols()
        )));
    }
    let mut theta = state.factor.theta.clone();
    let mut psi = state.factor.v.dot(&theta);
    sample_theta_inplace(data, &state.factor.v, &mut theta, &mut psi, hyper, slice_cfg, rng);
    Ok(theta)
}

fn sample_theta_inplace<R: Rng + ?Sized>(
    data: &ObservationMatrix,
    v: &Array2<f64>,
    theta: &mut Array2<f64>,
    psi: &mut Array2<f64>,
    hyper: &SpikeSlabHyper,
    slice_cfg: &SliceConfig,
    rng: &mut R,
) {
    let family = data.family();
    let (n_rows, k_total) = v.dim();
    for k in 0..k_total {
        for d in 0..theta.ncols() {
            let old = theta[(k, d)];
            let lambda_d = hyper.conj.lambda[d];
            let target = |t: f64| {
                let mut lp = lambda_d * t - hyper.conj.nu * family.a(t);
                for n in 0..n_rows {
                    if data.is_observed(n, d) {
                        let vnk = v[(n, k)];
                        lp += family.lp(data.value(n, d), psi[(n, d)] + (t - old) * vnk);
                    }
                }
                lp
            };
            let new = slice_step(target, old, slice_cfg, rng).x;
            if new != old {
                theta[(k, d)] = new;
                for n in 0..n_rows {
                    psi[(n, d)] += (new - old) * v[(n, k)];
                }
            }
        }
    }
}

/// Full log-joint of the spike-and-slab model (Θ prior unnormalised, as
/// everywhere in this crate); used for the per-sweep diagnostics trace.
pub fn log_joint(
    data: &ObservationMatrix,
    state: &SpikeSlabState,
    hyper: &SpikeSlabHyper,
) -> Result<f64> {
    let mut total = observed_loglik(data, &state.factor)?;
    for row in state.factor.theta.outer_iter() {
        total += conjugate_log_prior(data.family(), row, &hyper.conj)?;
    }
    let n = state.z.nrows() as f64;
    for k in 0..state.z.ncols() {
        let pi_k = state.pi[k];
        let active = state.z.column(k).iter().filter(|&&z| z).count() as f64;
        total += active * pi_k.ln() + (n - active) * (1.0 - pi_k).ln();
        // Beta(e, f) prior on π_k.
        total += (hyper.e - 1.0) * pi_k.ln() + (hyper.f - 1.0) * (1.0 - pi_k).ln()
            + ln_gamma(hyper.e + hyper.f)
            - ln_gamma(hyper.e)
            - ln_gamma(hyper.f);
        // Slab values of column k.
        for (z, &v) in state.z.column(k).iter().zip(state.factor.v.column(k)) {
            if *z {
                let diff = v - state.mu[k];
                total += -0.5 * diff * diff / state.sigma2[k]
                    - 0.5 * (2.0 * std::f64::consts::PI * state.sigma2[k]).ln();
            }
        }
        // Gaussian-Gamma prior on (μ_k, ρ_k = 1/σ_k²).
        let rho = 1.0 / state.sigma2[k];
        total += hyper.ng_shape * hyper.ng_rate.ln() - ln_gamma(hyper.ng_shape)
            + (hyper.ng_shape - 1.0) * rho.ln()
            - hyper.ng_rate * rho;
        let prec = hyper.ng_precision_scale * rho;
        let diff = state.mu[k] - hyper.ng_mean;
        total += 0.5 * (prec / (2.0 * std::f64::consts::PI)).ln() - 0.5 * prec * diff * diff;
    }
    Ok(total)
}

/// Chain diagnostics: slab fallback counts, slice stalls, the per-sweep
/// log-joint trace, and whether a time budget cut the run short.
#[derive(Clone, Debug, Default)]
pub struct SpikeSlabDiagnostics {
    pub slab_fallbacks: u64,
    pub slice_stalls: u64,
    pub log_joint_trace: Vec<f64>,
    pub budget_expired: bool,
    pub sweeps_completed: u64,
}

#[derive(Clone, Debug)]
pub struct SpikeSlabChain {
    pub states: Vec<SpikeSlabState>,
    pub diagnostics: SpikeSlabDiagnostics,
}

/// Runs the three-step sweep with burn-in and thinning. A time budget, when
/// set, stops the run before the sweep that would follow expiry and returns
/// whatever has been collected with `budget_expired` raised.
pub fn fit_spike_slab(
    data: &ObservationMatrix,
    k: usize,
    hyper: &SpikeSlabHyper,
    cfg: &SpikeSlabConfig,
) -> Result<SpikeSlabChain> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if hyper.conj.lambda.len() != data.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "conjugate lambda has {} entries for {} columns",
            hyper.conj.lambda.len(),
            data.ncols()
        )));
    }
    let (n, d) = (data.nrows(), data.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Z ~ Bernoulli(0.5), slab parameters and values from the prior.
    let pi = Array1::from_iter((0..k).map(|_| {
        let draw: f64 = Beta::new(hyper.e, hyper.f)
            .expect("validated hyper")
            .sample(&mut rng);
        draw.clamp(1e-300, 1.0 - 1e-15)
    }));
    let mut mu = Array1::zeros(k);
    let mut sigma2 = Array1::zeros(k);
    for kk in 0..k {
        let (m, s2) = normal_gamma_draw(&[], hyper, &mut rng);
        mu[kk] = m;
        sigma2[kk] = s2;
    }
    let z = Array2::from_shape_fn((n, k), |_| rng.random_bool(0.5));
    let v = Array2::from_shape_fn((n, k), |(i, kk)| {
        if z[(i, kk)] {
            let draw: f64 = Normal::new(mu[kk], sigma2[kk].sqrt())
                .expect("positive variance")
                .sample(&mut rng);
            if draw == 0.0 {
                f64::MIN_POSITIVE
            } else {
                draw
            }
        } else {
            0.0
        }
    });
    let theta = Array2::from_shape_fn((k, d), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut state = SpikeSlabState {
        factor: FactorState { v, theta },
        z,
        pi,
        mu,
        sigma2,
    };

    let mut diagnostics = SpikeSlabDiagnostics::default();
    let mut states = Vec::with_capacity(cfg.keep as usize);
    let start = Instant::now();
    let total_sweeps = cfg.burn_in as u64 + cfg.keep as u64 * cfg.thin as u64;

    let mut psi = state.factor.v.dot(&state.factor.theta);
    for sweep in 0..total_sweeps {
        if let Some(budget) = cfg.time_budget {
            if start.elapsed() >= budget {
                diagnostics.budget_expired = true;
                break;
            }
        }

        let (fallbacks, stalls) = zv_sweep(data, &mut state, &mut psi, cfg, sweep, &mut rng);
        diagnostics.slab_fallbacks += fallbacks;
        diagnostics.slice_stalls += stalls;

        sample_theta_inplace(
            data,
            &state.factor.v,
            &mut state.factor.theta,
            &mut psi,
            hyper,
            &cfg.slice,
            &mut rng,
        );
        let (new_mu, new_sigma2) = gibbs_mu_sigma(&state, hyper, &mut rng);
        state.mu = new_mu;
        state.sigma2 = new_sigma2;
        state.pi = gibbs_pi(&state, hyper, &mut rng);

        debug_assert!(state.zeros_consistent());
        diagnostics
            .log_joint_trace
            .push(log_joint(data, &state, hyper)?);
        diagnostics.sweeps_completed += 1;

        if sweep >= cfg.burn_in as u64 {
            let kept_index = sweep - cfg.burn_in as u64;
            if (kept_index + 1) % cfg.thin as u64 == 0 {
                states.push(state.clone());
            }
        }
    }

    Ok(SpikeSlabChain {
        states,
        diagnostics,
    })
}

/// Step (1) over every (n, k). Rows are conditionally independent given the
/// other blocks, so the parallel mode derives one generator per row per
/// sweep from the chain seed; results then do not depend on thread count.
fn zv_sweep(
    data: &ObservationMatrix,
    state: &mut SpikeSlabState,
    psi: &mut Array2<f64>,
    cfg: &SpikeSlabConfig,
    sweep: u64,
    rng: &mut ChaCha8Rng,
) -> (u64, u64) {
    let k_total = state.factor.k();
    let row_order: Vec<usize> = match cfg.scan {
        ScanOrder::Systematic => (0..data.nrows()).collect(),
        ScanOrder::RandomPermutation => {
            let mut order: Vec<usize> = (0..data.nrows()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(rng);
            order
        }
    };

    struct RowResult {
        n: usize,
        z: Vec<bool>,
        v: Vec<f64>,
        fallbacks: u64,
        stalls: u64,
    }

    let update_row = |n: usize, rng: &mut ChaCha8Rng, order_rng: Option<&mut ChaCha8Rng>| {
        let mut z: Vec<bool> = state.z.row(n).to_vec();
        let mut v: Vec<f64> = state.factor.v.row(n).to_vec();
        let mut psi_row: Vec<f64> = psi.row(n).to_vec();
        let mut fallbacks = 0;
        let mut stalls = 0;

        let mut ks: Vec<usize> = (0..k_total).collect();
        if let Some(r) = order_rng {
            use rand::seq::SliceRandom;
            ks.shuffle(r);
        }
        for &k in &ks {
            let mut row = RowSlab {
                family: data.family(),
                x: Vec::new(),
                psi_minus: Vec::new(),
                theta_k: Vec::new(),
                mu: state.mu[k],
                sigma2: state.sigma2[k],
            };
            for d in 0..data.ncols() {
                if data.is_observed(n, d) {
                    row.x.push(data.value(n, d));
                    row.psi_minus
                        .push(psi_row[d] - v[k] * state.factor.theta[(k, d)]);
                    row.theta_k.push(state.factor.theta[(k, d)]);
                }
            }
            let draw = sample_zv_row(&row, state.pi[k], v[k], &cfg.slice, rng);
            if draw.fallback {
                fallbacks += 1;
            }
            if draw.stalled {
                stalls += 1;
            }
            let delta = draw.v - v[k];
            if delta != 0.0 {
                for dd in 0..data.ncols() {
                    psi_row[dd] += delta * state.factor.theta[(k, dd)];
                }
            }
            z[k] = draw.z;
            v[k] = draw.v;
        }
        RowResult {
            n,
            z,
            v,
            fallbacks,
            stalls,
        }
    };

    let results: Vec<RowResult> = if cfg.parallel_rows {
        let base = derive_seed(cfg.seed ^ 0x5a5a_5a5a, sweep);
        row_order
            .par_iter()
            .map(|&n| {
                let mut row_rng = ChaCha8Rng::seed_from_u64(derive_seed(base, n as u64));
                let mut order_rng = match cfg.scan {
                    ScanOrder::Systematic => None,
                    ScanOrder::RandomPermutation => Some(ChaCha8Rng::seed_from_u64(derive_seed(
                        base ^ 0xffff,
                        n as u64,
                    ))),
                };
                update_row(n, &mut row_rng, order_rng.as_mut())
            })
            .collect()
    } else {
        let permute = cfg.scan == ScanOrder::RandomPermutation;
        row_order
            .iter()
            .map(|&n| {
                if permute {
                    // Sequential mode reuses the chain generator for the
                    // within-row order too.
                    let mut order_rng = ChaCha8Rng::seed_from_u64(rng.random());
                    update_row(n, rng, Some(&mut order_rng))
                } else {
                    update_row(n, rng, None)
                }
            })
            .collect()
    };

    let mut fallbacks = 0;
    let mut stalls = 0;
    for r in results {
        fallbacks += r.fallbacks;
        stalls += r.stalls;
        for k in 0..k_total {
            state.z[(r.n, k)] = r.z[k];
            state.factor.v[(r.n, k)] = r.v[k];
        }
        let v_n = state.factor.v.row(r.n).to_owned();
        let psi_row = v_n.dot(&state.factor.theta);
        for d in 0..data.ncols() {
            psi[(r.n, d)] = psi_row[d];
        }
    }
    (fallbacks, stalls)
}
