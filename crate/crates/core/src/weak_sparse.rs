//! Weakly sparse Bayesian factor models: Laplace or Exponential priors on
//! the latent weights, HMC over (V, Θ), and conjugate Gibbs draws for the
//! prior rates b.
//!
//! The Exponential prior constrains V to be strictly positive; its HMC runs
//! on u = log V with the Jacobian term Σ log v included in the target, so
//! the dynamics stay unconstrained and smooth. Only V is constrained
//! positive; Θ keeps its conjugate prior.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::expfam::{conjugate_log_prior, conjugate_log_prior_grad, ConjugateHyper};
use crate::model::{loglik_and_grads, FactorState, ObservationMatrix};
use crate::samplers::{hmc_step, DualAveraging, HmcConfig};
use crate::util::ln_gamma;

/// Sparsity-favouring prior on the latent weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeakPrior {
    /// p(v | b) = (b/2) exp(−b|v|); unconstrained v.
    Laplace,
    /// p(v | b) = b exp(−b v); v strictly positive.
    Exponential,
}

/// Latent state Ω = {V, Θ, b}.
#[derive(Clone, Debug)]
pub struct WeakSparseState {
    pub factor: FactorState,
    /// Per-factor prior rates, all strictly positive.
    pub b: Array1<f64>,
    pub prior: WeakPrior,
}

/// Hyperparameters Ψ = {α, β, λ, ν}: a shared-shape/scale Gamma prior on
/// the rates b (prior mean αβ) and the conjugate prior on Θ.
#[derive(Clone, Debug)]
pub struct WeakSparseHyper {
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub conj: ConjugateHyper,
}

impl WeakSparseHyper {
    pub fn new(gamma_shape: f64, gamma_scale: f64, conj: ConjugateHyper) -> Result<Self> {
        if !(gamma_shape > 0.0 && gamma_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "gamma shape and scale must be positive".into(),
            ));
        }
        Ok(Self {
            gamma_shape,
            gamma_scale,
            conj,
        })
    }

    /// α = β = 1 with a flat conjugate prior for D columns.
    pub fn default_for(d: usize) -> Self {
        Self {
            gamma_shape: 1.0,
            gamma_scale: 1.0,
            conj: ConjugateHyper::flat(d),
        }
    }
}

fn log_prior_v(v: &Array2<f64>, b: &Array1<f64>, prior: WeakPrior) -> f64 {
    let mut total = 0.0;
    for row in v.outer_iter() {
        for (k, &vnk) in row.iter().enumerate() {
            let bk = b[k];
            total += match prior {
                WeakPrior::Laplace => (bk / 2.0).ln() - bk * vnk.abs(),
                WeakPrior::Exponential => {
                    if vnk <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    bk.ln() - bk * vnk
                }
            };
        }
    }
    total
}

fn log_prior_b(b: &Array1<f64>, hyper: &WeakSparseHyper) -> f64 {
    let (shape, scale) = (hyper.gamma_shape, hyper.gamma_scale);
    b.iter()
        .map(|&bk| {
            (shape - 1.0) * bk.ln() - bk / scale - shape * scale.ln() - ln_gamma(shape)
        })
        .sum()
}

/// log p(X | V, Θ) + log p(Θ | λ, ν) + log p(V | b) + log p(b | α, β), in
/// nats. Θ prior terms carry the same dropped constants as
/// [`conjugate_log_prior`]. Returns −∞ (not an error) when V violates the
/// Exponential prior's positivity.
pub fn log_joint(
    data: &ObservationMatrix,
    state: &WeakSparseState,
    hyper: &WeakSparseHyper,
) -> Result<f64> {
    let loglik = crate::model::observed_loglik(data, &state.factor)?;
    let mut theta_prior = 0.0;
    for row in state.factor.theta.outer_iter() {
        theta_prior += conjugate_log_prior(data.family(), row, &hyper.conj)?;
    }
    let v_prior = log_prior_v(&state.factor.v, &state.b, state.prior);
    Ok(loglik + theta_prior + v_prior + log_prior_b(&state.b, hyper))
}

/// Exact conjugate Gibbs draw of the rates: b_k ~ Gamma(shape α + N,
/// rate 1/β + Σ_n |v_nk|). For the Exponential prior the entries are
/// positive, so the same |·| sum applies.
pub fn gibbs_b<R: Rng + ?Sized>(
    state: &WeakSparseState,
    hyper: &WeakSparseHyper,
    rng: &mut R,
) -> Array1<f64> {
    let n = state.factor.nrows() as f64;
    let shape = hyper.gamma_shape + n;
    Array1::from_iter((0..state.factor.k()).map(|k| {
        let sum_abs: f64 = state.factor.v.column(k).iter().map(|v| v.abs()).sum();
        let rate = 1.0 / hyper.gamma_scale + sum_abs;
        Gamma::new(shape, 1.0 / rate)
            .expect("positive shape and scale")
            .sample(rng)
    }))
}

/// Value and gradients of the (V, Θ)-conditional log-target: log p(X|V,Θ) +
/// log p(V|b) + log p(Θ|λ,ν). The Laplace gradient at exactly v = 0 uses
/// subgradient value 0 (HMC almost surely never lands there; this guards
/// initialisation only).
pub fn log_joint_vtheta_grad(
    data: &ObservationMatrix,
    state: &WeakSparseState,
    hyper: &WeakSparseHyper,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (loglik, mut gv, mut gt) = loglik_and_grads(data, &state.factor)?;
    let mut logp = loglik;

    for ((n, k), g) in gv.indexed_iter_mut() {
        let bk = state.b[k];
        match state.prior {
            WeakPrior::Laplace => {
                let v = state.factor.v[(n, k)];
                // f64::signum(0.0) is 1; the subgradient choice here is 0.
                let sign = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *g -= bk * sign;
            }
            WeakPrior::Exponential => *g -= bk,
        }
    }

    logp += log_prior_v(&state.factor.v, &state.b, state.prior);
    for (k, row) in state.factor.theta.outer_iter().enumerate() {
        logp += conjugate_log_prior(data.family(), row, &hyper.conj)?;
        let g = conjugate_log_prior_grad(data.family(), row, &hyper.conj)?;
        for (d, gg) in g.iter().enumerate() {
            gt[(k, d)] += gg;
        }
    }
    Ok((logp, gv, gt))
}

/// A finished chain of kept states plus sampler diagnostics.
#[derive(Clone, Debug)]
pub struct WeakChain {
    pub states: Vec<WeakSparseState>,
    pub acceptance_rate: f64,
    pub divergences: u64,
    pub step_size: f64,
    pub warnings: Vec<String>,
}

struct Packed {
    n: usize,
    k: usize,
    d: usize,
}

impl Packed {
    fn len(&self) -> usize {
        self.n * self.k + self.k * self.d
    }

    fn pack(&self, v: &Array2<f64>, theta: &Array2<f64>, log_v: bool) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend(v.iter().map(|&v| if log_v { v.ln() } else { v }));
        x.extend(theta.iter());
        x
    }

    fn unpack(&self, x: &[f64], log_v: bool) -> (Array2<f64>, Array2<f64>) {
        let nv = self.n * self.k;
        let v = Array2::from_shape_vec(
            (self.n, self.k),
            x[..nv]
                .iter()
                .map(|&u| if log_v { u.exp() } else { u })
                .collect(),
        )
        .expect("packed length");
        let theta =
            Array2::from_shape_vec((self.k, self.d), x[nv..].to_vec()).expect("packed length");
        (v, theta)
    }
}

/// Log-target over the flat HMC coordinates. For the Exponential prior the
/// coordinates hold u = log V and the target includes the Jacobian Σ u.
fn flat_target(
    data: &ObservationMatrix,
    hyper: &WeakSparseHyper,
    prior: WeakPrior,
    b: &Array1<f64>,
    packed: &Packed,
    x: &[f64],
) -> (f64, Vec<f64>) {
    let log_v = prior == WeakPrior::Exponential;
    let zeros = || vec![0.0; packed.len()];
    if x.iter().any(|v| !v.is_finite()) {
        return (f64::NEG_INFINITY, zeros());
    }
    let (v, theta) = packed.unpack(x, log_v);
    if v.iter().any(|v| !v.is_finite()) {
        return (f64::NEG_INFINITY, zeros());
    }
    let state = WeakSparseState {
        factor: FactorState { v, theta },
        b: b.clone(),
        prior,
    };
    let Ok((mut logp, mut gv, gt)) = log_joint_vtheta_grad(data, &state, hyper) else {
        return (f64::NEG_INFINITY, zeros());
    };
    if !logp.is_finite() {
        return (f64::NEG_INFINITY, zeros());
    }
    if log_v {
        // d/du [f(e^u) + u] = f'(v)·v + 1.
        for ((n, k), g) in gv.indexed_iter_mut() {
            let vnk = state.factor.v[(n, k)];
            *g = *g * vnk + 1.0;
            logp += vnk.ln();
        }
    }
    let mut grad: Vec<f64> = Vec::with_capacity(packed.len());
    grad.extend(gv.iter());
    grad.extend(gt.iter());
    if grad.iter().any(|g| !g.is_finite()) {
        return (f64::NEG_INFINITY, zeros());
    }
    (logp, grad)
}

/// HMC over (V, Θ) with a Gibbs draw of b after every trajectory. Step size
/// adapts by dual averaging toward `cfg.adapt_target` during burn-in and is
/// frozen afterwards; kept samples are thinned per the config.
pub fn hmc_fit(
    data: &ObservationMatrix,
    k: usize,
    hyper: &WeakSparseHyper,
    prior: WeakPrior,
    cfg: &HmcConfig,
) -> Result<WeakChain> {
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
    let packed = Packed { n, k, d };
    let log_v = prior == WeakPrior::Exponential;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Initialise from the prior so prior-only runs start in equilibrium.
    let mut b = Array1::from_iter((0..k).map(|_| {
        Gamma::new(hyper.gamma_shape, hyper.gamma_scale)
            .expect("validated hyper")
            .sample(&mut rng)
    }));
    let v0 = Array2::from_shape_fn((n, k), |(_, kk)| match prior {
        WeakPrior::Laplace => {
            let e: f64 = Exp::new(b[kk]).expect("positive rate").sample(&mut rng);
            if rng.random_bool(0.5) {
                e
            } else {
                -e
            }
        }
        WeakPrior::Exponential => Exp::new(b[kk]).expect("positive rate").sample(&mut rng),
    });
    let theta0 =
        Array2::from_shape_fn((k, d), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
    let mut x = packed.pack(&v0, &theta0, log_v);

    let mut step_size = cfg.step_size;
    let mut adapt = DualAveraging::new(cfg.adapt_target, cfg.step_size);

    let run_iteration = |x: &mut Vec<f64>,
                             b: &mut Array1<f64>,
                             step_size: f64,
                             rng: &mut ChaCha8Rng|
     -> (f64, bool) {
        let target =
            |y: &[f64]| flat_target(data, hyper, prior, b, &packed, y);
        let step = hmc_step(target, x, step_size, cfg.leapfrog_steps, rng);
        *x = step.x;
        let (v, _) = packed.unpack(x, log_v);
        let state = WeakSparseState {
            factor: FactorState {
                v,
                theta: Array2::zeros((k, d)),
            },
            b: b.clone(),
            prior,
        };
        *b = gibbs_b(&state, hyper, rng);
        (step.accept_prob, step.divergent)
    };

    for _ in 0..cfg.burn_in {
        let (accept_prob, _) = run_iteration(&mut x, &mut b, step_size, &mut rng);
        step_size = adapt.observe(accept_prob);
    }
    if cfg.burn_in > 0 {
        step_size = adapt.adapted();
    }

    let total = cfg.keep as u64 * cfg.thin as u64;
    let mut states = Vec::with_capacity(cfg.keep as usize);
    let mut accept_sum = 0.0;
    let mut divergences = 0u64;
    for i in 0..total {
        let (accept_prob, divergent) = run_iteration(&mut x, &mut b, step_size, &mut rng);
        accept_sum += accept_prob;
        if divergent {
            divergences += 1;
        }
        if (i + 1) % cfg.thin as u64 == 0 {
            let (v, theta) = packed.unpack(&x, log_v);
            states.push(WeakSparseState {
                factor: FactorState { v, theta },
                b: b.clone(),
                prior,
            });
        }
    }

    let acceptance_rate = accept_sum / total as f64;
    let mut warnings = Vec::new();
    if !(0.05..=0.995).contains(&acceptance_rate) {
        warnings.push(format!(
            "post-adaptation acceptance rate {acceptance_rate:.3} outside [0.05, 0.995]"
        ));
    }
    Ok(WeakChain {
        states,
        acceptance_rate,
        divergences,
        step_size,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::FamilySpec;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn empty_gaussian(n: usize, d: usize) -> ObservationMatrix {
        ObservationMatrix::new(
            Array2::zeros((n, d)),
            Array2::from_elem((n, d), false),
            FamilySpec::gaussian(1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn log_joint_prior_terms() {
        // Laplace term at v = 0, b = 2: log(b/2) = 0.
        let data = empty_gaussian(1, 1);
        let hyper = WeakSparseHyper::default_for(1);
        let state = WeakSparseState {
            factor: FactorState::new(array![[0.0]], array![[0.0]]).unwrap(),
            b: array![2.0],
            prior: WeakPrior::Laplace,
        };
        // Subtract the Θ and b prior contributions to isolate the V term.
        let full = log_joint(&data, &state, &hyper).unwrap();
        let without_v = conjugate_log_prior(data.family(), state.factor.theta.row(0), &hyper.conj)
            .unwrap()
            + log_prior_b(&state.b, &hyper);
        assert_relative_eq!(full - without_v, 0.0, epsilon = 1e-12);

        // Exponential term at v = 1, b = 1: log p = −1.
        let state = WeakSparseState {
            factor: FactorState::new(array![[1.0]], array![[0.0]]).unwrap(),
            b: array![1.0],
            prior: WeakPrior::Exponential,
        };
        let full = log_joint(&data, &state, &hyper).unwrap();
        let without_v = conjugate_log_prior(data.family(), state.factor.theta.row(0), &hyper.conj)
            .unwrap()
            + log_prior_b(&state.b, &hyper);
        assert_relative_eq!(full - without_v, -1.0, epsilon = 1e-12);

        // Positivity violation flags −∞, never a crash.
        let bad = WeakSparseState {
            factor: FactorState::new(array![[-0.5]], array![[0.0]]).unwrap(),
            b: array![1.0],
            prior: WeakPrior::Exponential,
        };
        assert_eq!(log_joint(&data, &bad, &hyper).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn log_joint_matches_term_by_term_oracle() {
        let family = FamilySpec::gaussian(1.0).unwrap();
        let data = ObservationMatrix::fully_observed(array![[0.4, -1.0], [1.2, 0.1]], family)
            .unwrap();
        let hyper = WeakSparseHyper::default_for(2);
        let state = WeakSparseState {
            factor: FactorState::new(array![[0.5, -0.2], [0.3, 0.8]], array![[1.0, 0.0], [-0.5, 0.7]])
                .unwrap(),
            b: array![1.5, 0.7],
            prior: WeakPrior::Laplace,
        };
        let expected = crate::model::observed_loglik(&data, &state.factor).unwrap()
            + state
                .factor
                .theta
                .outer_iter()
                .map(|row| conjugate_log_prior(family, row, &hyper.conj).unwrap())
                .sum::<f64>()
            + state
                .factor
                .v
                .indexed_iter()
                .map(|((_, k), &v)| (state.b[k] / 2.0).ln() - state.b[k] * v.abs())
                .sum::<f64>()
            + state
                .b
                .iter()
                .map(|&b| -b - ln_gamma(1.0))
                .sum::<f64>();
        assert_relative_eq!(
            log_joint(&data, &state, &hyper).unwrap(),
            expected,
            epsilon = 1e-10
        );
    }

    #[test]
    fn gibbs_b_moments() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // α + N = 2, rate 2 → mean 1.0.
        let hyper = WeakSparseHyper::new(1.0, 1.0, ConjugateHyper::flat(1)).unwrap();
        let state = WeakSparseState {
            factor: FactorState::new(array![[1.0]], array![[0.0]]).unwrap(),
            b: array![1.0],
            prior: WeakPrior::Laplace,
        };
        let n = 100_000;
        let mean = (0..n)
            .map(|_| gibbs_b(&state, &hyper, &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        // Gamma(2, rate 2): mean 1, var 1/2; 3 standard errors.
        let se = (0.5 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn gibbs_b_scaling_matches_analytic_mean() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hyper = WeakSparseHyper::new(2.0, 0.5, ConjugateHyper::flat(1)).unwrap();
        let make = |scale: f64| WeakSparseState {
            factor: FactorState::new(array![[0.4 * scale], [0.6 * scale], [1.0 * scale]], array![[0.0]])
                .unwrap(),
            b: array![1.0],
            prior: WeakPrior::Laplace,
        };
        let n = 200_000;
        for scale in [1.0, 10.0] {
            let state = make(scale);
            let sum_abs = 2.0 * scale;
            let analytic = (hyper.gamma_shape + 3.0) / (1.0 / hyper.gamma_scale + sum_abs);
            let draws: Vec<f64> = (0..n).map(|_| gibbs_b(&state, &hyper, &mut rng)[0]).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - analytic).abs() < 3.0 * se + 1e-9,
                "scale {scale}: mean {mean} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn vtheta_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for family in [
            FamilySpec::gaussian(1.0).unwrap(),
            FamilySpec::bernoulli(),
            FamilySpec::poisson(),
        ] {
            for prior in [WeakPrior::Laplace, WeakPrior::Exponential] {
                let (n, d, k) = (3, 2, 2);
                let v = Array2::from_shape_fn((n, k), |_| rng.random_range(0.1..1.0));
                let theta = Array2::from_shape_fn((k, d), |_| rng.random_range(-0.8..0.8));
                let psi = v.dot(&theta);
                let values = Array2::from_shape_fn((n, d), |idx| family.sample(psi[idx], &mut rng));
                let data = ObservationMatrix::fully_observed(values, family).unwrap();
                let hyper = WeakSparseHyper::default_for(d);
                let state = WeakSparseState {
                    factor: FactorState::new(v, theta).unwrap(),
                    b: array![0.8, 1.3],
                    prior,
                };
                let (f0, gv, gt) = log_joint_vtheta_grad(&data, &state, &hyper).unwrap();
                assert!(f0.is_finite());
                let eval = |s: &WeakSparseState| log_joint_vtheta_grad(&data, s, &hyper).unwrap().0;
                for i in 0..n {
                    for kk in 0..k {
                        let mut sp = state.clone();
                        sp.factor.v[(i, kk)] += h;
                        let mut sm = state.clone();
                        sm.factor.v[(i, kk)] -= h;
                        let fd = (eval(&sp) - eval(&sm)) / (2.0 * h);
                        assert_relative_eq!(gv[(i, kk)], fd, max_relative = 1e-5, epsilon = 1e-6);
                    }
                }
                for kk in 0..k {
                    for dd in 0..d {
                        let mut sp = state.clone();
                        sp.factor.theta[(kk, dd)] += h;
                        let mut sm = state.clone();
                        sm.factor.theta[(kk, dd)] -= h;
                        let fd = (eval(&sp) - eval(&sm)) / (2.0 * h);
                        assert_relative_eq!(gt[(kk, dd)], fd, max_relative = 1e-5, epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_leapfrog_steps_is_invalid() {
        let data = empty_gaussian(2, 2);
        let hyper = WeakSparseHyper::default_for(2);
        let cfg = HmcConfig {
            leapfrog_steps: 0,
            ..HmcConfig::default()
        };
        assert!(hmc_fit(&data, 1, &hyper, WeakPrior::Laplace, &cfg).is_err());
    }

    #[test]
    fn nxpca_chain_is_strictly_positive() {
        let family = FamilySpec::gaussian(1.0).unwrap();
        let values = array![[1.0, 0.5], [0.2, 0.9], [1.4, 0.1]];
        let data = ObservationMatrix::fully_observed(values, family).unwrap();
        let hyper = WeakSparseHyper::default_for(2);
        let cfg = HmcConfig {
            burn_in: 50,
            keep: 100,
            thin: 1,
            seed: 12,
            ..HmcConfig::default()
        };
        let chain = hmc_fit(&data, 2, &hyper, WeakPrior::Exponential, &cfg).unwrap();
        assert_eq!(chain.states.len(), 100);
        for s in &chain.states {
            assert!(s.factor.v.iter().all(|&v| v > 0.0));
            assert!(s.b.iter().all(|&b| b > 0.0));
        }
    }

    #[test]
    fn fixed_seed_chains_are_identical() {
        let data = empty_gaussian(2, 2);
        let hyper = WeakSparseHyper::default_for(2);
        let cfg = HmcConfig {
            burn_in: 10,
            keep: 20,
            thin: 1,
            seed: 99,
            ..HmcConfig::default()
        };
        let a = hmc_fit(&data, 1, &hyper, WeakPrior::Laplace, &cfg).unwrap();
        let b = hmc_fit(&data, 1, &hyper, WeakPrior::Laplace, &cfg).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.factor.v, y.factor.v);
            assert_eq!(x.b, y.b);
        }
    }
}
