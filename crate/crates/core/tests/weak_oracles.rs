//! Prior-recovery, reconstruction, and Geweke-style calibration checks for
//! the weakly sparse Bayesian models.

mod common;

use common::{ks_pvalue, ks_statistic, mean_var};
use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use sparsefactor::weak_sparse::{
    gibbs_b, hmc_fit, log_joint_vtheta_grad, WeakPrior, WeakSparseHyper, WeakSparseState,
};
use sparsefactor::{FactorState, FamilySpec, HmcConfig, ObservationMatrix};

fn fully_missing(n: usize, d: usize) -> ObservationMatrix {
    ObservationMatrix::new(
        Array2::zeros((n, d)),
        Array2::from_elem((n, d), false),
        FamilySpec::gaussian(1.0).unwrap(),
    )
    .unwrap()
}

/// Marginal CDF of v under the Laplace prior with Gamma(shape α, scale β)
/// rates: integrating b out gives F(v) = 1 − ½(1 + βv)^{−α} for v ≥ 0 and
/// the mirror image below zero.
fn laplace_gamma_cdf(v: f64, shape: f64, scale: f64) -> f64 {
    if v >= 0.0 {
        1.0 - 0.5 * (1.0 + scale * v).powf(-shape)
    } else {
        0.5 * (1.0 - scale * v).powf(-shape)
    }
}

#[test]
fn laplace_prior_recovered_on_fully_missing_data() {
    // With no observed data the posterior is the prior; pooled V samples
    // must match the Gamma-mixed Laplace marginal.
    let data = fully_missing(1, 2);
    let hyper = WeakSparseHyper::default_for(2);
    let cfg = HmcConfig {
        leapfrog_steps: 15,
        step_size: 0.2,
        adapt_target: 0.8,
        burn_in: 300,
        keep: 500,
        thin: 8,
        seed: 31,
    };
    let chain = hmc_fit(&data, 2, &hyper, WeakPrior::Laplace, &cfg).unwrap();
    assert!(chain.warnings.is_empty(), "{:?}", chain.warnings);
    let mut pooled: Vec<f64> = chain
        .states
        .iter()
        .flat_map(|s| s.factor.v.iter().copied().collect::<Vec<_>>())
        .collect();
    let d = ks_statistic(&mut pooled, |v| {
        laplace_gamma_cdf(v, hyper.gamma_shape, hyper.gamma_scale)
    });
    let p = ks_pvalue(d, pooled.len());
    assert!(p > 0.01, "KS p-value {p} (statistic {d}, n = {})", pooled.len());
}

#[test]
fn rank_one_posterior_mean_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, d) = (15, 10);
    let u = Array1::from_shape_fn(n, |i| 1.0 + 0.1 * i as f64);
    let w = Array1::from_shape_fn(d, |j| if j % 2 == 0 { 1.0 } else { -0.8 });
    let truth = Array2::from_shape_fn((n, d), |(i, j)| u[i] * w[j]);
    use rand::Rng;
    let values = truth.mapv(|t| t + 0.01 * rng.random_range(-1.0..1.0));
    // Tiny-noise instance: the model's noise variance matches, so the
    // posterior concentrates tightly around the rank-1 truth.
    let data =
        ObservationMatrix::fully_observed(values, FamilySpec::gaussian(0.01).unwrap()).unwrap();
    let hyper = WeakSparseHyper::default_for(d);
    let cfg = HmcConfig {
        leapfrog_steps: 20,
        step_size: 0.01,
        adapt_target: 0.8,
        burn_in: 500,
        keep: 600,
        thin: 5,
        seed: 7,
    };
    let chain = hmc_fit(&data, 1, &hyper, WeakPrior::Laplace, &cfg).unwrap();
    let mut recon = Array2::<f64>::zeros((n, d));
    for s in &chain.states {
        recon += &s.factor.natural_params();
    }
    recon /= chain.states.len() as f64;
    let rmse = ((&recon - &truth).mapv(|e| e * e).sum() / (n * d) as f64).sqrt();
    assert!(rmse < 0.1, "posterior-mean reconstruction RMSE {rmse}");
}

#[test]
fn geweke_successive_conditional_keeps_b_prior_moments() {
    // Alternate (i) forward data simulation given the state with (ii) the
    // posterior transition kernel (one HMC update of (V, Θ), then the b
    // Gibbs draw). The b marginal must stay Gamma(α, β). Shape 3 keeps
    // E[1/b] finite; at shape 1 the compound |v| marginal has no mean and
    // the joint chain mixes far too slowly to calibrate against.
    let family = FamilySpec::gaussian(1.0).unwrap();
    let (n, k, d) = (3, 2, 2);
    let hyper = WeakSparseHyper::new(
        3.0,
        0.5,
        sparsefactor::ConjugateHyper::flat(d),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    let gamma = Gamma::new(hyper.gamma_shape, hyper.gamma_scale).unwrap();
    let mut b = Array1::from_shape_fn(k, |_| gamma.sample(&mut rng));
    use rand::Rng;
    let mut v = Array2::from_shape_fn((n, k), |(_, kk)| {
        let e: f64 = rand_distr::Exp::new(b[kk]).unwrap().sample(&mut rng);
        if rng.random_bool(0.5) {
            e
        } else {
            -e
        }
    });
    let mut theta = Array2::from_shape_fn((k, d), |_| {
        // Conjugate prior for the Gaussian family with λ = 0, ν = 1 is a
        // standard normal.
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });

    let iterations = 8000;
    let mut b_samples = Vec::new();
    for it in 0..iterations {
        // (i) Forward-simulate observations.
        let psi = v.dot(&theta);
        let values = Array2::from_shape_fn((n, d), |idx| family.sample(psi[idx], &mut rng));
        let data = ObservationMatrix::fully_observed(values, family).unwrap();

        // (ii) Transition: HMC on (V, Θ) targeting the conditional.
        let pack = |v: &Array2<f64>, t: &Array2<f64>| {
            let mut x: Vec<f64> = v.iter().copied().collect();
            x.extend(t.iter());
            x
        };
        let unpack = |x: &[f64]| {
            let v = Array2::from_shape_vec((n, k), x[..n * k].to_vec()).unwrap();
            let t = Array2::from_shape_vec((k, d), x[n * k..].to_vec()).unwrap();
            (v, t)
        };
        let b_now = b.clone();
        let target = |x: &[f64]| {
            let (v, t) = unpack(x);
            let state = WeakSparseState {
                factor: FactorState { v, theta: t },
                b: b_now.clone(),
                prior: WeakPrior::Laplace,
            };
            let (logp, gv, gt) = log_joint_vtheta_grad(&data, &state, &hyper).unwrap();
            let mut grad: Vec<f64> = gv.iter().copied().collect();
            grad.extend(gt.iter());
            (logp, grad)
        };
        let step = sparsefactor::hmc_step(target, &pack(&v, &theta), 0.08, 10, &mut rng);
        let (nv, nt) = unpack(&step.x);
        v = nv;
        theta = nt;

        let state = WeakSparseState {
            factor: FactorState {
                v: v.clone(),
                theta: theta.clone(),
            },
            b: b.clone(),
            prior: WeakPrior::Laplace,
        };
        b = gibbs_b(&state, &hyper, &mut rng);

        if it % 5 == 0 {
            b_samples.extend(b.iter().copied());
        }
    }

    let direct: Vec<f64> = (0..b_samples.len()).map(|_| gamma.sample(&mut rng)).collect();
    let (m_chain, v_chain) = mean_var(&b_samples);
    let (m_direct, v_direct) = mean_var(&direct);
    let se = (v_chain / b_samples.len() as f64 + v_direct / direct.len() as f64).sqrt();
    assert!(
        (m_chain - m_direct).abs() < 3.0 * se + 0.02,
        "b mean {m_chain} vs prior {m_direct} (se {se})"
    );
    // Second moment too.
    let m2_chain = b_samples.iter().map(|x| x * x).sum::<f64>() / b_samples.len() as f64;
    let m2_direct = direct.iter().map(|x| x * x).sum::<f64>() / direct.len() as f64;
    let var2 = |xs: &[f64], m2: f64| {
        xs.iter().map(|x| (x * x - m2) * (x * x - m2)).sum::<f64>() / xs.len() as f64
    };
    let se2 = (var2(&b_samples, m2_chain) / b_samples.len() as f64
        + var2(&direct, m2_direct) / direct.len() as f64)
        .sqrt();
    assert!(
        (m2_chain - m2_direct).abs() < 3.0 * se2 + 0.05,
        "b second moment {m2_chain} vs prior {m2_direct} (se {se2})"
    );
}

#[test]
fn exponential_prior_recovered_on_fully_missing_data() {
    // NXPCA analogue of the Laplace check; the positive half only.
    let data = fully_missing(1, 2);
    let hyper = WeakSparseHyper::default_for(2);
    let cfg = HmcConfig {
        leapfrog_steps: 15,
        step_size: 0.2,
        adapt_target: 0.8,
        burn_in: 300,
        keep: 500,
        thin: 8,
        seed: 77,
    };
    let chain = hmc_fit(&data, 2, &hyper, WeakPrior::Exponential, &cfg).unwrap();
    let mut pooled: Vec<f64> = chain
        .states
        .iter()
        .flat_map(|s| s.factor.v.iter().copied().collect::<Vec<_>>())
        .collect();
    assert!(pooled.iter().all(|&v| v > 0.0));
    // Gamma-mixed Exponential: F(v) = 1 − (1 + βv)^{−α}.
    let d = ks_statistic(&mut pooled, |v| {
        1.0 - (1.0 + hyper.gamma_scale * v).powf(-hyper.gamma_shape)
    });
    let p = ks_pvalue(d, pooled.len());
    assert!(p > 0.01, "KS p-value {p} (statistic {d})");
}
