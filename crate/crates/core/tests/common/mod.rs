//! Independent numerical oracles shared by the integration tests: brute
//! quadrature for slab integrals, a Jacobi eigensolver for truncated-SVD
//! objectives, and a Kolmogorov-Smirnov test. Nothing here touches the
//! implementation paths it checks.

#![allow(dead_code)]

/// log ∫ exp(g(v)) dv by bracketing the mode on a fine grid and then
/// integrating exp(g − max) with adaptive Simpson.
pub fn log_integral_adaptive<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64) -> f64 {
    let coarse = 20_000;
    let mut best_x = lo;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=coarse {
        let x = lo + (hi - lo) * i as f64 / coarse as f64;
        let y = g(x);
        if y > best {
            best = y;
            best_x = x;
        }
    }
    assert!(best.is_finite(), "integrand has no finite values on [{lo}, {hi}]");

    // Walk outward until the integrand is negligible relative to the peak.
    let step = (hi - lo) / coarse as f64;
    let mut a = best_x;
    while a > lo && g(a) > best - 60.0 {
        a -= step;
    }
    let mut b = best_x;
    while b < hi && g(b) > best - 60.0 {
        b += step;
    }

    let f = |x: f64| (g(x) - best).exp();
    let integral = adaptive_simpson(&f, a, b, 1e-12, 60);
    best + integral.ln()
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, m: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let whole = simpson(f, a, m, b);
    recurse(f, a, m, b, whole, tol, depth)
}

fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    m: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let left = simpson(f, a, lm, m);
    let right = simpson(f, m, rm, b);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    recurse(f, a, lm, m, left, tol / 2.0, depth - 1)
        + recurse(f, m, rm, b, right, tol / 2.0, depth - 1)
}

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic
/// Jacobi rotations.
pub fn jacobi_eigen(a: &ndarray::Array2<f64>) -> (Vec<f64>, ndarray::Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut vecs = ndarray::Array2::eye(n);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.diag().iter().map(|d| d.abs()).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[(i, p)], m[(i, q)]);
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[(p, i)], m[(q, i)]);
                    m[(p, i)] = c * mpi - s * mqi;
                    m[(q, i)] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (vecs[(i, p)], vecs[(i, q)]);
                    vecs[(i, p)] = c * vip - s * viq;
                    vecs[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = m.diag().to_vec();
    (eigvals, vecs)
}

/// Gaussian (σ² = 1) negative log-likelihood of the best rank-k
/// approximation of a fully observed matrix, via the eigendecomposition of
/// XᵀX (Eckart-Young).
pub fn truncated_svd_objective(x: &ndarray::Array2<f64>, k: usize) -> f64 {
    let gram = x.t().dot(x);
    let (eigvals, vecs) = jacobi_eigen(&gram);
    let mut order: Vec<usize> = (0..eigvals.len()).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let d = x.ncols();
    let mut projector = ndarray::Array2::<f64>::zeros((d, d));
    for &idx in order.iter().take(k) {
        let col = vecs.column(idx);
        for i in 0..d {
            for j in 0..d {
                projector[(i, j)] += col[i] * col[j];
            }
        }
    }
    let approx = x.dot(&projector);
    let (n, dd) = x.dim();
    let sq: f64 = (x - &approx).iter().map(|e| e * e).sum();
    0.5 * sq + (n * dd) as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Abramowitz-Stegun 7.1.26 rational approximation of erf (|ε| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

/// Two-sided KS statistic of a sample against a continuous CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic Kolmogorov p-value Q(λ) = 2 Σ (−1)^{j−1} exp(−2 j² λ²).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let lambda = d * (sqrt_n + 0.12 + 0.11 / sqrt_n);
    let mut p = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        p += 2.0 * sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
