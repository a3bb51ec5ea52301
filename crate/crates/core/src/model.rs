//! Shared data model: observation matrices with missing entries, factor
//! states, and the observed-data log-likelihood used by every method.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::expfam::FamilySpec;

/// An N×D data matrix with a per-entry observed/missing mask.
///
/// Missing entries are represented only by the mask; the numeric value at a
/// missing cell is ignored (a Poisson zero is valid data, so sentinels are
/// ruled out). Immutable after construction.
#[derive(Clone, Debug)]
pub struct ObservationMatrix {
    values: Array2<f64>,
    observed: Array2<bool>,
    family: FamilySpec,
}

impl ObservationMatrix {
    /// Validates shapes and that every observed entry lies in the family
    /// support. Rows with zero observed entries are permitted here (prior
    /// recovery runs need fully-missing data); loaders reject them via
    /// [`ObservationMatrix::require_nonempty_rows`].
    pub fn new(values: Array2<f64>, observed: Array2<bool>, family: FamilySpec) -> Result<Self> {
        if values.dim() != observed.dim() {
            return Err(Error::DimensionMismatch(format!(
                "values are {:?}, mask is {:?}",
                values.dim(),
                observed.dim()
            )));
        }
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "observation matrix must have at least one row and column".into(),
            ));
        }
        for ((i, j), &obs) in observed.indexed_iter() {
            if obs && !family.in_support(values[(i, j)]) {
                return Err(Error::Support {
                    family: family.name(),
                    row: i,
                    col: j,
                    value: values[(i, j)],
                });
            }
        }
        Ok(Self {
            values,
            observed,
            family,
        })
    }

    /// Convenience constructor for fully observed data.
    pub fn fully_observed(values: Array2<f64>, family: FamilySpec) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(values, mask, family)
    }

    /// Load-time check: every row must have at least one observed entry,
    /// otherwise its latent vector would be prior-only and distort
    /// evaluation.
    pub fn require_nonempty_rows(&self) -> Result<()> {
        for (i, row) in self.observed.outer_iter().enumerate() {
            if !row.iter().any(|&o| o) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has no observed entries"
                )));
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn family(&self) -> FamilySpec {
        self.family
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    pub fn is_observed(&self, n: usize, d: usize) -> bool {
        self.observed[(n, d)]
    }

    pub fn value(&self, n: usize, d: usize) -> f64 {
        self.values[(n, d)]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Indices of observed entries in row-major order.
    pub fn observed_indices(&self) -> Vec<(usize, usize)> {
        self.observed
            .indexed_iter()
            .filter_map(|((i, j), &o)| o.then_some((i, j)))
            .collect()
    }

    /// Returns a copy with the given entries masked out (used by holdout
    /// splitting). Indices must currently be observed.
    pub fn mask_entries(&self, entries: &[(usize, usize)]) -> Result<Self> {
        let mut observed = self.observed.clone();
        for &(n, d) in entries {
            if n >= self.nrows() || d >= self.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "mask index ({n}, {d}) out of range"
                )));
            }
            if !observed[(n, d)] {
                return Err(Error::InvalidArgument(format!(
                    "entry ({n}, {d}) is already missing"
                )));
            }
            observed[(n, d)] = false;
        }
        Ok(Self {
            values: self.values.clone(),
            observed,
            family: self.family,
        })
    }
}

/// Latent weights V (N×K) and factor loadings Θ (K×D) shared by all methods.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorState {
    pub v: Array2<f64>,
    pub theta: Array2<f64>,
}

impl FactorState {
    pub fn new(v: Array2<f64>, theta: Array2<f64>) -> Result<Self> {
        if v.ncols() != theta.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "V has {} columns but Theta has {} rows",
                v.ncols(),
                theta.nrows()
            )));
        }
        if v.iter().chain(theta.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "factor state entries must be finite".into(),
            ));
        }
        Ok(Self { v, theta })
    }

    pub fn zeros(n: usize, k: usize, d: usize) -> Self {
        Self {
            v: Array2::zeros((n, k)),
            theta: Array2::zeros((k, d)),
        }
    }

    pub fn nrows(&self) -> usize {
        self.v.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn ncols(&self) -> usize {
        self.theta.ncols()
    }

    /// Natural parameters Ψ = VΘ.
    pub fn natural_params(&self) -> Array2<f64> {
        self.v.dot(&self.theta)
    }
}

fn check_dims(data: &ObservationMatrix, state: &FactorState) -> Result<()> {
    if state.nrows() != data.nrows() || state.ncols() != data.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "state is {}x{}({}), data is {}x{}",
            state.nrows(),
            state.ncols(),
            state.k(),
            data.nrows(),
            data.ncols()
        )));
    }
    Ok(())
}

/// Σ over observed entries of log p(x_nd | ψ_nd), in nats. Missing entries
/// contribute exactly zero.
pub fn observed_loglik(data: &ObservationMatrix, state: &FactorState) -> Result<f64> {
    check_dims(data, state)?;
    let psi = state.natural_params();
    let family = data.family();
    let mut total = 0.0;
    for ((i, j), &obs) in data.observed().indexed_iter() {
        if obs {
            total += family.lp(data.value(i, j), psi[(i, j)]);
        }
    }
    Ok(total)
}

/// Residual matrix R with R_nd = s(x_nd) − A'(ψ_nd) at observed entries and
/// zero elsewhere. The gradient of the observed log-likelihood is then
/// R·Θᵀ with respect to V and Vᵀ·R with respect to Θ.
pub(crate) fn residual_matrix(data: &ObservationMatrix, psi: &Array2<f64>) -> Array2<f64> {
    let family = data.family();
    let mut r = Array2::zeros(psi.dim());
    for ((i, j), &obs) in data.observed().indexed_iter() {
        if obs {
            r[(i, j)] = family.suff_stat(data.value(i, j)) - family.a_prime(psi[(i, j)]);
        }
    }
    r
}

/// Gradient of `observed_loglik` with respect to the latent row v_n.
pub fn loglik_grad_v(data: &ObservationMatrix, state: &FactorState, n: usize) -> Result<Array1<f64>> {
    check_dims(data, state)?;
    if n >= data.nrows() {
        return Err(Error::InvalidArgument(format!("row index {n} out of range")));
    }
    let family = data.family();
    let psi_row = state.v.row(n).dot(&state.theta);
    let mut grad = Array1::zeros(state.k());
    for d in 0..data.ncols() {
        if data.is_observed(n, d) {
            let r = family.suff_stat(data.value(n, d)) - family.a_prime(psi_row[d]);
            grad.scaled_add(r, &state.theta.column(d));
        }
    }
    Ok(grad)
}

/// Gradient of `observed_loglik` with respect to the factor row θ_k.
pub fn loglik_grad_theta(
    data: &ObservationMatrix,
    state: &FactorState,
    k: usize,
) -> Result<Array1<f64>> {
    check_dims(data, state)?;
    if k >= state.k() {
        return Err(Error::InvalidArgument(format!(
            "factor index {k} out of range"
        )));
    }
    let family = data.family();
    let psi = state.natural_params();
    let mut grad = Array1::zeros(data.ncols());
    for n in 0..data.nrows() {
        let vnk = state.v[(n, k)];
        for d in 0..data.ncols() {
            if data.is_observed(n, d) {
                let r = family.suff_stat(data.value(n, d)) - family.a_prime(psi[(n, d)]);
                grad[d] += r * vnk;
            }
        }
    }
    Ok(grad)
}

/// Full-matrix gradients (R·Θᵀ, Vᵀ·R); the per-index operations above are
/// rows of these.
pub fn loglik_grads(
    data: &ObservationMatrix,
    state: &FactorState,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(data, state)?;
    let psi = state.natural_params();
    let r = residual_matrix(data, &psi);
    Ok((r.dot(&state.theta.t()), state.v.t().dot(&r)))
}

/// Log-likelihood together with both gradients in one pass over Ψ.
pub fn loglik_and_grads(
    data: &ObservationMatrix,
    state: &FactorState,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_dims(data, state)?;
    let psi = state.natural_params();
    let family = data.family();
    let mut loglik = 0.0;
    let mut r = Array2::zeros(psi.dim());
    for ((i, j), &obs) in data.observed().indexed_iter() {
        if obs {
            let (x, p) = (data.value(i, j), psi[(i, j)]);
            loglik += family.lp(x, p);
            r[(i, j)] = family.suff_stat(x) - family.a_prime(p);
        }
    }
    Ok((loglik, r.dot(&state.theta.t()), state.v.t().dot(&r)))
}
