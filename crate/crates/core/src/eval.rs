//! Element-wise holdout evaluation: replicated splits and NLP/RMSE scoring
//! of predictive reconstructions.
//!
//! Predictive log-probabilities are computed in nats everywhere else in the
//! crate; this module is the only place they are converted to bits.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{FactorState, ObservationMatrix};
use crate::util::{derive_seed, logsumexp};

/// A train/test split of the observed entries of one matrix. Held-out
/// entries are masked as missing in `train`.
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub train: ObservationMatrix,
    pub test_index: Vec<(usize, usize)>,
    pub test_values: Vec<f64>,
    pub seed: u64,
}

/// Replicated holdout splits with derived seeds. Each split masks
/// round(fraction × observed count) entries, sampled uniformly without
/// replacement; draws that would empty a row are rejected and retried.
pub fn make_splits(
    data: &ObservationMatrix,
    fraction: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<HoldoutSplit>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be at least 1".into()));
    }
    (0..replicates)
        .map(|r| make_one_split(data, fraction, derive_seed(seed, r as u64)))
        .collect()
}

fn make_one_split(data: &ObservationMatrix, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    let observed = data.observed_indices();
    let m = (fraction * observed.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..100 {
        let mut pool = observed.clone();
        pool.partial_shuffle(&mut rng, m);
        let mut test: Vec<(usize, usize)> = pool[..m].to_vec();
        test.sort_unstable();

        // Reject draws that leave any row with zero observed entries.
        let mut remaining = vec![0usize; data.nrows()];
        for &(n, _) in &observed {
            remaining[n] += 1;
        }
        for &(n, _) in &test {
            remaining[n] -= 1;
        }
        if remaining.iter().any(|&c| c == 0) {
            continue;
        }

        let train = data.mask_entries(&test)?;
        let test_values = test.iter().map(|&(n, d)| data.value(n, d)).collect();
        return Ok(HoldoutSplit {
            train,
            test_index: test,
            test_values,
            seed,
        });
    }
    Err(Error::SplitInfeasible(format!(
        "holdout fraction {fraction} left a row empty in 100 consecutive draws"
    )))
}

/// −Σ log-probabilities with each entry converted from nats to bits.
pub fn nlp_bits(predictive_log_probs_nats: &[f64]) -> Result<f64> {
    if predictive_log_probs_nats.is_empty() {
        return Err(Error::InvalidArgument(
            "nlp_bits requires at least one prediction".into(),
        ));
    }
    let mut total = 0.0;
    for (index, &lp) in predictive_log_probs_nats.iter().enumerate() {
        if !lp.is_finite() {
            return Err(Error::NonFinitePrediction { index });
        }
        total -= lp / std::f64::consts::LN_2;
    }
    Ok(total)
}

/// Root mean squared error between predictions and held-out truth.
pub fn rmse(predicted_means: &[f64], test_values: &[f64]) -> Result<f64> {
    if predicted_means.len() != test_values.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} test values",
            predicted_means.len(),
            test_values.len()
        )));
    }
    if predicted_means.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty set".into()));
    }
    let mse = predicted_means
        .iter()
        .zip(test_values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predicted_means.len() as f64;
    Ok(mse.sqrt())
}

/// What a fitted method hands to the scorer: a single state from an
/// optimiser, or a chain of posterior samples.
#[derive(Clone, Debug)]
pub enum FitOutput {
    Point(FactorState),
    Chain(Vec<FactorState>),
}

#[derive(Clone, Copy, Debug)]
pub struct PredictedEntry {
    pub log_prob_nats: f64,
    pub mean: f64,
}

/// Per-test-entry predictive log-probability and mean.
///
/// Optimisation output uses the plug-in predictive p(x* | v_n Θ). A chain
/// uses the Monte Carlo posterior predictive (1/S) Σ_s p(x* | v_n⁽ˢ⁾ Θ⁽ˢ⁾),
/// with the log taken through log-sum-exp; the reported mean averages the
/// per-sample means.
pub fn predict(output: &FitOutput, split: &HoldoutSplit) -> Result<Vec<PredictedEntry>> {
    let family = split.train.family();
    match output {
        FitOutput::Point(state) => split
            .test_index
            .iter()
            .zip(&split.test_values)
            .map(|(&(n, d), &x)| {
                let psi = state.v.row(n).dot(&state.theta.column(d));
                Ok(PredictedEntry {
                    log_prob_nats: family.log_prob(x, psi)?,
                    mean: family.data_mean(psi),
                })
            })
            .collect(),
        FitOutput::Chain(states) => {
            if states.is_empty() {
                return Err(Error::EmptyChain);
            }
            let log_s = (states.len() as f64).ln();
            split
                .test_index
                .iter()
                .zip(&split.test_values)
                .map(|(&(n, d), &x)| {
                    let mut lps = Vec::with_capacity(states.len());
                    let mut mean = 0.0;
                    for state in states {
                        let psi = state.v.row(n).dot(&state.theta.column(d));
                        lps.push(family.log_prob(x, psi)?);
                        mean += family.data_mean(psi);
                    }
                    Ok(PredictedEntry {
                        log_prob_nats: logsumexp(&lps) - log_s,
                        mean: mean / states.len() as f64,
                    })
                })
                .collect()
        }
    }
}

/// Score one fitted output on one split.
pub fn score(output: &FitOutput, split: &HoldoutSplit) -> Result<(f64, f64)> {
    let entries = predict(output, split)?;
    let lps: Vec<f64> = entries.iter().map(|e| e.log_prob_nats).collect();
    let means: Vec<f64> = entries.iter().map(|e| e.mean).collect();
    Ok((nlp_bits(&lps)?, rmse(&means, &split.test_values)?))
}

/// One row of the per-split results table.
#[derive(Clone, Debug)]
pub struct SplitScore {
    pub split_id: usize,
    pub nlp_bits: f64,
    pub rmse: f64,
    pub wall_seconds: f64,
    pub converged: bool,
}

/// NLP/RMSE per split plus mean and standard deviation across replicates.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_split: Vec<SplitScore>,
    pub nlp_bits_mean: f64,
    pub nlp_bits_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

impl EvalReport {
    pub fn from_scores(per_split: Vec<SplitScore>) -> Result<Self> {
        if per_split.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one split".into()));
        }
        let nlps = Array1::from_iter(per_split.iter().map(|s| s.nlp_bits));
        let rmses = Array1::from_iter(per_split.iter().map(|s| s.rmse));
        let (nlp_bits_mean, nlp_bits_std) = mean_std(&nlps);
        let (rmse_mean, rmse_std) = mean_std(&rmses);
        Ok(Self {
            per_split,
            nlp_bits_mean,
            nlp_bits_std,
            rmse_mean,
            rmse_std,
        })
    }
}

/// Mean and sample standard deviation (the error bars reported everywhere).
pub fn mean_std(xs: &Array1<f64>) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.sum() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
