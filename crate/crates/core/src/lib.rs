//! Sparse unsupervised latent-variable modelling over exponential-family
//! observations: a shared factorisation model X ≈ f(VΘ) with missing-data
//! support, fitted three ways —
//!
//! * [`l1`]: penalised MAP optimisation by alternating proximal gradient;
//! * [`weak_sparse`]: Bayesian inference under Laplace or Exponential
//!   priors (HMC with conjugate Gibbs rate updates);
//! * [`spike_slab`]: a spike-and-slab prior sampled by collapsed
//!   Metropolis-within-Gibbs, giving exact zeros in V.
//!
//! [`eval`] implements the element-holdout protocol the methods are
//! compared under (replicated splits, NLP in bits, RMSE), and [`datasets`]
//! provides the synthetic benchmarks and the CSV/JSON data format.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod l1;
pub mod model;
pub mod quad;
pub mod samplers;
pub mod spike_slab;
pub mod util;
pub mod weak_sparse;

pub use datasets::{
    generate_block_images, generate_sparse_counts, load_csv, save_csv, BlockImages,
    BlockImagesConfig, SparseCounts,
};
pub use error::{Error, Result};
pub use eval::{
    make_splits, nlp_bits, predict, rmse, score, EvalReport, FitOutput, HoldoutSplit,
    PredictedEntry, SplitScore,
};
pub use expfam::{conjugate_log_prior, ConjugateHyper, Family, FamilySpec};
pub use l1::{
    cross_validate, fit_l1, objective, soft_threshold, CrossValidation, CvCell, L1Config, L1Fit,
    Regulariser,
};
pub use model::{observed_loglik, FactorState, ObservationMatrix};
pub use samplers::{hmc_step, run_hmc, slice_step, HmcConfig, SliceConfig};
pub use spike_slab::{
    fit_spike_slab, sample_zv, slab_weight, spike_weight, ScanOrder, SpikeSlabChain,
    SpikeSlabConfig, SpikeSlabHyper, SpikeSlabState,
};
pub use weak_sparse::{gibbs_b, hmc_fit, WeakChain, WeakPrior, WeakSparseHyper, WeakSparseState};
