//! Synthetic data generators and the CSV loader.
//!
//! Data files are CSV with a `col0,...,col{D-1}` header and missing entries
//! written literally as `NA`; a JSON sidecar names the observation family:
//! `{"family": "gaussian"|"bernoulli"|"poisson", "gaussian_noise_variance": x}`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::FamilySpec;
use crate::model::ObservationMatrix;

/// Binary block-images benchmark: 6×6 images, four disjoint 3×3 corner
/// blocks as latent features, OR-composed and bit-flipped.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BlockImagesConfig {
    pub n_images: usize,
    /// Probability of flipping each pixel after composition.
    pub flip_prob: f64,
    /// Probability that an image activates each feature.
    pub feature_prob: f64,
    pub seed: u64,
}

impl Default for BlockImagesConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            flip_prob: 0.1,
            feature_prob: 0.5,
            seed: 0,
        }
    }
}

impl BlockImagesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::InvalidArgument("n_images must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip_prob must lie in [0, 1), got {}",
                self.flip_prob
            )));
        }
        if !(self.feature_prob > 0.0 && self.feature_prob < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "feature_prob must lie in (0, 1), got {}",
                self.feature_prob
            )));
        }
        Ok(())
    }
}

pub const BLOCK_IMAGE_DIM: usize = 36;
pub const BLOCK_FEATURES: usize = 4;

#[derive(Clone, Debug)]
pub struct BlockImages {
    pub data: ObservationMatrix,
    pub true_z: Array2<bool>,
    pub features: Array2<bool>,
}

/// The four features: 3×3 blocks in the corners of the 6×6 grid. They tile
/// the grid's corners disjointly, so all four active means all-ones.
fn corner_features() -> Array2<bool> {
    let mut features = Array2::from_elem((BLOCK_FEATURES, BLOCK_IMAGE_DIM), false);
    for (f, &(r0, c0)) in [(0, 0), (0, 3), (3, 0), (3, 3)].iter().enumerate() {
        for r in r0..r0 + 3 {
            for c in c0..c0 + 3 {
                features[(f, r * 6 + c)] = true;
            }
        }
    }
    features
}

/// Bernoulli observation matrix of OR-composed, noise-flipped block images
/// plus the ground-truth activations for sparsity-recovery checks.
pub fn generate_block_images(cfg: &BlockImagesConfig) -> Result<BlockImages> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features = corner_features();
    let mut true_z = Array2::from_elem((cfg.n_images, BLOCK_FEATURES), false);
    let mut values = Array2::zeros((cfg.n_images, BLOCK_IMAGE_DIM));

    for n in 0..cfg.n_images {
        for f in 0..BLOCK_FEATURES {
            true_z[(n, f)] = rng.random_bool(cfg.feature_prob);
        }
        for d in 0..BLOCK_IMAGE_DIM {
            let mut pixel = (0..BLOCK_FEATURES).any(|f| true_z[(n, f)] && features[(f, d)]);
            if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
                pixel = !pixel;
            }
            values[(n, d)] = if pixel { 1.0 } else { 0.0 };
        }
    }
    let data = ObservationMatrix::fully_observed(values, FamilySpec::bernoulli())?;
    Ok(BlockImages {
        data,
        true_z,
        features,
    })
}

#[derive(Clone, Debug)]
pub struct SparseCounts {
    pub data: ObservationMatrix,
    /// Non-zero count of the noiseless rate matrix V_true·Θ_true.
    pub true_nonzero_count: usize,
    /// The rate matrix itself, for inspection in tests.
    pub rates: Array2<f64>,
}

/// Sparse Poisson count matrices: non-negative sparse factors whose product
/// gives the rate matrix, with the factor activation probabilities solved
/// so the fraction of structurally non-zero rates is ≈ `density`. Active
/// rates are bounded away from zero, so the data's zero fraction tracks
/// 1 − density.
pub fn generate_sparse_counts(
    n: usize,
    d: usize,
    k_true: usize,
    density: f64,
    seed: u64,
) -> Result<SparseCounts> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1), got {density}"
        )));
    }
    if n == 0 || d == 0 || k_true == 0 {
        return Err(Error::InvalidArgument(
            "n, d, and k_true must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // P(rate > 0) = 1 − (1 − q_v·q_t)^K = density, split evenly.
    let per_factor = 1.0 - (1.0 - density).powf(1.0 / k_true as f64);
    let q = per_factor.sqrt();

    let exp1 = Exp::new(1.0).expect("positive rate");
    let v_true = Array2::from_shape_fn((n, k_true), |_| {
        if rng.random_bool(q) {
            1.0 + 0.5 * exp1.sample(&mut rng)
        } else {
            0.0
        }
    });
    let theta_true = Array2::from_shape_fn((k_true, d), |_| {
        if rng.random_bool(q) {
            2.0 + exp1.sample(&mut rng)
        } else {
            0.0
        }
    });
    let rates = v_true.dot(&theta_true);
    let true_nonzero_count = rates.iter().filter(|&&r| r > 0.0).count();

    let family = FamilySpec::poisson();
    let values = rates.mapv(|rate| {
        if rate == 0.0 {
            0.0
        } else {
            rand_distr::Poisson::new(rate)
                .expect("positive rate")
                .sample(&mut rng)
        }
    });
    let data = ObservationMatrix::fully_observed(values, family)?;
    Ok(SparseCounts {
        data,
        true_nonzero_count,
        rates,
    })
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    family: String,
    #[serde(default = "default_variance")]
    gaussian_noise_variance: f64,
}

fn default_variance() -> f64 {
    1.0
}

fn family_from_meta(meta: &Metadata) -> Result<FamilySpec> {
    match meta.family.as_str() {
        "gaussian" => FamilySpec::gaussian(meta.gaussian_noise_variance),
        "bernoulli" => Ok(FamilySpec::bernoulli()),
        "poisson" => Ok(FamilySpec::poisson()),
        other => Err(Error::InvalidArgument(format!(
            "unknown family \"{other}\" in metadata"
        ))),
    }
}

/// Loads a values CSV plus its JSON metadata sidecar. Malformed cells,
/// unknown families, out-of-support values, and rows with no observed
/// entries are load errors with coordinates.
pub fn load_csv(path_values: &Path, path_meta: &Path) -> Result<ObservationMatrix> {
    let meta: Metadata = serde_json::from_str(&std::fs::read_to_string(path_meta)?)?;
    let family = family_from_meta(&meta)?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path_values)?;
    let headers = reader.headers()?.clone();
    let d = headers.len();
    for (i, h) in headers.iter().enumerate() {
        if h != format!("col{i}") {
            return Err(Error::Load {
                row: 0,
                col: i,
                msg: format!("expected header col{i}, found \"{h}\""),
            });
        }
    }

    let mut values: Vec<f64> = Vec::new();
    let mut observed: Vec<bool> = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::Load {
                row,
                col: record.len().min(d),
                msg: format!("expected {d} columns, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if cell == "NA" {
                values.push(0.0);
                observed.push(false);
            } else {
                let parsed: f64 = cell.parse().map_err(|_| Error::Load {
                    row,
                    col,
                    msg: format!("cannot parse \"{cell}\" as a number"),
                })?;
                values.push(parsed);
                observed.push(true);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("data file has no rows".into()));
    }

    let values = Array2::from_shape_vec((n, d), values).expect("row-major cells");
    let observed = Array2::from_shape_vec((n, d), observed).expect("row-major cells");
    let matrix = ObservationMatrix::new(values, observed, family)?;
    matrix.require_nonempty_rows()?;
    Ok(matrix)
}

/// Writes the values CSV and JSON metadata in the exact format `load_csv`
/// reads; save → load is the identity on values and mask.
pub fn save_csv(data: &ObservationMatrix, path_values: &Path, path_meta: &Path) -> Result<()> {
    let meta = Metadata {
        family: data.family().name().to_string(),
        gaussian_noise_variance: data.family().gaussian_noise_variance,
    };
    std::fs::write(path_meta, serde_json::to_string_pretty(&meta)?)?;

    let mut writer = csv::Writer::from_path(path_values)?;
    let d = data.ncols();
    writer.write_record((0..d).map(|i| format!("col{i}")))?;
    for n in 0..data.nrows() {
        let record: Vec<String> = (0..d)
            .map(|j| {
                if data.is_observed(n, j) {
                    data.value(n, j).to_string()
                } else {
                    "NA".to_string()
                }
            })
            .collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Forward-simulated observations from a factor state, for prior-recovery
/// and calibration checks.
pub fn sample_data<R: Rng + ?Sized>(
    family: FamilySpec,
    psi: &Array2<f64>,
    rng: &mut R,
) -> Result<ObservationMatrix> {
    let values = Array2::from_shape_fn(psi.dim(), |idx| family.sample(psi[idx], rng));
    ObservationMatrix::fully_observed(values, family)
}

/// Column sums of a boolean matrix, handy for checking recovered feature
/// usage against `true_z`.
pub fn activation_counts(z: &Array2<bool>) -> Array1<usize> {
    Array1::from_iter(
        (0..z.ncols()).map(|k| z.column(k).iter().filter(|&&b| b).count()),
    )
}
