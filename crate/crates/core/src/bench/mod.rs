//! Seeded synthetic experiments: Gaussian matrices, aspect-ratio bias
//! sweeps, Hill estimator validation on Pareto samples, MP convergence and
//! the teacher-student toy model.
//!
//! Every random stream is a ChaCha8 generator keyed by a seed derived from
//! the user seed and the coordinates of the trial, so results do not depend
//! on how trials are scheduled across threads.

pub mod stats;
pub mod toy;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{baseline_alpha_linear, farms_alpha_linear, SubsampleConfig};
use crate::spectral::{
    esd_of_matrix, hill_alpha, ks_distance_with, Esd, HillConfig, MpCdf, MpParams,
};
use stats::MeanStd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("trial {trial}: {message}")]
    Trial { trial: usize, message: String },
}

pub type Result<T> = std::result::Result<T, BenchError>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with a sequence of stream coordinates.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    Unit,
    /// Variance `2 / n`, with `n` the number of columns (fan-in).
    HeFanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub m: usize,
    pub n: usize,
    pub variance_mode: VarianceMode,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn variance(&self) -> f64 {
        match self.variance_mode {
            VarianceMode::Unit => 1.0,
            VarianceMode::HeFanIn => 2.0 / self.n as f64,
        }
    }
}

/// `m x n` matrix of i.i.d. normals, drawn in row-major order.
pub fn gen_gaussian(spec: &GaussianSpec) -> Mat<f64> {
    let sd = spec.variance().sqrt();
    let mut rng = rng_from_seed(spec.seed);
    let values: Vec<f64> = (0..spec.m * spec.n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::from_fn(spec.m, spec.n, |i, j| values[i * spec.n + j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSweepRow {
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    /// Trials that produced both alphas.
    pub completed: usize,
    pub baseline: Option<MeanStd>,
    pub farms: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub m: usize,
    pub n: usize,
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSweepResult {
    pub rows: Vec<BiasSweepRow>,
    /// `max - min` of the per-shape mean alphas.
    pub baseline_range: Option<f64>,
    pub farms_range: Option<f64>,
    pub failures: Vec<TrialFailure>,
}

fn range_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    (lo <= hi).then_some(hi - lo)
}

/// Baseline and FARMS alphas of He-initialized matrices for each shape.
pub fn bias_sweep(
    shapes: &[(usize, usize)],
    trials: usize,
    cfg: &SubsampleConfig,
    seed: u64,
) -> Result<BiasSweepResult> {
    if trials == 0 {
        return Err(BenchError::InvalidConfig("trials must be >= 1".into()));
    }
    if let Some(&(m, n)) = shapes.iter().find(|(m, n)| *m == 0 || *n == 0) {
        return Err(BenchError::InvalidConfig(format!("empty shape {m}x{n}")));
    }
    cfg.validate()
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;

    let jobs: Vec<(usize, usize)> = (0..shapes.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    let outcomes: Vec<std::result::Result<(f64, f64), String>> = jobs
        .par_iter()
        .map(|&(s, t)| {
            let (m, n) = shapes[s];
            let w = gen_gaussian(&GaussianSpec {
                m,
                n,
                variance_mode: VarianceMode::HeFanIn,
                seed: derive_seed(seed, &[m as u64, n as u64, t as u64]),
            });
            let base = baseline_alpha_linear(w.as_ref(), &cfg.hill).map_err(|e| e.to_string())?;
            let farms = farms_alpha_linear(w.as_ref(), cfg).map_err(|e| e.to_string())?;
            Ok((base, farms))
        })
        .collect();

    let mut rows = Vec::with_capacity(shapes.len());
    let mut failures = Vec::new();
    for (s, &(m, n)) in shapes.iter().enumerate() {
        let mut base = Vec::new();
        let mut farms = Vec::new();
        for (t, outcome) in outcomes[s * trials..(s + 1) * trials].iter().enumerate() {
            match outcome {
                Ok((b, f)) => {
                    base.push(*b);
                    farms.push(*f);
                }
                Err(error) => failures.push(TrialFailure {
                    m,
                    n,
                    trial: t,
                    error: error.clone(),
                }),
            }
        }
        rows.push(BiasSweepRow {
            m,
            n,
            trials,
            completed: base.len(),
            baseline: MeanStd::of(&base),
            farms: MeanStd::of(&farms),
        });
    }
    Ok(BiasSweepResult {
        baseline_range: range_of(rows.iter().filter_map(|r| r.baseline.map(|s| s.mean))),
        farms_range: range_of(rows.iter().filter_map(|r| r.farms.map(|s| s.mean))),
        rows,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HillValidation {
    pub true_alpha: f64,
    pub n_samples: usize,
    pub estimates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `n` draws from the Pareto law with density `∝ x^(-alpha)` on `[1, ∞)`.
pub fn pareto_samples(alpha: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let inv = -1.0 / (alpha - 1.0);
    (0..n)
        .map(|_| {
            // u in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            u.powf(inv)
        })
        .collect()
}

/// Runs the Hill estimator on `trials` Pareto samples of size `n_samples`.
pub fn hill_validation(
    true_alpha: f64,
    n_samples: usize,
    trials: usize,
    seed: u64,
    hill: &HillConfig,
) -> Result<HillValidation> {
    if !(true_alpha > 1.0 && true_alpha.is_finite()) {
        return Err(BenchError::InvalidConfig(format!(
            "true alpha {true_alpha} must be finite and > 1"
        )));
    }
    if n_samples < 2 || trials == 0 {
        return Err(BenchError::InvalidConfig(
            "need n_samples >= 2 and trials >= 1".into(),
        ));
    }
    hill.validate().map_err(BenchError::InvalidConfig)?;
    let estimates = (0..trials)
        .into_par_iter()
        .map(|t| {
            let xs = pareto_samples(true_alpha, n_samples, derive_seed(seed, &[t as u64]));
            let esd = Esd::new(xs, 1).map_err(|e| e.to_string())?;
            hill_alpha(&esd, hill).map_err(|e| e.to_string())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(trial, r)| r.map_err(|message| BenchError::Trial { trial, message }))
        .collect::<Result<Vec<f64>>>()?;
    let s = MeanStd::of(&estimates).expect("trials >= 1");
    Ok(HillValidation {
        true_alpha,
        n_samples,
        estimates,
        mean: s.mean,
        std: s.std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    /// Empirical density (fraction of the full spectrum per unit length).
    pub density: f64,
    /// Continuous MP density at the bin center.
    pub mp_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpCheckResult {
    pub m: usize,
    pub n: usize,
    pub y: f64,
    pub params: MpParams,
    pub ks_per_trial: Vec<f64>,
    pub ks_mean: f64,
    /// Pooled histogram of the normalized spectra of all trials.
    pub histogram: Vec<HistogramBin>,
}

/// Compares the spectrum of `(1/n) X Xᵀ` for unit-variance `m x n` Gaussian
/// `X` with the MP law at `y = m / n`.
pub fn mp_check(m: usize, n: usize, trials: usize, seed: u64, bins: usize) -> Result<MpCheckResult> {
    if m == 0 || n == 0 || trials == 0 || bins == 0 {
        return Err(BenchError::InvalidConfig(
            "m, n, trials and bins must all be >= 1".into(),
        ));
    }
    let y = m as f64 / n as f64;
    let cdf = MpCdf::new(y);
    let scale = n as f64;
    let spectra = (0..trials)
        .into_par_iter()
        .map(|t| {
            let x = gen_gaussian(&GaussianSpec {
                m,
                n,
                variance_mode: VarianceMode::Unit,
                seed: derive_seed(seed, &[m as u64, n as u64, t as u64]),
            });
            esd_of_matrix(x.as_ref()).map_err(|e| e.to_string())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(trial, r)| r.map_err(|message| BenchError::Trial { trial, message }))
        .collect::<Result<Vec<Esd>>>()?;

    let ks_per_trial: Vec<f64> = spectra
        .iter()
        .map(|e| ks_distance_with(e, &cdf, scale))
        .collect();
    let ks_mean = ks_per_trial.iter().sum::<f64>() / trials as f64;

    let params = *cdf.params();
    let pooled = Esd::concat(&spectra)
        .expect("non-empty spectra")
        .scaled(1.0 / scale);
    let mut hi = params.bulk_upper.max(pooled.max());
    if hi.is_nan() || hi <= 0.0 {
        hi = 1.0;
    }
    let width = hi / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let nonzero_mass = 1.0 - params.atom_mass;
    let histogram = pooled
        .histogram(&edges)
        .into_iter()
        .enumerate()
        .map(|(i, frac)| {
            let (lower, upper) = (edges[i], edges[i + 1]);
            HistogramBin {
                lower,
                upper,
                density: frac * nonzero_mass / width,
                mp_density: crate::spectral::mp_density(0.5 * (lower + upper), y).0,
            }
        })
        .collect();

    Ok(MpCheckResult {
        m,
        n,
        y,
        params,
        ks_per_trial,
        ks_mean,
        histogram,
    })
}
