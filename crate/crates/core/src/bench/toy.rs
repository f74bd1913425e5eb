//! Single-index teacher and a two-layer student whose first layer is trained
//! by SGD on the squared loss.
//!
//! Teacher: `y = g(<w*, x>)` with unit-norm `w*` and `x ~ N(0, I_d)`.
//! Student: `f(x) = (1/√p) Σ_j a_j σ(<w_j, x>)` with `a_j = ±1` frozen and
//! `W = [w_1; ...; w_p]` (`p x d`) trained. Training quality is the overlap
//! `|<v₁(W), w*>|` of the top right-singular vector with the teacher.

use faer::{Mat, MatRef};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stats::{correlation, CorrelationMethod, MeanStd};
use super::{derive_seed, rng_from_seed};
use crate::sampler::{baseline_alpha_linear, farms_alpha_linear, SubsampleConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (width {width}, seed {seed_index})")]
    Divergence {
        width: usize,
        seed_index: usize,
        step: usize,
    },
    #[error("width {width}, step {step}: {message}")]
    Spectral {
        width: usize,
        step: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, ToyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperimentConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    /// Independent runs per width.
    pub seeds: usize,
    /// Base seed; the teacher direction of run `s` depends only on this and `s`.
    pub seed: u64,
    pub teacher_activation: Activation,
    pub student_activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_stride: usize,
    /// First-layer init is `init_scale * N(0, 1/d)` per entry.
    pub init_scale: f64,
    pub correlation: CorrelationMethod,
    pub subsample: SubsampleConfig,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        Self {
            input_dim: 500,
            widths: vec![250, 500, 1000, 2000],
            seeds: 3,
            seed: 0,
            teacher_activation: Activation::Relu,
            student_activation: Activation::Relu,
            steps: 100,
            batch_size: 256,
            learning_rate: 1.0,
            eval_stride: 10,
            init_scale: 0.3,
            correlation: CorrelationMethod::Pearson,
            subsample: SubsampleConfig::default(),
        }
    }
}

impl ToyExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ToyError::InvalidConfig(m));
        if self.input_dim < 2 {
            return bad("input_dim must be >= 2".into());
        }
        if self.widths.is_empty() || self.widths.iter().any(|&p| p < 2) {
            return bad("widths must be non-empty and each >= 2".into());
        }
        if self.seeds == 0 || self.batch_size == 0 || self.eval_stride == 0 {
            return bad("seeds, batch_size and eval_stride must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be >= 0", self.init_scale));
        }
        self.subsample
            .validate()
            .map_err(|e| ToyError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean half squared error of the preceding batch; `None` before training.
    pub loss: Option<f64>,
    pub alignment: f64,
    pub baseline_alpha: f64,
    pub farms_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub width: usize,
    pub seed_index: usize,
    pub checkpoints: Vec<Checkpoint>,
    /// Checkpoint with the highest alignment (earliest on ties).
    pub best: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub width: usize,
    pub aspect_ratio: f64,
    pub alignment: MeanStd,
    pub baseline_alpha: MeanStd,
    pub farms_alpha: MeanStd,
}

/// Correlations of best-checkpoint alphas with alignment. `None` when a
/// coefficient is undefined (fewer than 3 points or zero variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub method: CorrelationMethod,
    /// Over per-width means.
    pub baseline: Option<f64>,
    pub farms: Option<f64>,
    /// Over all individual runs.
    pub baseline_pooled: Option<f64>,
    pub farms_pooled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub config: ToyExperimentConfig,
    pub runs: Vec<ToyRun>,
    pub summary: Vec<WidthSummary>,
    pub correlation: CorrelationSummary,
}

/// `|<v₁(W), w*>|` for the top right-singular vector `v₁` of `w`.
/// `w_star` is normalized internally.
pub fn alignment(w: MatRef<'_, f64>, w_star: &[f64]) -> Option<f64> {
    assert_eq!(w.ncols(), w_star.len(), "teacher dimension mismatch");
    let norm = w_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 {
        return None;
    }
    let svd = w.thin_svd().ok()?;
    let v = svd.V();
    let dot: f64 = (0..w_star.len()).map(|i| v[(i, 0)] * w_star[i]).sum();
    Some((dot / norm).abs().min(1.0))
}

fn gaussian_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit teacher direction for run `seed_index`.
pub fn teacher_direction(cfg: &ToyExperimentConfig, seed_index: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[0, seed_index as u64]));
    let mut w = gaussian_vec(&mut rng, cfg.input_dim);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    w
}

fn checkpoint(
    w: &Mat<f64>,
    w_star: &[f64],
    step: usize,
    loss: Option<f64>,
    sub: &SubsampleConfig,
) -> Result<Checkpoint> {
    let width = w.nrows();
    let spec = |message: String| ToyError::Spectral {
        width,
        step,
        message,
    };
    let alignment = alignment(w.as_ref(), w_star).ok_or_else(|| spec("SVD failed".into()))?;
    let baseline_alpha =
        baseline_alpha_linear(w.as_ref(), &sub.hill).map_err(|e| spec(e.to_string()))?;
    let farms_alpha = farms_alpha_linear(w.as_ref(), sub).map_err(|e| spec(e.to_string()))?;
    Ok(Checkpoint {
        step,
        loss,
        alignment,
        baseline_alpha,
        farms_alpha,
    })
}

/// Trains one student of width `width` and records checkpoints every
/// `eval_stride` steps (and after the last step).
pub fn train_student(cfg: &ToyExperimentConfig, width: usize, seed_index: usize) -> Result<ToyRun> {
    let d = cfg.input_dim;
    let p = width;
    let b = cfg.batch_size;
    let w_star = teacher_direction(cfg, seed_index);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[1, seed_index as u64, p as u64]));

    let init_sd = cfg.init_scale / (d as f64).sqrt();
    let init = gaussian_vec(&mut rng, p * d);
    let mut w = Mat::from_fn(p, d, |i, j| init_sd * init[i * d + j]);
    let a: Vec<f64> = (0..p)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let inv_sqrt_p = 1.0 / (p as f64).sqrt();

    let mut checkpoints = Vec::new();
    let mut loss = None;
    for step in 0..=cfg.steps {
        if step % cfg.eval_stride == 0 || step == cfg.steps {
            checkpoints.push(checkpoint(&w, &w_star, step, loss, &cfg.subsample)?);
        }
        if step == cfg.steps {
            break;
        }
        let xs = gaussian_vec(&mut rng, b * d);
        let x = Mat::from_fn(b, d, |i, j| xs[i * d + j]);
        let h = &x * w.transpose();
        let mut delta = Mat::<f64>::zeros(b, p);
        let mut sq = 0.0;
        for i in 0..b {
            let proj: f64 = (0..d).map(|j| x[(i, j)] * w_star[j]).sum();
            let target = cfg.teacher_activation.value(proj);
            let out: f64 = (0..p)
                .map(|k| a[k] * cfg.student_activation.value(h[(i, k)]))
                .sum::<f64>()
                * inv_sqrt_p;
            let r = out - target;
            sq += r * r;
            for k in 0..p {
                delta[(i, k)] =
                    r * cfg.student_activation.derivative(h[(i, k)]) * a[k] * inv_sqrt_p / b as f64;
            }
        }
        let batch_loss = 0.5 * sq / b as f64;
        loss = Some(batch_loss);
        if !batch_loss.is_finite() {
            return Err(ToyError::Divergence {
                width,
                seed_index,
                step,
            });
        }
        let grad = delta.transpose() * &x;
        w -= cfg.learning_rate * grad;
    }

    let best = *checkpoints
        .iter()
        .fold(None::<&Checkpoint>, |best, c| match best {
            Some(b) if b.alignment >= c.alignment => Some(b),
            _ => Some(c),
        })
        .expect("at least one checkpoint");
    Ok(ToyRun {
        width,
        seed_index,
        checkpoints,
        best,
    })
}

/// Width sweep: trains `seeds` students per width and correlates the best
/// checkpoints' alphas with their alignment.
pub fn teacher_student_run(cfg: &ToyExperimentConfig) -> Result<AlignmentSeries> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .widths
        .iter()
        .flat_map(|&p| (0..cfg.seeds).map(move |s| (p, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(p, s)| train_student(cfg, p, s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<ToyRun>>>()?;

    let summary: Vec<WidthSummary> = cfg
        .widths
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let group = &runs[i * cfg.seeds..(i + 1) * cfg.seeds];
            let col = |f: fn(&Checkpoint) -> f64| {
                MeanStd::of(&group.iter().map(|r| f(&r.best)).collect::<Vec<_>>()).expect("seeds >= 1")
            };
            WidthSummary {
                width: p,
                aspect_ratio: p as f64 / cfg.input_dim as f64,
                alignment: col(|c| c.alignment),
                baseline_alpha: col(|c| c.baseline_alpha),
                farms_alpha: col(|c| c.farms_alpha),
            }
        })
        .collect();

    let corr = |xs: Vec<f64>, ys: &[f64]| correlation(cfg.correlation, &xs, ys).ok();
    let align_means: Vec<f64> = summary.iter().map(|s| s.alignment.mean).collect();
    let align_all: Vec<f64> = runs.iter().map(|r| r.best.alignment).collect();
    let correlation = CorrelationSummary {
        method: cfg.correlation,
        baseline: corr(summary.iter().map(|s| s.baseline_alpha.mean).collect(), &align_means),
        farms: corr(summary.iter().map(|s| s.farms_alpha.mean).collect(), &align_means),
        baseline_pooled: corr(runs.iter().map(|r| r.best.baseline_alpha).collect(), &align_all),
        farms_pooled: corr(runs.iter().map(|r| r.best.farms_alpha).collect(), &align_all),
    };

    Ok(AlignmentSeries {
        config: cfg.clone(),
        runs,
        summary,
        correlation,
    })
}
