//! Alpha-driven layer-wise hyperparameters.
//!
//! Direction convention: a larger alpha means a lighter tail, i.e. a less
//! trained layer. Such layers get a larger learning rate and a larger
//! pruning ratio. Both allocators depend on alphas only through min-max (or
//! mean/std) standardization, so shifting every alpha by a constant leaves
//! the allocation unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::LayerReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("no layers to allocate")]
    NoLayers,
    #[error("every layer is excluded from learning-rate scheduling")]
    AllExcluded,
    #[error("invalid allocator config: {0}")]
    InvalidConfig(String),
    #[error("sparsity budget infeasible: target {target}, achieved weighted mean {achieved}")]
    Infeasible { target: f64, achieved: f64 },
}

pub type Result<T> = std::result::Result<T, AllocError>;

/// Which alpha column drives an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Baseline,
    Farms,
}

impl Metric {
    pub fn alpha(self, r: &LayerReport) -> f64 {
        match self {
            Metric::Baseline => r.baseline_alpha,
            Metric::Farms => r.farms_alpha,
        }
    }
}

/// Layer-selection heuristic for learning-rate scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsConfig {
    pub exclude_first_last: bool,
    /// Layers whose matrices have fewer eigenvalues than this are excluded.
    /// Zero disables the check.
    pub min_esd_size: usize,
    /// Tall-and-skinny cutoff, only applied for [`Metric::Baseline`].
    pub max_aspect_ratio: Option<f64>,
}

impl Default for LsConfig {
    fn default() -> Self {
        Self {
            exclude_first_last: true,
            min_esd_size: 32,
            max_aspect_ratio: Some(5.0),
        }
    }
}

impl LsConfig {
    /// No layer selection at all.
    pub fn disabled() -> Self {
        Self {
            exclude_first_last: false,
            min_esd_size: 0,
            max_aspect_ratio: None,
        }
    }
}

/// Flags layers per the selection heuristic. Existing flags are kept.
pub fn select_layers(reports: &[LayerReport], ls: &LsConfig, metric: Metric) -> Vec<LayerReport> {
    let mut out = reports.to_vec();
    let last = out.len().saturating_sub(1);
    for (i, r) in out.iter_mut().enumerate() {
        if ls.exclude_first_last && i == 0 {
            r.exclude("first layer");
        }
        if ls.exclude_first_last && i == last && i != 0 {
            r.exclude("last layer");
        }
        if r.eigen_count() < ls.min_esd_size {
            r.exclude("few eigenvalues");
        }
        if let (Metric::Baseline, Some(max)) = (metric, ls.max_aspect_ratio) {
            if r.aspect_ratio() > max {
                r.exclude("tall-and-skinny");
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMapping {
    /// Min alpha to `s1`, max alpha to `s2`, linear in between.
    LinearMinmax,
    /// Logistic squash of the standardized alpha into `(s1, s2)`.
    Sigmoid { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrScheduleConfig {
    pub eta_t: f64,
    pub s1: f64,
    pub s2: f64,
    pub mapping: LrMapping,
    pub layer_selection: LsConfig,
}

impl Default for LrScheduleConfig {
    fn default() -> Self {
        Self {
            eta_t: 0.1,
            s1: 0.5,
            s2: 1.5,
            mapping: LrMapping::LinearMinmax,
            layer_selection: LsConfig::default(),
        }
    }
}

impl LrScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_t > 0.0 && self.eta_t.is_finite()) {
            return Err(AllocError::InvalidConfig(format!("eta_t {} must be > 0", self.eta_t)));
        }
        if !(self.s1 > 0.0 && self.s1 <= self.s2 && self.s2.is_finite()) {
            return Err(AllocError::InvalidConfig(format!(
                "scaling bounds need 0 < s1 <= s2, got ({}, {})",
                self.s1, self.s2
            )));
        }
        if let LrMapping::Sigmoid { temperature } = self.mapping {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(AllocError::InvalidConfig("sigmoid temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub layer: String,
    pub alpha_baseline: f64,
    pub alpha_farms: f64,
    pub value: f64,
    pub excluded: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConstraintReport {
    LearningRate {
        eta_t: f64,
        lower: f64,
        upper: f64,
        scheduled_layers: usize,
    },
    Sparsity {
        target: f64,
        achieved_mean: f64,
        lower: f64,
        upper: f64,
        iterations: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub metric: Metric,
    pub per_layer: Vec<AllocationEntry>,
    pub constraint_report: ConstraintReport,
}

impl AllocationResult {
    pub fn values(&self) -> Vec<f64> {
        self.per_layer.iter().map(|e| e.value).collect()
    }
}

fn entry(r: &LayerReport, value: f64) -> AllocationEntry {
    AllocationEntry {
        layer: r.name.clone(),
        alpha_baseline: r.baseline_alpha,
        alpha_farms: r.farms_alpha,
        value,
        excluded: r.excluded,
        reason: r.reason.clone(),
    }
}

/// Position of `alpha` in `[lo, hi]` as a fraction, `None` when the range
/// is degenerate.
fn unit_position(alpha: f64, lo: f64, hi: f64) -> Option<f64> {
    if hi > lo {
        Some(((alpha - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        None
    }
}

/// `lo + (hi - lo) * t`, exact at both ends.
fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    if t >= 1.0 {
        hi
    } else {
        (lo + (hi - lo) * t).clamp(lo, hi)
    }
}

/// Per-layer learning rates in `[s1 * eta_t, s2 * eta_t]`.
///
/// Layer selection from `cfg.layer_selection` is applied first; excluded
/// layers get exactly `eta_t`.
pub fn assign_learning_rates(
    reports: &[LayerReport],
    cfg: &LrScheduleConfig,
    metric: Metric,
) -> Result<AllocationResult> {
    cfg.validate()?;
    if reports.is_empty() {
        return Err(AllocError::NoLayers);
    }
    let flagged = select_layers(reports, &cfg.layer_selection, metric);
    let active: Vec<f64> = flagged
        .iter()
        .filter(|r| !r.excluded)
        .map(|r| metric.alpha(r))
        .collect();
    if active.is_empty() {
        return Err(AllocError::AllExcluded);
    }

    let lo = active.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = active.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = active.len() as f64;
    let mean = active.iter().sum::<f64>() / n;
    let std = (active.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (s1, s2) = (cfg.s1, cfg.s2);

    let scale = |alpha: f64| -> f64 {
        if s1 == s2 {
            return s1;
        }
        match cfg.mapping {
            LrMapping::LinearMinmax => match unit_position(alpha, lo, hi) {
                Some(t) => lerp(s1, s2, t),
                None => 0.5 * (s1 + s2),
            },
            LrMapping::Sigmoid { temperature } => {
                if std > 0.0 {
                    let z = (alpha - mean) / std / temperature;
                    lerp(s1, s2, 1.0 / (1.0 + (-z).exp()))
                } else {
                    0.5 * (s1 + s2)
                }
            }
        }
    };

    let per_layer = flagged
        .iter()
        .map(|r| {
            let value = if r.excluded {
                cfg.eta_t
            } else {
                cfg.eta_t * scale(metric.alpha(r))
            };
            entry(r, value)
        })
        .collect();
    Ok(AllocationResult {
        metric,
        per_layer,
        constraint_report: ConstraintReport::LearningRate {
            eta_t: cfg.eta_t,
            lower: cfg.eta_t * s1,
            upper: cfg.eta_t * s2,
            scheduled_layers: active.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsityConfig {
    /// Global target sparsity `S`.
    pub target: f64,
    /// Half-width of the raw per-layer range around `S`.
    pub tau: f64,
    /// Weight the budget by parameter count instead of counting layers.
    pub weight_by_params: bool,
    pub clamp: (f64, f64),
    pub max_iterations: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            target: 0.7,
            tau: 0.1,
            weight_by_params: true,
            clamp: (0.0, 0.99),
            max_iterations: 8,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(0.0..1.0).contains(&self.target) {
            return Err(AllocError::InvalidConfig(format!(
                "target sparsity {} outside [0, 1)",
                self.target
            )));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(AllocError::InvalidConfig(format!("tau {} must be >= 0", self.tau)));
        }
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(AllocError::InvalidConfig(format!(
                "clamp range ({lo}, {hi}) must satisfy 0 <= lo <= hi < 1"
            )));
        }
        Ok(())
    }
}

/// Per-layer sparsities whose weighted mean equals the target.
///
/// Raw values span `[S - tau, S + tau]` linearly in alpha and are clamped.
/// A uniform additive shift is then applied to every layer that is not
/// pinned at the bound in the shift direction, followed by clamping, until
/// the weighted mean matches `S` or the iteration budget runs out.
pub fn assign_sparsities(
    reports: &[LayerReport],
    cfg: &SparsityConfig,
    metric: Metric,
) -> Result<AllocationResult> {
    cfg.validate()?;
    if reports.is_empty() {
        return Err(AllocError::NoLayers);
    }
    let (lo, hi) = cfg.clamp;
    let target = cfg.target;
    let alphas: Vec<f64> = reports.iter().map(|r| metric.alpha(r)).collect();
    let weights: Vec<f64> = reports
        .iter()
        .map(|r| {
            if cfg.weight_by_params {
                r.param_count as f64
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();

    let a_lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let a_hi = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut values: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            let raw = match unit_position(a, a_lo, a_hi) {
                Some(t) => lerp(target - cfg.tau, target + cfg.tau, t),
                None => target,
            };
            raw.clamp(lo, hi)
        })
        .collect();

    let weighted_mean =
        |v: &[f64]| v.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / total;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let deficit = target - weighted_mean(&values);
        if deficit.abs() <= 1e-12 {
            break;
        }
        let free: Vec<bool> = values
            .iter()
            .map(|&s| if deficit > 0.0 { s < hi } else { s > lo })
            .collect();
        let free_weight: f64 = weights.iter().zip(&free).filter(|(_, f)| **f).map(|(w, _)| w).sum();
        if free_weight == 0.0 {
            break;
        }
        let shift = deficit * total / free_weight;
        for (s, f) in values.iter_mut().zip(&free) {
            if *f {
                *s = (*s + shift).clamp(lo, hi);
            }
        }
        iterations += 1;
    }
    let achieved = weighted_mean(&values);
    if (achieved - target).abs() > 1e-9 {
        return Err(AllocError::Infeasible { target, achieved });
    }

    Ok(AllocationResult {
        metric,
        per_layer: reports
            .iter()
            .zip(&values)
            .map(|(r, &v)| entry(r, v))
            .collect(),
        constraint_report: ConstraintReport::Sparsity {
            target,
            achieved_mean: achieved,
            lower: lo,
            upper: hi,
            iterations,
        },
    })
}
