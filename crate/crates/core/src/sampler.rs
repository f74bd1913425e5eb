//! Fixed-aspect-ratio sliding-window subsampling.
//!
//! A layer is cut into equally sized `m' x n'` windows with `m' / n' = Q`
//! held fixed across layers. The eigenvalue series of all windows are
//! concatenated into one ESD (equivalent to averaging their densities) and
//! the Hill alpha is measured on that pooled ESD.
//!
//! Conv2d tensors `[C1, C2, kH, kW]` are viewed as `kH * kW` slices of
//! shape `C1 x C2`. Each window position ("block") pools its ESDs across all
//! slices and yields one alpha; the layer alpha is either the mean of the
//! block alphas or a single alpha on everything pooled together.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{esd_of_matrix, hill_alpha, Esd, HillConfig, SpectralError};
use crate::tensor_io::{LayerKind, WeightTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid subsample config: {0}")]
    InvalidConfig(String),
    #[error("window {window_rows}x{window_cols} does not fit a {rows}x{cols} matrix and clamping is disabled")]
    WindowTooLarge {
        rows: usize,
        cols: usize,
        window_rows: usize,
        window_cols: usize,
    },
    #[error("conv tensor too small: {c1}x{c2} slices hold fewer than 4 entries")]
    ConvTooSmall { c1: usize, c2: usize },
    #[error("{context}: {source}")]
    Spectral {
        context: String,
        #[source]
        source: SpectralError,
    },
}

pub type Result<T> = std::result::Result<T, SamplerError>;

fn spectral(context: impl Into<String>) -> impl FnOnce(SpectralError) -> SamplerError {
    let context = context.into();
    move |source| SamplerError::Spectral { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Window sized from the smaller matrix dimension and `Q`.
    MinDimension,
    Explicit { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `max(1, ⌊dim / window⌋)` windows per axis.
    Auto,
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvAggregation {
    AveragePerBlock,
    ConcatenateAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsampleConfig {
    /// Target aspect ratio `m' / n'`.
    pub q_ratio: f64,
    pub window: WindowMode,
    pub steps: StepMode,
    pub conv_aggregation: ConvAggregation,
    /// Shrink windows that exceed the matrix instead of failing.
    pub clamp_window: bool,
    pub hill: HillConfig,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            q_ratio: 1.0,
            window: WindowMode::MinDimension,
            steps: StepMode::Auto,
            conv_aggregation: ConvAggregation::AveragePerBlock,
            clamp_window: true,
            hill: HillConfig::default(),
        }
    }
}

impl SubsampleConfig {
    /// A single window equal to the whole `rows x cols` matrix.
    pub fn whole_matrix(rows: usize, cols: usize) -> Self {
        Self {
            q_ratio: rows as f64 / cols as f64,
            window: WindowMode::Explicit { rows, cols },
            steps: StepMode::Grid { rows: 1, cols: 1 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_ratio > 0.0 && self.q_ratio.is_finite()) {
            return Err(SamplerError::InvalidConfig(format!(
                "q_ratio {} must be finite and > 0",
                self.q_ratio
            )));
        }
        if let WindowMode::Explicit { rows, cols } = self.window {
            if rows == 0 || cols == 0 {
                return Err(SamplerError::InvalidConfig(
                    "explicit window dimensions must be >= 1".into(),
                ));
            }
            let by_rows = (rows as f64 - self.q_ratio * cols as f64).abs() <= 1.0;
            let by_cols = (cols as f64 - rows as f64 / self.q_ratio).abs() <= 1.0;
            if !(by_rows || by_cols) {
                return Err(SamplerError::InvalidConfig(format!(
                    "explicit window {rows}x{cols} does not have aspect ratio {}",
                    self.q_ratio
                )));
            }
        }
        if let StepMode::Grid { rows, cols } = self.steps {
            if rows == 0 || cols == 0 {
                return Err(SamplerError::InvalidConfig("grid steps must be >= 1".into()));
            }
        }
        self.hill.validate().map_err(SamplerError::InvalidConfig)
    }
}

/// Window placement for one matrix shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsamplePlan {
    /// `(rows, cols)` of every window.
    pub window: (usize, usize),
    /// Top-left corners, unique and sorted row-major.
    pub offsets: Vec<(usize, usize)>,
    /// Whether the union of windows covers every entry of the matrix.
    pub covers_full_matrix: bool,
    /// Set when the window had to be shrunk to fit, so `Q` is not honoured.
    pub aspect_clamped: bool,
}

impl SubsamplePlan {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Plans windows for a matrix of `shape = (rows, cols)` in the orientation
/// given. Analysis entry points orient matrices to `rows >= cols` first.
pub fn plan_subsamples(shape: (usize, usize), cfg: &SubsampleConfig) -> Result<SubsamplePlan> {
    cfg.validate()?;
    let (m, n) = shape;
    if m == 0 || n == 0 {
        return Err(SamplerError::InvalidConfig(format!("empty matrix shape {m}x{n}")));
    }

    let (mut wr, mut wc, mut clamped) = match cfg.window {
        WindowMode::MinDimension => {
            let short = m.min(n);
            let other = ((short as f64 / cfg.q_ratio).floor() as usize).max(1);
            let clamped = other > short;
            let other = other.min(short);
            if m >= n {
                (short, other, clamped)
            } else {
                (other, short, clamped)
            }
        }
        WindowMode::Explicit { rows, cols } => (rows, cols, false),
    };
    if wr > m || wc > n {
        if !cfg.clamp_window {
            return Err(SamplerError::WindowTooLarge {
                rows: m,
                cols: n,
                window_rows: wr,
                window_cols: wc,
            });
        }
        wr = wr.min(m);
        wc = wc.min(n);
        clamped = true;
    }

    let (row_steps, col_steps) = match cfg.steps {
        StepMode::Auto => ((m / wr).max(1), (n / wc).max(1)),
        StepMode::Grid { rows, cols } => (rows, cols),
    };
    let rows = axis_positions(m, wr, row_steps);
    let cols = axis_positions(n, wc, col_steps);
    let covers = axis_covered(m, wr, &rows) && axis_covered(n, wc, &cols);
    let offsets = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(SubsamplePlan {
        window: (wr, wc),
        offsets,
        covers_full_matrix: covers,
        aspect_clamped: clamped,
    })
}

/// Evenly spaced starts from 0 to `dim - window`, rounded to the nearest
/// integer and deduplicated.
fn axis_positions(dim: usize, window: usize, steps: usize) -> Vec<usize> {
    let span = dim - window;
    if steps <= 1 || span == 0 {
        return vec![0];
    }
    let stride = span as f64 / (steps - 1) as f64;
    let mut out: Vec<usize> = (0..steps)
        .map(|i| ((i as f64 * stride).round() as usize).min(span))
        .collect();
    *out.last_mut().expect("steps >= 2") = span;
    out.dedup();
    out
}

fn axis_covered(dim: usize, window: usize, starts: &[usize]) -> bool {
    starts.first() == Some(&0)
        && starts.last().map(|s| s + window) == Some(dim)
        && starts.windows(2).all(|w| w[1] - w[0] <= window)
}

/// `matrix` viewed with rows >= cols.
fn oriented(matrix: MatRef<'_, f64>) -> MatRef<'_, f64> {
    if matrix.nrows() >= matrix.ncols() {
        matrix
    } else {
        matrix.transpose()
    }
}

/// ESD of the whole matrix.
pub fn baseline_esd_linear(matrix: MatRef<'_, f64>) -> Result<Esd> {
    esd_of_matrix(oriented(matrix)).map_err(spectral("whole matrix"))
}

/// Pooled ESD over all planned windows of the (tall-oriented) matrix.
pub fn farms_esd_linear(matrix: MatRef<'_, f64>, cfg: &SubsampleConfig) -> Result<Esd> {
    let tall = oriented(matrix);
    let plan = plan_subsamples((tall.nrows(), tall.ncols()), cfg)?;
    pooled_esd(&[tall], &plan)
}

fn pooled_esd(slices: &[MatRef<'_, f64>], plan: &SubsamplePlan) -> Result<Esd> {
    let (wr, wc) = plan.window;
    let mut parts = Vec::with_capacity(plan.len() * slices.len());
    for &(r, c) in &plan.offsets {
        for (s, slice) in slices.iter().enumerate() {
            let block = slice.submatrix(r, c, wr, wc);
            let ctx = || {
                if slices.len() == 1 {
                    format!("submatrix at ({r}, {c})")
                } else {
                    format!("slice {s} submatrix at ({r}, {c})")
                }
            };
            parts.push(esd_of_matrix(block).map_err(spectral(ctx()))?);
        }
    }
    Esd::concat(&parts).map_err(spectral("pooling"))
}

pub fn farms_alpha_linear(matrix: MatRef<'_, f64>, cfg: &SubsampleConfig) -> Result<f64> {
    let esd = farms_esd_linear(matrix, cfg)?;
    hill_alpha(&esd, &cfg.hill).map_err(spectral("pooled ESD"))
}

pub fn baseline_alpha_linear(matrix: MatRef<'_, f64>, hill: &HillConfig) -> Result<f64> {
    let esd = baseline_esd_linear(matrix)?;
    hill_alpha(&esd, hill).map_err(spectral("whole matrix"))
}

/// The `kH * kW` slices of a conv tensor, each `C1 x C2`, oriented so that
/// rows >= cols.
pub fn conv_slices(data: &[f64], shape: [usize; 4]) -> Vec<Mat<f64>> {
    let [c1, c2, kh, kw] = shape;
    assert_eq!(data.len(), c1 * c2 * kh * kw, "conv data/shape mismatch");
    let taps = kh * kw;
    (0..taps)
        .map(|tap| {
            if c1 >= c2 {
                Mat::from_fn(c1, c2, |i, j| data[(i * c2 + j) * taps + tap])
            } else {
                Mat::from_fn(c2, c1, |i, j| data[(j * c2 + i) * taps + tap])
            }
        })
        .collect()
}

/// Result of the conv FARMS path, with the per-block detail kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFarms {
    pub alpha: f64,
    pub block_alphas: Vec<f64>,
    pub plan: SubsamplePlan,
    pub slices: usize,
    pub eigenvalue_count: usize,
}

pub fn farms_alpha_conv(data: &[f64], shape: [usize; 4], cfg: &SubsampleConfig) -> Result<f64> {
    farms_conv(data, shape, cfg).map(|r| r.alpha)
}

pub fn farms_conv(data: &[f64], shape: [usize; 4], cfg: &SubsampleConfig) -> Result<ConvFarms> {
    let [c1, c2, _, _] = shape;
    if c1 * c2 < 4 {
        return Err(SamplerError::ConvTooSmall { c1, c2 });
    }
    let slices = conv_slices(data, shape);
    let views: Vec<MatRef<'_, f64>> = slices.iter().map(|s| s.as_ref()).collect();
    let plan = plan_subsamples((views[0].nrows(), views[0].ncols()), cfg)?;

    let mut block_esds = Vec::with_capacity(plan.len());
    for &offset in &plan.offsets {
        let single = SubsamplePlan {
            offsets: vec![offset],
            ..plan.clone()
        };
        block_esds.push(pooled_esd(&views, &single)?);
    }
    let eigenvalue_count = block_esds.iter().map(Esd::len).sum();

    let (alpha, block_alphas) = match cfg.conv_aggregation {
        ConvAggregation::AveragePerBlock => {
            let alphas = block_esds
                .iter()
                .zip(&plan.offsets)
                .map(|(esd, (r, c))| {
                    hill_alpha(esd, &cfg.hill).map_err(spectral(format!("block at ({r}, {c})")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
            (mean, alphas)
        }
        ConvAggregation::ConcatenateAll => {
            let all = Esd::concat(&block_esds).map_err(spectral("pooling"))?;
            let a = hill_alpha(&all, &cfg.hill).map_err(spectral("pooled ESD"))?;
            (a, vec![])
        }
    };
    Ok(ConvFarms {
        alpha,
        block_alphas,
        slices: views.len(),
        eigenvalue_count,
        plan,
    })
}

/// Whole-slice ESDs of every kernel tap, pooled.
pub fn baseline_esd_conv(data: &[f64], shape: [usize; 4]) -> Result<Esd> {
    let slices = conv_slices(data, shape);
    let parts = slices
        .iter()
        .enumerate()
        .map(|(s, m)| esd_of_matrix(m.as_ref()).map_err(spectral(format!("slice {s}"))))
        .collect::<Result<Vec<_>>>()?;
    Esd::concat(&parts).map_err(spectral("pooling"))
}

/// Per-layer analysis output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub baseline_alpha: f64,
    pub farms_alpha: f64,
    pub esd_size_baseline: usize,
    pub esd_size_farms: usize,
    pub submatrix_count: usize,
    pub excluded: bool,
    pub reason: Option<String>,
    /// Number of trainable parameters (product of the shape).
    pub param_count: usize,
}

impl LayerReport {
    /// `(rows, cols)` of the analyzed matrix (a conv slice for conv layers).
    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.shape[0], self.shape[1])
    }

    /// Number of eigenvalues of one whole matrix or slice.
    pub fn eigen_count(&self) -> usize {
        let (m, n) = self.matrix_dims();
        m.min(n)
    }

    pub fn aspect_ratio(&self) -> f64 {
        let (m, n) = self.matrix_dims();
        m.max(n) as f64 / m.min(n) as f64
    }

    /// Marks the layer excluded, appending to any existing reason.
    pub fn exclude(&mut self, reason: &str) {
        self.excluded = true;
        self.reason = Some(match self.reason.take() {
            Some(r) if !r.is_empty() => format!("{r}; {reason}"),
            _ => reason.to_string(),
        });
    }
}

/// Baseline and FARMS alphas for one tensor.
pub fn analyze_layer(tensor: &WeightTensor, cfg: &SubsampleConfig) -> Result<LayerReport> {
    cfg.validate()?;
    let entry = &tensor.entry;
    let report = match entry.kind {
        LayerKind::Linear => {
            let m = tensor.as_matrix().expect("linear layer");
            let base = baseline_esd_linear(m)?;
            let tall = oriented(m);
            let plan = plan_subsamples((tall.nrows(), tall.ncols()), cfg)?;
            let farms = pooled_esd(&[tall], &plan)?;
            LayerReport {
                name: entry.name.clone(),
                kind: entry.kind,
                shape: entry.shape.clone(),
                baseline_alpha: hill_alpha(&base, &cfg.hill).map_err(spectral("whole matrix"))?,
                farms_alpha: hill_alpha(&farms, &cfg.hill).map_err(spectral("pooled ESD"))?,
                esd_size_baseline: base.len(),
                esd_size_farms: farms.len(),
                submatrix_count: plan.len(),
                excluded: false,
                reason: None,
                param_count: entry.element_count(),
            }
        }
        LayerKind::Conv2d => {
            let shape: [usize; 4] = entry.shape[..].try_into().expect("validated rank");
            let base = baseline_esd_conv(&tensor.data, shape)?;
            let farms = farms_conv(&tensor.data, shape, cfg)?;
            LayerReport {
                name: entry.name.clone(),
                kind: entry.kind,
                shape: entry.shape.clone(),
                baseline_alpha: hill_alpha(&base, &cfg.hill).map_err(spectral("whole slices"))?,
                farms_alpha: farms.alpha,
                esd_size_baseline: base.len(),
                esd_size_farms: farms.eigenvalue_count,
                submatrix_count: farms.plan.len() * farms.slices,
                excluded: false,
                reason: None,
                param_count: entry.element_count(),
            }
        }
    };
    Ok(report)
}

/// [`analyze_layer`] followed by a layer-selection predicate that returns an
/// exclusion reason, if any.
pub fn analyze_layer_with<F>(
    tensor: &WeightTensor,
    cfg: &SubsampleConfig,
    select: F,
) -> Result<LayerReport>
where
    F: Fn(&LayerReport) -> Option<String>,
{
    let mut report = analyze_layer(tensor, cfg)?;
    if let Some(reason) = select(&report) {
        report.exclude(&reason);
    }
    Ok(report)
}
