//! Empirical spectral densities, the Hill tail estimator and
//! Marchenko–Pastur reference quantities.
//!
//! An ESD here is always the multiset of eigenvalues of `WᵀW`, i.e. the
//! squared singular values of `W`. Tail exponents estimated on singular
//! values instead relate to these by `alpha_sv = 2 * alpha_eig - 1`.

use std::f64::consts::PI;

use faer::MatRef;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("singular value decomposition did not converge for a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },
    #[error("empty matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid eigenvalue {value} at position {index}")]
    InvalidEigenvalue { index: usize, value: f64 },
    #[error("empty spectrum")]
    EmptySpectrum,
    #[error("too few usable eigenvalues: {usable} above the floor, need at least 2")]
    TooFewEigenvalues { usable: usize },
    #[error("degenerate spectrum: the top {k} eigenvalues all equal the threshold eigenvalue {threshold}")]
    DegenerateSpectrum { k: usize, threshold: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Sorted (ascending) eigenvalue sample of one or more correlation matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    eigenvalues: Vec<f64>,
    source_count: usize,
}

impl Esd {
    /// Sorts and validates `eigenvalues`. Values must be finite and `>= 0`.
    pub fn new(mut eigenvalues: Vec<f64>, source_count: usize) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::EmptySpectrum);
        }
        if let Some((index, &value)) = eigenvalues
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(SpectralError::InvalidEigenvalue { index, value });
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Self {
            eigenvalues,
            source_count: source_count.max(1),
        })
    }

    /// Pools several ESDs into one. Concatenating eigenvalue series is the
    /// same as averaging the normalized densities of equally sized parts.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Esd>) -> Result<Self> {
        let mut values = Vec::new();
        let mut sources = 0;
        for p in parts {
            values.extend_from_slice(&p.eigenvalues);
            sources += p.source_count;
        }
        if values.is_empty() {
            return Err(SpectralError::EmptySpectrum);
        }
        values.sort_by(f64::total_cmp);
        Ok(Self {
            eigenvalues: values,
            source_count: sources,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty by construction")
    }

    /// Every eigenvalue multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            eigenvalues: self.eigenvalues.iter().map(|v| v * c).collect(),
            source_count: self.source_count,
        }
    }

    /// Normalized histogram over the given bin edges (left-closed bins, the
    /// last bin also closed on the right). Values outside the edges are
    /// counted in the denominator but not in any bin.
    pub fn histogram(&self, edges: &[f64]) -> Vec<f64> {
        histogram(&self.eigenvalues, edges)
    }
}

pub(crate) fn histogram(values: &[f64], edges: &[f64]) -> Vec<f64> {
    assert!(edges.len() >= 2, "need at least one bin");
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    let last = edges[bins];
    for &v in values {
        if v < edges[0] || v > last {
            continue;
        }
        // index of the last edge <= v
        let idx = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
        counts[idx] += 1;
    }
    let total = values.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// Squared singular values of `matrix`, ascending.
///
/// The matrix is analyzed in its tall orientation (rows >= cols), so a
/// matrix and its transpose go through the same code path.
pub fn esd_of_matrix(matrix: MatRef<'_, f64>) -> Result<Esd> {
    let (rows, cols) = (matrix.nrows(), matrix.ncols());
    if rows == 0 || cols == 0 {
        return Err(SpectralError::EmptyMatrix { rows, cols });
    }
    for j in 0..cols {
        for i in 0..rows {
            if !matrix[(i, j)].is_finite() {
                return Err(SpectralError::NonFinite { row: i, col: j });
            }
        }
    }
    let tall = if rows >= cols { matrix } else { matrix.transpose() };
    let singular = tall
        .singular_values()
        .map_err(|_| SpectralError::SvdNoConvergence { rows, cols })?;
    let mut eig: Vec<f64> = singular.into_iter().map(|s| (s * s).max(0.0)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(Esd {
        eigenvalues: eig,
        source_count: 1,
    })
}

/// How many top order statistics the Hill estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    Fixed(usize),
    Fraction(f64),
}

/// Floor below which eigenvalues are dropped before estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenFloor {
    /// Multiple of the largest eigenvalue.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HillConfig {
    pub k_mode: KMode,
    pub eps: EigenFloor,
}

impl Default for HillConfig {
    fn default() -> Self {
        Self {
            k_mode: KMode::Fraction(0.5),
            eps: EigenFloor::Relative(1e-12),
        }
    }
}

impl HillConfig {
    pub fn fixed(k: usize) -> Self {
        Self {
            k_mode: KMode::Fixed(k),
            ..Self::default()
        }
    }

    pub fn fraction(f: f64) -> Self {
        Self {
            k_mode: KMode::Fraction(f),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self.k_mode {
            KMode::Fixed(0) => return Err("fixed k must be >= 1".into()),
            KMode::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(format!("k fraction {f} outside (0, 1]"))
            }
            _ => {}
        }
        match self.eps {
            EigenFloor::Relative(e) | EigenFloor::Absolute(e) if !(e >= 0.0 && e.is_finite()) => {
                Err(format!("eigenvalue floor {e} must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }

    fn floor_for(&self, max_eigenvalue: f64) -> f64 {
        match self.eps {
            EigenFloor::Relative(r) => r * max_eigenvalue,
            EigenFloor::Absolute(a) => a,
        }
    }
}

/// Number of order statistics for `n_usable` eigenvalues, clamped to
/// `[1, n_usable - 1]`.
pub fn resolve_k(n_usable: usize, cfg: &HillConfig) -> usize {
    let upper = n_usable.saturating_sub(1).max(1);
    match cfg.k_mode {
        KMode::Fixed(k) => k.clamp(1, upper),
        KMode::Fraction(f) => ((f * n_usable as f64).floor() as usize).clamp(1, upper),
    }
}

/// Hill estimate of the power-law exponent of the ESD's upper tail:
/// `1 + k / Σ_{i<k} ln(λ_(n-i) / λ_(n-k))` on the floor-filtered ascending
/// sequence.
pub fn hill_alpha(esd: &Esd, cfg: &HillConfig) -> Result<f64> {
    let floor = cfg.floor_for(esd.max());
    let values = esd.eigenvalues();
    let start = values.partition_point(|&v| v <= floor);
    let usable = &values[start..];
    let n = usable.len();
    if n < 2 {
        return Err(SpectralError::TooFewEigenvalues { usable: n });
    }
    let k = resolve_k(n, cfg);
    let threshold = usable[n - k - 1];
    let sum: f64 = usable[n - k..].iter().map(|&v| (v / threshold).ln()).sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(SpectralError::DegenerateSpectrum { k, threshold });
    }
    Ok(1.0 + k as f64 / sum)
}

/// Marchenko–Pastur parameters for aspect parameter `y = m / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpParams {
    pub y: f64,
    pub bulk_lower: f64,
    pub bulk_upper: f64,
    pub atom_mass: f64,
}

impl MpParams {
    pub fn new(y: f64) -> Self {
        assert!(y > 0.0 && y.is_finite(), "MP aspect parameter must be > 0");
        let (a, b) = mp_bulk_edges(y);
        Self {
            y,
            bulk_lower: a,
            bulk_upper: b,
            atom_mass: if y > 1.0 { 1.0 - 1.0 / y } else { 0.0 },
        }
    }
}

/// `((1 - √y)², (1 + √y)²)`.
pub fn mp_bulk_edges(y: f64) -> (f64, f64) {
    let r = y.sqrt();
    ((1.0 - r).powi(2), (1.0 + r).powi(2))
}

/// Continuous MP density at `x` and the point mass at zero.
pub fn mp_density(x: f64, y: f64) -> (f64, f64) {
    let p = MpParams::new(y);
    (continuous_density(x, &p), p.atom_mass)
}

fn continuous_density(x: f64, p: &MpParams) -> f64 {
    if x <= p.bulk_lower || x >= p.bulk_upper || x <= 0.0 {
        return 0.0;
    }
    ((p.bulk_upper - x) * (x - p.bulk_lower)).sqrt() / (2.0 * PI * x * p.y)
}

/// Tabulated MP distribution function.
///
/// The continuous part is integrated on `x(θ) = a + (b - a)(1 - cos θ) / 2`,
/// which turns the square-root edges into a smooth periodic integrand, with
/// the trapezoid rule on a uniform θ grid.
#[derive(Debug, Clone)]
pub struct MpCdf {
    params: MpParams,
    /// Cumulative continuous mass at θ_i = π i / (len - 1).
    cumulative: Vec<f64>,
}

/// Default number of quadrature nodes.
pub const MP_GRID_POINTS: usize = 8192;

impl MpCdf {
    pub fn new(y: f64) -> Self {
        Self::with_grid(y, MP_GRID_POINTS)
    }

    pub fn with_grid(y: f64, points: usize) -> Self {
        let points = points.max(2);
        let params = MpParams::new(y);
        let (a, b) = (params.bulk_lower, params.bulk_upper);
        let half = 0.5 * (b - a);
        let h = PI / (points - 1) as f64;
        let integrand = |theta: f64| {
            let x = a + half * (1.0 - theta.cos());
            let s = theta.sin();
            if x > 0.0 {
                half * half * s * s / (2.0 * PI * params.y * x)
            } else {
                // a = 0 and θ = 0: limit of sin²θ / x(θ) is 2 / half
                half * 2.0 / (2.0 * PI * params.y)
            }
        };
        let mut cumulative = Vec::with_capacity(points);
        cumulative.push(0.0);
        let mut prev = integrand(0.0);
        let mut acc = 0.0;
        for i in 1..points {
            let cur = integrand(i as f64 * h);
            acc += 0.5 * h * (prev + cur);
            cumulative.push(acc);
            prev = cur;
        }
        Self { params, cumulative }
    }

    pub fn params(&self) -> &MpParams {
        &self.params
    }

    /// Total continuous mass; equals `1 - atom_mass` up to quadrature error.
    pub fn continuous_mass(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    fn continuous_cdf(&self, x: f64) -> f64 {
        let (a, b) = (self.params.bulk_lower, self.params.bulk_upper);
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return self.continuous_mass();
        }
        let c = (1.0 - 2.0 * (x - a) / (b - a)).clamp(-1.0, 1.0);
        let theta = c.acos();
        let pos = theta / PI * (self.cumulative.len() - 1) as f64;
        let i = (pos.floor() as usize).min(self.cumulative.len() - 2);
        let frac = pos - i as f64;
        self.cumulative[i] + frac * (self.cumulative[i + 1] - self.cumulative[i])
    }

    /// `F_y(x)`, including the atom at zero when `y > 1`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        self.params.atom_mass + self.continuous_cdf(x)
    }

    /// Smallest `x` with `cdf(x) >= p`, by bisection on the bulk.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= self.params.atom_mass {
            return 0.0;
        }
        let (mut lo, mut hi) = (self.params.bulk_lower, self.params.bulk_upper);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Kolmogorov–Smirnov distance between the ESD and the MP law.
///
/// Each eigenvalue is divided by `variance_scale` first; for an `m x n`
/// matrix `X` with entry variance `σ²` and `y = m / n`, pass
/// `variance_scale = σ² · n` so that the ESD is that of `(1/n) X Xᵀ`.
/// When `y > 1` the ESD is taken to hold only the `n` nonzero eigenvalues
/// and the MP atom at zero is added to the empirical CDF.
pub fn ks_distance_to_mp(esd: &Esd, y: f64, variance_scale: f64) -> f64 {
    let cdf = MpCdf::new(y);
    ks_distance_with(esd, &cdf, variance_scale)
}

pub fn ks_distance_with(esd: &Esd, cdf: &MpCdf, variance_scale: f64) -> f64 {
    assert!(variance_scale > 0.0, "variance_scale must be > 0");
    let atom = cdf.params().atom_mass;
    let n = esd.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &lambda) in esd.eigenvalues().iter().enumerate() {
        let x = lambda / variance_scale;
        let f = cdf.cdf(x);
        let f_left = if x > 0.0 { f } else { 0.0 };
        let emp_after = atom + (1.0 - atom) * (i + 1) as f64 / n;
        let emp_before = atom + (1.0 - atom) * i as f64 / n;
        d = d.max((emp_after - f).abs()).max((f_left - emp_before).abs());
    }
    d.min(1.0)
}
