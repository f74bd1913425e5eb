#![allow(dead_code)]

use farms::faer::Mat;
use farms::tensor_io::LayerKind;
use farms::LayerReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Mat::from_fn(rows, cols, |i, j| v[i * cols + j])
}

pub fn report(name: &str, shape: (usize, usize), alpha: f64) -> LayerReport {
    LayerReport {
        name: name.into(),
        kind: LayerKind::Linear,
        shape: vec![shape.0, shape.1],
        baseline_alpha: alpha,
        farms_alpha: alpha,
        esd_size_baseline: shape.0.min(shape.1),
        esd_size_farms: shape.0.min(shape.1),
        submatrix_count: 1,
        excluded: false,
        reason: None,
        param_count: shape.0 * shape.1,
    }
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut a = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (top, bottom) = a.split_at_mut(q);
                for (x, y) in top[p].iter_mut().zip(bottom[0].iter_mut()) {
                    let (apk, aqk) = (*x, *y);
                    *x = c * apk - s * aqk;
                    *y = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Gram matrix `WᵀW` of the tall orientation of `w`.
pub fn gram(w: &Mat<f64>) -> Vec<Vec<f64>> {
    let (m, n) = (w.nrows(), w.ncols());
    let tall = m >= n;
    let (rows, cols) = if tall { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if tall { w[(i, j)] } else { w[(j, i)] };
    (0..cols)
        .map(|p| (0..cols).map(|q| (0..rows).map(|k| at(k, p) * at(k, q)).sum()).collect())
        .collect()
}

/// Hill estimate written out directly from the order statistics.
pub fn hill_reference(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let threshold = v[k];
    1.0 + k as f64 / v[..k].iter().map(|x| (x / threshold).ln()).sum::<f64>()
}
