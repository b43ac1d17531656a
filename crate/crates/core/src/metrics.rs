//! Sample-based distances between point clouds.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::grad::Tensor;

fn check_pair(x: &Tensor, y: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.cols() {
        return Err(invalid(format!("point clouds must share a width, got {:?} and {:?}", x.shape(), y.shape())));
    }
    Ok(x.cols())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn kernel_mean(x: &Tensor, y: &Tensor, gamma: f64, skip_diag: bool) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            if skip_diag && i == j {
                continue;
            }
            acc += (-gamma * sq_dist(x.row(i), y.row(j))).exp();
            count += 1;
        }
    }
    acc / count as f64
}

/// Unbiased squared MMD with the RBF kernel `exp(−|a−b|² / 2h²)`.
pub fn mmd(x: &Tensor, y: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(x, y)?;
    if x.rows() < 2 || y.rows() < 2 {
        return Err(invalid("unbiased MMD needs at least two points per cloud"));
    }
    if !(bandwidth > 0.0) {
        return Err(invalid("MMD bandwidth must be positive"));
    }
    let g = 0.5 / (bandwidth * bandwidth);
    Ok(kernel_mean(x, x, g, true) + kernel_mean(y, y, g, true) - 2.0 * kernel_mean(x, y, g, false))
}

/// Biased (V-statistic) squared MMD; always non-negative.
pub fn mmd_biased(x: &Tensor, y: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(x, y)?;
    if !(bandwidth > 0.0) {
        return Err(invalid("MMD bandwidth must be positive"));
    }
    let g = 0.5 / (bandwidth * bandwidth);
    Ok(kernel_mean(x, x, g, false) + kernel_mean(y, y, g, false) - 2.0 * kernel_mean(x, y, g, false))
}

/// 2-Wasserstein distance between two empirical 1-D laws, integrating the
/// difference of their quantile functions exactly.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Sliced Wasserstein: mean over random unit directions of the 1-D W₂ of the projections.
pub fn sliced_wasserstein<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, n_proj: usize, rng: &mut R) -> Result<f64> {
    let d = check_pair(x, y)?;
    if n_proj == 0 {
        return Err(invalid("sliced Wasserstein needs at least one projection"));
    }
    let mut total = 0.0;
    let mut px = vec![0.0; x.rows()];
    let mut py = vec![0.0; y.rows()];
    for _ in 0..n_proj {
        let dir = loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|c| c / n).collect::<Vec<_>>();
            }
        };
        for (r, p) in px.iter_mut().enumerate() {
            *p = x.row(r).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        for (r, p) in py.iter_mut().enumerate() {
            *p = y.row(r).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        total += wasserstein_1d(&mut px, &mut py);
    }
    Ok(total / n_proj as f64)
}
