//! Synthetic 2-D conditional datasets and the closed-form Gaussian oracle.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::Tensor;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Eight modes on a radius-4 circle, sd 0.3; class = mode index.
    Gaussians8,
    /// Two interleaved half circles; class = moon.
    TwoMoons,
    /// Eight filled cells of a 4×4 board on `[-4, 4]²`; class = cell.
    Checkerboard,
    /// Two-armed spiral; class = arm.
    Spiral,
    /// Single Gaussian `N(mean, cov)`, one class.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gaussians8 => "gaussians8",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Spiral => "spiral",
            DatasetKind::Gaussian { .. } => "gaussian",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "gaussians8" => DatasetKind::Gaussians8,
            "two_moons" => DatasetKind::TwoMoons,
            "checkerboard" => DatasetKind::Checkerboard,
            "spiral" => DatasetKind::Spiral,
            "gaussian" => DatasetKind::Gaussian {
                mean: vec![1.0, -2.0],
                cov: vec![vec![1.0, 0.0], vec![0.0, 0.25]],
            },
            other => {
                return Err(invalid(format!(
                    "unknown dataset {other:?}; expected one of gaussians8, two_moons, checkerboard, spiral, gaussian"
                )))
            }
        })
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A conditional generative law over `R^dim` with `n_classes` labels.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    kind: DatasetKind,
    oracle: Option<GaussianOracle>,
}

impl ToyDataset {
    pub fn new(kind: DatasetKind) -> Result<Self> {
        let oracle = match &kind {
            DatasetKind::Gaussian { mean, cov } => Some(GaussianOracle::new(mean.clone(), cov.clone())?),
            _ => None,
        };
        Ok(Self { kind, oracle })
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.oracle.as_ref().map_or(2, GaussianOracle::dim)
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Gaussians8 | DatasetKind::Checkerboard => 8,
            DatasetKind::TwoMoons | DatasetKind::Spiral => 2,
            DatasetKind::Gaussian { .. } => 1,
        }
    }

    /// Draws one class uniformly.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(0..self.n_classes() as u32)
    }

    /// Draws a point of class `c`.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R, c: u32) -> Vec<f64> {
        match &self.kind {
            DatasetKind::Gaussians8 => {
                let a = 2.0 * PI * c as f64 / 8.0;
                vec![4.0 * a.cos() + 0.3 * normal(rng), 4.0 * a.sin() + 0.3 * normal(rng)]
            }
            DatasetKind::TwoMoons => {
                let th = PI * rng.random::<f64>();
                let (x, y) = if c == 0 {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                vec![2.0 * (x - 0.5) + 0.1 * normal(rng), 2.0 * (y - 0.25) + 0.1 * normal(rng)]
            }
            DatasetKind::Checkerboard => {
                // Cells (col, row) with col + row even on a 4×4 board of side 2.
                let row = c / 2;
                let col = 2 * (c % 2) + (row % 2);
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                vec![-4.0 + 2.0 * (col as f64 + u), -4.0 + 2.0 * (row as f64 + v)]
            }
            DatasetKind::Spiral => {
                let s: f64 = rng.random();
                let th = 0.5 + 3.0 * PI * s;
                let r = 4.0 * th / (0.5 + 3.0 * PI);
                let phase = PI * c as f64;
                vec![r * (th + phase).cos() + 0.1 * normal(rng), r * (th + phase).sin() + 0.1 * normal(rng)]
            }
            DatasetKind::Gaussian { .. } => {
                let o = self.oracle.as_ref().expect("gaussian dataset has an oracle");
                let z: Vec<f64> = (0..o.dim()).map(|_| normal(rng)).collect();
                o.transform(&z)
            }
        }
    }

    /// `n` points with classes drawn from the class law.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<(Tensor, Vec<u32>)> {
        let mut data = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = self.sample_class(rng);
            data.extend(self.sample_point(rng, c));
            labels.push(c);
        }
        Ok((Tensor::matrix(n, self.dim(), data)?, labels))
    }

    /// `n` points of the given classes.
    pub fn sample_given<R: Rng + ?Sized>(&self, rng: &mut R, labels: &[u32]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.dim());
        for &c in labels {
            data.extend(self.sample_point(rng, c));
        }
        Tensor::matrix(labels.len(), self.dim(), data)
    }

    pub fn oracle(&self) -> Option<&GaussianOracle> {
        self.oracle.as_ref()
    }
}

/// Analytic data law `N(m, S)`: every diffused marginal is Gaussian, so the
/// optimal noise predictor and score are available in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

/// Lower Cholesky factor; `None` unless the matrix is symmetric positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return None;
            }
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower factor `L`.
fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(invalid("covariance must be a square matrix matching the mean"));
        }
        let chol = cholesky(&cov).ok_or_else(|| invalid("covariance is not symmetric positive definite"))?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[Vec<f64>] {
        &self.cov
    }

    /// `m + L z` for a standard normal `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i][k] * z[k]).sum::<f64>())
            .collect()
    }

    /// Covariance of the marginal at `t`: `α²S + σ²I`.
    pub fn marginal_cov(&self, t: f64, sched: &NoiseSchedule) -> Vec<Vec<f64>> {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| a * a * self.cov[i][j] + if i == j { s * s } else { 0.0 }).collect())
            .collect()
    }

    fn marginal_chol(&self, t: f64, sched: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
        cholesky(&self.marginal_cov(t, sched)).ok_or_else(|| invalid("marginal covariance is not SPD"))
    }

    /// Score `∇ log p_t(x) = −(α²S + σ²I)⁻¹ (x − α m)` for every row of `x`.
    pub fn score(&self, x: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
        let l = self.marginal_chol(t, sched)?;
        let a = sched.alpha(t);
        let d = self.dim();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let diff: Vec<f64> = (0..d).map(|i| x.row(r)[i] - a * self.mean[i]).collect();
            out.extend(chol_solve(&l, &diff).into_iter().map(|v| -v));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Optimal noise prediction `ε* = −σ(t) ∇ log p_t(x)`; requires `t ∈ (0, 1]`.
    pub fn eps_star(&self, x: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(crate::Error::TimeOutOfRange { t, range: "(0, 1]" });
        }
        self.score(x, t, sched)?.scale(-sched.sigma(t))
    }

    /// `log p_t(x)` of a single point.
    pub fn log_density(&self, x: &[f64], t: f64, sched: &NoiseSchedule) -> Result<f64> {
        let l = self.marginal_chol(t, sched)?;
        let a = sched.alpha(t);
        let d = self.dim();
        let diff: Vec<f64> = (0..d).map(|i| x[i] - a * self.mean[i]).collect();
        let sol = chol_solve(&l, &diff);
        let quad: f64 = diff.iter().zip(&sol).map(|(u, v)| u * v).sum();
        let logdet: f64 = 2.0 * (0..d).map(|i| l[i][i].ln()).sum::<f64>();
        Ok(-0.5 * (quad + logdet + d as f64 * (2.0 * PI).ln()))
    }
}

/// Sample mean and (unbiased) covariance of the rows of `x`.
pub fn moments(x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        row.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_input;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn isotropic_unit_case() {
        let o = GaussianOracle::new(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = NoiseSchedule::cosine();
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap();
        for t in [0.2, 0.5, 0.9, 1.0] {
            let e = o.eps_star(&x, t, &s).unwrap();
            let want = x.scale(s.sigma(t)).unwrap();
            assert!(e.max_abs_diff(&want) < 1e-14);
        }
    }

    #[test]
    fn zero_at_scaled_mean() {
        let o = GaussianOracle::new(vec![1.0, -2.0], vec![vec![1.0, 0.2], vec![0.2, 0.25]]).unwrap();
        let s = NoiseSchedule::cosine();
        let t = 0.4;
        let x = Tensor::from_rows(&[vec![s.alpha(t), -2.0 * s.alpha(t)]]).unwrap();
        assert!(o.eps_star(&x, t, &s).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn eps_star_matches_numeric_log_density_gradient() {
        let o = GaussianOracle::new(vec![1.0, -2.0], vec![vec![1.0, 0.3], vec![0.3, 0.25]]).unwrap();
        let s = NoiseSchedule::cosine();
        for (t, p) in [(0.1, [0.9, -1.7]), (0.5, [0.0, 0.4]), (0.95, [-1.0, 1.0])] {
            let x = Tensor::from_rows(&[p.to_vec()]).unwrap();
            let g = finite_diff_input(|y| o.log_density(y.data(), t, &s), &x, 1e-5).unwrap();
            let want = g.scale(-s.sigma(t)).unwrap();
            let got = o.eps_star(&x, t, &s).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn non_spd_rejected() {
        assert!(GaussianOracle::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(GaussianOracle::new(vec![0.0, 0.0], vec![vec![1.0, 0.1], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn datasets_are_finite_and_labelled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in ["gaussians8", "two_moons", "checkerboard", "spiral", "gaussian"] {
            let ds = ToyDataset::new(DatasetKind::from_name(name).unwrap()).unwrap();
            let (x, c) = ds.sample(&mut rng, 500).unwrap();
            assert_eq!(x.shape(), &[500, 2]);
            assert!(c.iter().all(|&c| (c as usize) < ds.n_classes()));
        }
        assert!(DatasetKind::from_name("mnist").is_err());
    }

    #[test]
    fn gaussians8_class_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = ToyDataset::new(DatasetKind::Gaussians8).unwrap();
        let x = ds.sample_given(&mut rng, &vec![2; 4000]).unwrap();
        let (m, c) = moments(&x);
        assert!(m[0].abs() < 0.03 && (m[1] - 4.0).abs() < 0.03);
        assert!((c[0][0] - 0.09).abs() < 0.01);
    }

    #[test]
    fn gaussian_dataset_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = ToyDataset::new(DatasetKind::Gaussian {
            mean: vec![1.0, -2.0],
            cov: vec![vec![1.0, 0.3], vec![0.3, 0.25]],
        })
        .unwrap();
        let (x, _) = ds.sample(&mut rng, 40_000).unwrap();
        let (m, c) = moments(&x);
        assert!((m[0] - 1.0).abs() < 0.03 && (m[1] + 2.0).abs() < 0.02);
        assert!((c[0][1] - 0.3).abs() < 0.02 && (c[1][1] - 0.25).abs() < 0.01);
    }
}
