//! Continuous-time noise schedule, forward corruption and the conversions between
//! noise, clean-sample and score parameterisations.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Below this `α(t)` the clean-sample reconstruction is treated as singular.
pub const ALPHA_FLOOR: f64 = 1e-6;
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// `α(t) = cos(πt/2)`, `σ(t) = sin(πt/2)` on `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Clean-sample predictions at `t > 1 - x0_clamp` are computed at `1 - x0_clamp`.
    pub x0_clamp: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine()
    }
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            x0_clamp: 1e-3,
        }
    }

    pub fn with_x0_clamp(mut self, clamp: f64) -> Self {
        self.x0_clamp = clamp;
        self
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            // Endpoints are pinned so that t=0 and t=1 are exact.
            ScheduleKind::Cosine if t <= 0.0 => 1.0,
            ScheduleKind::Cosine if t >= 1.0 => 0.0,
            ScheduleKind::Cosine => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine if t <= 0.0 => 0.0,
            ScheduleKind::Cosine if t >= 1.0 => 1.0,
            ScheduleKind::Cosine => (FRAC_PI_2 * t).sin(),
        }
    }

    /// `d log α / dt`.
    pub fn dlog_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * t).tan(),
        }
    }

    /// `d σ² / dt`.
    pub fn dsigma2(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => FRAC_PI_2 * (std::f64::consts::PI * t).sin(),
        }
    }

    /// `log(α² / σ²)`.
    pub fn log_snr(&self, t: f64) -> f64 {
        2.0 * (self.alpha(t) / self.sigma(t)).ln()
    }

    /// Per-timestep weight of the denoising objective; constant under ε-prediction.
    pub fn loss_weight(&self, _t: f64) -> f64 {
        1.0
    }

    /// Timestep used inside clean-sample reconstruction.
    pub fn x0_time(&self, t: f64) -> f64 {
        t.min(1.0 - self.x0_clamp)
    }

    /// `α(t)·z0 + σ(t)·ε`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        check_unit(t)?;
        z0.same_shape(eps, "forward_diffuse")?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        z0.zip(eps, |x, e| a * x + s * e, "forward_diffuse")
    }

    /// Forward corruption with one timestep per row.
    pub fn forward_diffuse_rows(&self, z0: &Tensor, ts: &[f64], eps: &Tensor) -> Result<Tensor> {
        z0.same_shape(eps, "forward_diffuse")?;
        if ts.len() != z0.rows() {
            return Err(Error::Shape {
                op: "forward_diffuse",
                detail: format!("{} timesteps for {} rows", ts.len(), z0.rows()),
            });
        }
        for &t in ts {
            check_unit(t)?;
        }
        let a: Vec<f64> = ts.iter().map(|&t| self.alpha(t)).collect();
        let s: Vec<f64> = ts.iter().map(|&t| self.sigma(t)).collect();
        z0.scale_rows(&a)?.add(&eps.scale_rows(&s)?)
    }

    /// `(z_t − σ(t)·ε̂) / α(t)`; errors where `α(t)` vanishes.
    pub fn eps_to_x0(&self, zt: &Tensor, eps_hat: &Tensor, t: f64) -> Result<Tensor> {
        check_unit(t)?;
        zt.same_shape(eps_hat, "eps_to_x0")?;
        let a = self.alpha(t);
        if a < ALPHA_FLOOR {
            return Err(Error::Singular { t, what: "alpha(t) ~ 0 in eps_to_x0" });
        }
        let s = self.sigma(t);
        zt.zip(eps_hat, |z, e| (z - s * e) / a, "eps_to_x0")
    }

    /// `(z_t − α(t)·x̂0) / σ(t)`; errors where `σ(t)` vanishes.
    pub fn x0_to_eps(&self, zt: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
        check_unit(t)?;
        zt.same_shape(x0, "x0_to_eps")?;
        let s = self.sigma(t);
        if s < SIGMA_FLOOR {
            return Err(Error::Singular { t, what: "sigma(t) ~ 0 in x0_to_eps" });
        }
        let a = self.alpha(t);
        zt.zip(x0, |z, x| (z - a * x) / s, "x0_to_eps")
    }

    /// `−ε̂ / σ(t)`.
    pub fn score_from_eps(&self, eps_hat: &Tensor, t: f64) -> Result<Tensor> {
        check_unit(t)?;
        let s = self.sigma(t);
        if s < SIGMA_FLOOR {
            return Err(Error::Singular { t, what: "sigma(t) ~ 0 in score" });
        }
        eps_hat.scale(-1.0 / s)
    }

    /// Score with one timestep per row.
    pub fn score_from_eps_rows(&self, eps_hat: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let mut factors = Vec::with_capacity(ts.len());
        for &t in ts {
            check_unit(t)?;
            let s = self.sigma(t);
            if s < SIGMA_FLOOR {
                return Err(Error::Singular { t, what: "sigma(t) ~ 0 in score" });
            }
            factors.push(-1.0 / s);
        }
        eps_hat.scale_rows(&factors)
    }

    /// Probability-flow ODE coefficients `(d log α/dt, g²)` with
    /// `g² = dσ²/dt − 2 (d log α/dt) σ²`; drift is `f·x − ½ g² ∇log p`.
    pub fn pf_ode_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Singular { t, what: "PF-ODE coefficients need t in (0, 1)" });
        }
        let f = self.dlog_alpha(t);
        let s = self.sigma(t);
        Ok((f, self.dsigma2(t) - 2.0 * f * s * s))
    }
}
