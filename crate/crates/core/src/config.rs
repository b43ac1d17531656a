//! Run configuration: one flat TOML table, unknown keys rejected.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, ToyDataset};
use crate::error::{Error, Result};
use crate::losses::{DistillLossKind, GanKind, LossSet, LossWeights, RenoiseSpec};
use crate::nets::{DiscConfig, NetConfig};
use crate::sampling::{RolloutGrid, SolverKind};
use crate::schedule::NoiseSchedule;
use crate::timesteps::{PhasePlan, PiPreset};

/// Every knob of teacher training and distillation. Keys mirror the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `gaussians8`, `two_moons`, `checkerboard`, `spiral` or `gaussian`.
    pub dataset: String,
    /// Fixed training-set size drawn once per seed.
    pub dataset_size: usize,

    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub x0_clamp: f64,

    pub teacher_iters: u64,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    /// Probability of replacing the class by the null token in teacher training.
    pub p_uncond: f64,

    /// Number of timestep atoms.
    pub k: usize,
    pub iters: u64,
    pub batch: usize,
    pub lr_student: f64,
    pub lr_disc: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Guidance of the teacher score in the distribution-matching term; midpoint of the range when unset.
    pub omega_dmd: Option<f64>,
    pub dmd_normalize: bool,
    pub solver: SolverKind,
    /// Teacher steps per rollout; 0 walks every atom below the sampled one.
    pub rollout_steps: usize,
    pub distill_loss: DistillLossKind,
    pub gan: GanKind,
    pub losses: LossSet,
    pub pi: PiPreset,
    pub lora_rank: usize,
    pub disc_hidden: Vec<usize>,
    pub disc_feature_depth: usize,
    pub disc_use_cond: bool,
    pub t_prime: Vec<f64>,
    pub t_min_dd: f64,
    /// Iterations between phase shifts of the default plan.
    pub phase_every: u64,
    /// Explicit phase table; replaces the default plan when present.
    pub phases: Option<Vec<crate::timesteps::Phase>>,

    /// Iterations between evaluations; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_seed: u64,
    /// Evaluation budget of the teacher reference; two per step under guidance.
    pub teacher_eval_nfe: usize,
    /// Guidance of the teacher reference sampler; the distillation midpoint when unset.
    pub eval_omega: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "gaussians8".into(),
            dataset_size: 20_000,
            hidden: vec![64, 64, 64],
            time_dim: 32,
            cond_dim: 16,
            x0_clamp: 0.05,
            teacher_iters: 6000,
            teacher_batch: 256,
            teacher_lr: 2e-3,
            p_uncond: 0.1,
            k: 32,
            iters: 20_000,
            batch: 32,
            lr_student: 1e-5,
            lr_disc: 1e-5,
            omega_min: 1.0,
            omega_max: 4.0,
            omega_dmd: None,
            dmd_normalize: true,
            solver: SolverKind::Ddim,
            rollout_steps: 0,
            distill_loss: DistillLossKind::Mse,
            gan: GanKind::Lsgan,
            losses: LossSet::All,
            pi: PiPreset::Ours,
            lora_rank: 16,
            disc_hidden: vec![64, 64],
            disc_feature_depth: 2,
            disc_use_cond: true,
            t_prime: vec![0.01, 0.25, 0.5, 0.75],
            t_min_dd: 0.02,
            phase_every: 5000,
            phases: None,
            eval_every: 500,
            eval_samples: 2000,
            eval_projections: 128,
            eval_seed: 0x5eed,
            teacher_eval_nfe: 32,
            eval_omega: None,
        }
    }
}

fn check(ok: bool, key: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {msg}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        DatasetKind::from_name(&self.dataset).map_err(|e| Error::Config(format!("dataset: {e}")))?;
        check(self.dataset_size > 0, "dataset_size", "must be positive")?;
        check(!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), "hidden", "needs at least one positive width")?;
        check(self.time_dim > 0 && self.time_dim % 2 == 0, "time_dim", "must be even and positive")?;
        check(self.cond_dim > 0, "cond_dim", "must be positive")?;
        check(self.x0_clamp > 0.0 && self.x0_clamp < 0.5, "x0_clamp", "must lie in (0, 0.5)")?;
        check(self.teacher_batch > 0 && self.batch > 0, "batch", "batch sizes must be positive")?;
        for (key, lr) in [("teacher_lr", self.teacher_lr), ("lr_student", self.lr_student), ("lr_disc", self.lr_disc)] {
            check(lr.is_finite() && lr > 0.0, key, "must be finite and positive")?;
        }
        check((0.0..1.0).contains(&self.p_uncond), "p_uncond", "must lie in [0, 1)")?;
        check(self.k >= 4 && self.k % 4 == 0, "k", "must be a positive multiple of 4")?;
        check(
            self.omega_min.is_finite() && self.omega_max.is_finite() && 0.0 <= self.omega_min && self.omega_min <= self.omega_max,
            "omega_min/omega_max",
            "need 0 ≤ omega_min ≤ omega_max",
        )?;
        if let Some(w) = self.omega_dmd {
            check(w.is_finite() && w >= 0.0, "omega_dmd", "must be finite and non-negative")?;
        }
        if let Some(w) = self.eval_omega {
            check(w.is_finite() && w >= 0.0, "eval_omega", "must be finite and non-negative")?;
        }
        check(
            self.lora_rank >= 1 && self.lora_rank <= *self.hidden.iter().min().unwrap_or(&0),
            "lora_rank",
            "must lie in [1, smallest hidden width]",
        )?;
        check(
            self.disc_feature_depth >= 1 && self.disc_feature_depth <= self.hidden.len(),
            "disc_feature_depth",
            "must lie in [1, number of hidden layers]",
        )?;
        check(self.disc_hidden.iter().all(|&h| h > 0), "disc_hidden", "widths must be positive")?;
        self.renoise().validate().map_err(|e| Error::Config(format!("t_prime/t_min_dd: {e}")))?;
        check(self.phase_every > 0, "phase_every", "must be positive")?;
        let plan = self.phase_plan();
        plan.validate().map_err(|e| Error::Config(format!("phases: {e}")))?;
        check(self.iters >= plan.last_start(), "iters", "must reach the start of the last phase")?;
        check(self.eval_samples >= 2, "eval_samples", "needs at least two samples")?;
        check(self.eval_projections >= 1, "eval_projections", "needs at least one projection")?;
        check(self.teacher_eval_nfe >= 2, "teacher_eval_nfe", "needs at least two evaluations")?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::new(DatasetKind::from_name(&self.dataset)?)
    }

    pub fn net_config(&self, data: &ToyDataset) -> NetConfig {
        NetConfig {
            data_dim: data.dim(),
            n_classes: data.n_classes(),
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            hidden: self.disc_hidden.clone(),
            feature_depth: self.disc_feature_depth,
            use_cond: self.disc_use_cond,
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine().with_x0_clamp(self.x0_clamp)
    }

    pub fn renoise(&self) -> RenoiseSpec {
        RenoiseSpec {
            t_prime_set: self.t_prime.clone(),
            t_min_dd: self.t_min_dd,
        }
    }

    pub fn phase_plan(&self) -> PhasePlan {
        match &self.phases {
            Some(phases) => PhasePlan { phases: phases.clone() },
            None => PhasePlan::default_with_shift(self.phase_every),
        }
    }

    pub fn rollout_grid(&self) -> RolloutGrid {
        match self.rollout_steps {
            0 => RolloutGrid::Full,
            n => RolloutGrid::Thinned(n),
        }
    }

    pub fn omega_dmd(&self) -> f64 {
        self.omega_dmd.unwrap_or(0.5 * (self.omega_min + self.omega_max))
    }

    pub fn eval_omega(&self) -> f64 {
        self.eval_omega.unwrap_or(0.5 * (self.omega_min + self.omega_max))
    }

    /// Phase loss weights with disabled terms zeroed.
    pub fn weights(&self, lambda_adv: f64, lambda_dmd: f64) -> Result<LossWeights> {
        Ok(self.losses.mask(LossWeights::new(lambda_adv, lambda_dmd)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("lr_studnet = 1e-4\n").unwrap_err().to_string();
        assert!(err.contains("lr_studnet") && err.contains("lr_student"), "{err}");
    }

    #[test]
    fn bad_enum_lists_choices() {
        let err = ExperimentConfig::from_toml("gan = \"dcgan\"\n").unwrap_err().to_string();
        assert!(err.contains("lsgan") && err.contains("hinge"), "{err}");
        let err = ExperimentConfig::from_toml("dataset = \"mnist\"\n").unwrap_err().to_string();
        assert!(err.contains("gaussians8"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("k = 16\nomega_min = 2.0\nomega_max = 2.0\nrollout_steps = 4\n").unwrap();
        assert_eq!(cfg.k, 16);
        assert_eq!(cfg.omega_dmd(), 2.0);
        assert_eq!(cfg.rollout_grid(), RolloutGrid::Thinned(4));
        assert_eq!(cfg.iters, ExperimentConfig::default().iters);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "omega_min = 3.0\nomega_max = 2.0\n",
            "k = 30\n",
            "iters = 100\n",
            "lora_rank = 1000\n",
            "t_prime = [0.0]\n",
            "p_uncond = 1.0\n",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn explicit_phase_table() {
        let text = r#"
iters = 10
[[phases]]
start_iter = 0
anchor_betas = [0.25, 0.25, 0.25, 0.25]
lambda_adv = 0.0
lambda_dmd = 0.0
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.phase_plan().phases.len(), 1);
    }

    #[test]
    fn loss_set_masks_phase_weights() {
        let mut cfg = ExperimentConfig::default();
        cfg.losses = LossSet::Distill;
        assert_eq!(cfg.weights(0.3, 0.7).unwrap(), LossWeights::default());
    }
}
