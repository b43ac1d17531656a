//! Distillation, adversarial and distribution-matching objectives and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grad::{ParamStore, Tape, Tensor, Var};
use crate::nets::{Cond, DenoiserNet, Discriminator};
use crate::sampling::{cfg_combine, standard_normal, EpsModel};
use crate::schedule::NoiseSchedule;

/// Regression loss between student and teacher clean estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLossKind {
    #[default]
    Mse,
    L1,
}

impl DistillLossKind {
    pub const ALL: [DistillLossKind; 2] = [DistillLossKind::Mse, DistillLossKind::L1];

    pub fn name(self) -> &'static str {
        match self {
            DistillLossKind::Mse => "mse",
            DistillLossKind::L1 => "l1",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanKind {
    #[default]
    Lsgan,
    Hinge,
    Wgan,
}

impl GanKind {
    pub const ALL: [GanKind; 3] = [GanKind::Lsgan, GanKind::Hinge, GanKind::Wgan];

    pub fn name(self) -> &'static str {
        match self {
            GanKind::Lsgan => "lsgan",
            GanKind::Hinge => "hinge",
            GanKind::Wgan => "wgan",
        }
    }
}

/// Which terms of the total objective are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    Distill,
    DistillDmd,
    DistillAdv,
    #[default]
    All,
}

impl LossSet {
    pub const ALL: [LossSet; 4] = [LossSet::Distill, LossSet::DistillDmd, LossSet::DistillAdv, LossSet::All];

    pub fn name(self) -> &'static str {
        match self {
            LossSet::Distill => "distill",
            LossSet::DistillDmd => "distill_dmd",
            LossSet::DistillAdv => "distill_adv",
            LossSet::All => "all",
        }
    }

    /// Zeroes the weights of disabled terms.
    pub fn mask(self, w: LossWeights) -> LossWeights {
        let (adv, dmd) = match self {
            LossSet::Distill => (false, false),
            LossSet::DistillDmd => (false, true),
            LossSet::DistillAdv => (true, false),
            LossSet::All => (true, true),
        };
        LossWeights {
            lambda_adv: if adv { w.lambda_adv } else { 0.0 },
            lambda_dmd: if dmd { w.lambda_dmd } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_dmd: f64,
}

impl LossWeights {
    pub fn new(lambda_adv: f64, lambda_dmd: f64) -> Result<Self> {
        for (name, v) in [("lambda_adv", lambda_adv), ("lambda_dmd", lambda_dmd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(Self { lambda_adv, lambda_dmd })
    }
}

/// Re-noising laws of the adversarial (`t′`) and distribution-matching (`t″`) terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenoiseSpec {
    pub t_prime_set: Vec<f64>,
    pub t_min_dd: f64,
}

impl Default for RenoiseSpec {
    fn default() -> Self {
        Self {
            t_prime_set: vec![0.01, 0.25, 0.5, 0.75],
            t_min_dd: 0.02,
        }
    }
}

impl RenoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_prime_set.is_empty() || self.t_prime_set.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(invalid(format!("t′ set must be non-empty and inside (0, 1): {:?}", self.t_prime_set)));
        }
        if !(self.t_min_dd > 0.0 && self.t_min_dd < 1.0) {
            return Err(invalid(format!("t″ lower bound must lie in (0, 1), got {}", self.t_min_dd)));
        }
        Ok(())
    }
}

fn mean_square(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    tape.mean(sq)
}

/// Mean per-coordinate error against a detached teacher target.
pub fn distill_loss(tape: &mut Tape, kind: DistillLossKind, x0_student: Var, x0_teacher: &Tensor) -> Result<Var> {
    let target = tape.constant(x0_teacher.clone());
    let diff = tape.sub(x0_student, target)?;
    match kind {
        DistillLossKind::Mse => mean_square(tape, diff),
        DistillLossKind::L1 => {
            let pos = tape.relu(diff)?;
            let neg_diff = tape.scale(diff, -1.0)?;
            let neg = tape.relu(neg_diff)?;
            let abs = tape.add(pos, neg)?;
            tape.mean(abs)
        }
    }
}

/// Generator objective on the scores of fakes.
pub fn generator_loss(tape: &mut Tape, kind: GanKind, d_fake: Var) -> Result<Var> {
    match kind {
        GanKind::Lsgan => {
            let one = tape.constant(Tensor::full(tape.value(d_fake).shape(), 1.0));
            let d = tape.sub(d_fake, one)?;
            let m = mean_square(tape, d)?;
            tape.scale(m, 0.5)
        }
        GanKind::Hinge | GanKind::Wgan => {
            let m = tape.mean(d_fake)?;
            tape.scale(m, -1.0)
        }
    }
}

/// Discriminator objective on the scores of reals and (already detached) fakes.
pub fn discriminator_loss(tape: &mut Tape, kind: GanKind, d_real: Var, d_fake: Var) -> Result<Var> {
    match kind {
        GanKind::Lsgan => {
            let one = tape.constant(Tensor::full(tape.value(d_real).shape(), 1.0));
            let r = tape.sub(d_real, one)?;
            let real = mean_square(tape, r)?;
            let fake = mean_square(tape, d_fake)?;
            let sum = tape.add(real, fake)?;
            tape.scale(sum, 0.5)
        }
        GanKind::Hinge => {
            let one_r = tape.constant(Tensor::full(tape.value(d_real).shape(), 1.0));
            let one_f = tape.constant(Tensor::full(tape.value(d_fake).shape(), 1.0));
            let r = tape.sub(one_r, d_real)?;
            let r = tape.relu(r)?;
            let real = tape.mean(r)?;
            let f = tape.add(one_f, d_fake)?;
            let f = tape.relu(f)?;
            let fake = tape.mean(f)?;
            tape.add(real, fake)
        }
        GanKind::Wgan => {
            let fake = tape.mean(d_fake)?;
            let real = tape.mean(d_real)?;
            tape.sub(fake, real)
        }
    }
}

/// Random draws of the adversarial term, in stream order: `t′` per sample, then `ε₁, ε₂, ε₃`.
#[derive(Clone, Debug)]
pub struct AdversarialDraws {
    pub t_prime: Vec<f64>,
    pub eps1: Tensor,
    pub eps2: Tensor,
    pub eps3: Tensor,
}

impl AdversarialDraws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, spec: &RenoiseSpec, n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("adversarial losses need a non-empty batch"));
        }
        let t_prime = (0..n).map(|_| spec.t_prime_set[rng.random_range(0..spec.t_prime_set.len())]).collect();
        Ok(Self {
            t_prime,
            eps1: standard_normal(rng, n, dim)?,
            eps2: standard_normal(rng, n, dim)?,
            eps3: standard_normal(rng, n, dim)?,
        })
    }
}

/// Networks shared by the adversarial and distribution-matching terms.
#[derive(Clone, Copy)]
pub struct LossNets<'a> {
    pub store: &'a ParamStore,
    pub teacher: &'a DenoiserNet,
    pub student: &'a DenoiserNet,
    pub disc: &'a Discriminator,
    pub sched: &'a NoiseSchedule,
}

/// The generator and discriminator objectives, recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    /// Reaches student parameters only; discriminator weights enter as constants.
    pub l_adv: Var,
    /// Reaches discriminator parameters only; the fake enters detached.
    pub l_dis: Var,
    pub nfe: usize,
}

/// Fakes are student estimates from `z0` noised to `t′` with `ε₁`, re-noised at
/// the same `t′` with `ε₂`; reals are `z0` noised with `ε₃`. Teacher features of
/// the fake are computed once and detached for the discriminator objective.
pub fn adversarial_losses(
    tape: &mut Tape,
    nets: LossNets<'_>,
    kind: GanKind,
    z0: &Tensor,
    conds: &[Cond],
    draws: &AdversarialDraws,
) -> Result<AdversarialLosses> {
    let n = z0.rows();
    if n == 0 || conds.len() != n || draws.t_prime.len() != n {
        return Err(invalid(format!(
            "adversarial batch mismatch: {n} samples, {} conditions, {} times",
            conds.len(),
            draws.t_prime.len()
        )));
    }
    let LossNets {
        store,
        teacher,
        student,
        disc,
        sched,
    } = nets;
    let tp = &draws.t_prime;
    let z_noisy = tape.constant(sched.forward_diffuse_rows(z0, tp, &draws.eps1)?);
    let fake_x0 = student.x0_tape(tape, store, sched, z_noisy, tp, conds, true)?;

    let d = z0.cols();
    let mut alphas = Vec::with_capacity(n * d);
    for &t in tp {
        alphas.extend(std::iter::repeat_n(sched.alpha(t), d));
    }
    let alpha = tape.constant(Tensor::new(vec![n, d], alphas)?);
    let zero = Tensor::zeros(&[n, d]);
    let noise = tape.constant(sched.forward_diffuse_rows(&zero, tp, &draws.eps2)?);
    let scaled = tape.mul(fake_x0, alpha)?;
    let fake = tape.add(scaled, noise)?;

    let feats = disc.features(tape, store, teacher, fake, tp, conds)?;
    let d_fake_gen = disc.head(tape, store, &feats, tp, conds, false)?;
    let l_adv = generator_loss(tape, kind, d_fake_gen)?;

    let detached: Vec<Var> = feats.iter().map(|&f| tape.detach(f)).collect();
    let d_fake = disc.head(tape, store, &detached, tp, conds, true)?;
    let real = tape.constant(sched.forward_diffuse_rows(z0, tp, &draws.eps3)?);
    let d_real = disc.forward_tape(tape, store, teacher, real, tp, conds, true)?;
    let l_dis = discriminator_loss(tape, kind, d_real, d_fake)?;
    Ok(AdversarialLosses { l_adv, l_dis, nfe: 1 })
}

/// Random draws of the distribution-matching term, in stream order: `t″` per sample, then `ε`.
#[derive(Clone, Debug)]
pub struct DmdDraws {
    pub t_dd: Vec<f64>,
    pub eps: Tensor,
}

impl DmdDraws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, spec: &RenoiseSpec, n: usize, dim: usize) -> Result<Self> {
        let t_dd = (0..n).map(|_| rng.random_range(spec.t_min_dd..=1.0)).collect();
        Ok(Self {
            t_dd,
            eps: standard_normal(rng, n, dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DmdSurrogate {
    /// Scalar whose gradient with respect to the student estimate is `Δ / batch`.
    pub loss: Var,
    /// Detached (and possibly normalised) score difference `s_student − s_teacher`.
    pub delta: Tensor,
    pub nfe: usize,
}

/// Surrogate for the KL gradient between student and guided teacher marginals.
/// Scores are evaluated on the detached estimate re-noised to `t″`; the gradient
/// re-enters only through `⟨Δ, x̃0⟩`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_surrogate(
    tape: &mut Tape,
    student: &dyn EpsModel,
    teacher: &dyn EpsModel,
    sched: &NoiseSchedule,
    x0_student: Var,
    conds: &[Cond],
    omega_dmd: f64,
    draws: &DmdDraws,
    normalize: bool,
) -> Result<DmdSurrogate> {
    let x0 = tape.value(x0_student).clone();
    let n = x0.rows();
    if n == 0 || conds.len() != n || draws.t_dd.len() != n {
        return Err(invalid("distribution-matching batch mismatch"));
    }
    let y = sched.forward_diffuse_rows(&x0, &draws.t_dd, &draws.eps)?;
    let cond = teacher.eps(&y, &draws.t_dd, conds)?;
    let (guided, teacher_nfe) = if omega_dmd == 1.0 {
        (cond, 1)
    } else {
        let nulls = vec![Cond::Null; n];
        let uncond = teacher.eps(&y, &draws.t_dd, &nulls)?;
        (cfg_combine(&cond, &uncond, omega_dmd)?, 2)
    };
    let s_teacher = sched.score_from_eps_rows(&guided, &draws.t_dd)?;
    let s_student = sched.score_from_eps_rows(&student.eps(&y, &draws.t_dd, conds)?, &draws.t_dd)?;
    let mut delta = s_student.sub(&s_teacher)?;
    if normalize {
        let d = delta.cols();
        let factors: Vec<f64> = (0..n)
            .map(|r| 1.0 / (delta.row(r).iter().map(|v| v.abs()).sum::<f64>() / d as f64 + 1e-8))
            .collect();
        delta = delta.scale_rows(&factors)?;
    }
    let dv = tape.constant(delta.clone());
    let prod = tape.mul(dv, x0_student)?;
    let sum = tape.sum(prod)?;
    let loss = tape.scale(sum, 1.0 / n as f64)?;
    Ok(DmdSurrogate {
        loss,
        delta,
        nfe: teacher_nfe + 1,
    })
}

/// `distill + λ_adv·adv + λ_dmd·dmd`, refusing non-finite terms by name.
pub fn total_loss(tape: &mut Tape, distill: Var, adv: Var, dmd: Var, weights: LossWeights) -> Result<Var> {
    for (term, v) in [("distillation", distill), ("adversarial", adv), ("distribution-matching", dmd)] {
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    let weights = LossWeights::new(weights.lambda_adv, weights.lambda_dmd)?;
    let a = tape.scale(adv, weights.lambda_adv)?;
    let d = tape.scale(dmd, weights.lambda_dmd)?;
    let sum = tape.add(distill, a)?;
    tape.add(sum, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_on(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v).unwrap())
    }

    #[test]
    fn distill_loss_values() {
        let mut tape = Tape::new();
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let same = tape.leaf(t.clone());
        let l = distill_loss(&mut tape, DistillLossKind::Mse, same, &t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let shifted = tape.leaf(t.map(|v| v + 1.0, "test").unwrap());
        let l = distill_loss(&mut tape, DistillLossKind::Mse, shifted, &t).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l1 = distill_loss(&mut tape, DistillLossKind::L1, shifted, &t).unwrap();
        assert_eq!(tape.value(l1).item(), 1.0);
    }

    #[test]
    fn lsgan_reference_values() {
        let mut tape = Tape::new();
        let half = tape.constant(Tensor::full(&[4, 1], 0.5));
        let adv = generator_loss(&mut tape, GanKind::Lsgan, half).unwrap();
        let dis = discriminator_loss(&mut tape, GanKind::Lsgan, half, half).unwrap();
        assert_eq!(tape.value(adv).item(), 0.125);
        assert_eq!(tape.value(dis).item(), 0.25);

        let ones = tape.constant(Tensor::full(&[4, 1], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4, 1]));
        let dis = discriminator_loss(&mut tape, GanKind::Lsgan, ones, zeros).unwrap();
        let adv = generator_loss(&mut tape, GanKind::Lsgan, zeros).unwrap();
        assert_eq!(tape.value(dis).item(), 0.0);
        assert_eq!(tape.value(adv).item(), 0.5);
    }

    #[test]
    fn hinge_and_wgan_values() {
        let mut tape = Tape::new();
        let real = tape.constant(Tensor::from_rows(&[vec![2.0], vec![0.5]]).unwrap());
        let fake = tape.constant(Tensor::from_rows(&[vec![-2.0], vec![0.0]]).unwrap());
        let h = discriminator_loss(&mut tape, GanKind::Hinge, real, fake).unwrap();
        // real: relu(1-2)=0, relu(0.5)=0.5 → 0.25; fake: relu(-1)=0, relu(1)=1 → 0.5
        assert_eq!(tape.value(h).item(), 0.75);
        let w = discriminator_loss(&mut tape, GanKind::Wgan, real, fake).unwrap();
        assert_eq!(tape.value(w).item(), -1.0 - 1.25);
        let g = generator_loss(&mut tape, GanKind::Hinge, fake).unwrap();
        assert_eq!(tape.value(g).item(), 1.0);
    }

    #[test]
    fn total_loss_arithmetic_and_errors() {
        let mut tape = Tape::new();
        let (d, a, m) = (scalar_on(&mut tape, 1.0), scalar_on(&mut tape, 1.0), scalar_on(&mut tape, 1.0));
        let t = total_loss(&mut tape, d, a, m, LossWeights::new(0.3, 0.7).unwrap()).unwrap();
        assert!((tape.value(t).item() - 2.0).abs() < 1e-15);

        let d = scalar_on(&mut tape, 0.37);
        let a = scalar_on(&mut tape, 5.0);
        let t = total_loss(&mut tape, d, a, m, LossWeights::default()).unwrap();
        assert_eq!(tape.value(t).item(), 0.37);
        assert!(LossWeights::new(-0.1, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn loss_sets_mask_weights() {
        let w = LossWeights::new(0.3, 0.7).unwrap();
        assert_eq!(LossSet::Distill.mask(w), LossWeights::default());
        assert_eq!(LossSet::DistillDmd.mask(w), LossWeights::new(0.0, 0.7).unwrap());
        assert_eq!(LossSet::DistillAdv.mask(w), LossWeights::new(0.3, 0.0).unwrap());
        assert_eq!(LossSet::All.mask(w), w);
    }

    #[test]
    fn renoise_spec_validation() {
        assert!(RenoiseSpec::default().validate().is_ok());
        let bad = RenoiseSpec {
            t_prime_set: vec![0.0, 0.5],
            ..RenoiseSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = RenoiseSpec {
            t_min_dd: 0.0,
            ..RenoiseSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
