//! Teacher pretraining, the distillation loop, evaluation and the ablation harness.
//!
//! Random streams: the training set uses stream 0 of the run seed, teacher
//! training stream 1, distillation stream 2 and fresh student/discriminator
//! weights stream 3. Evaluation draws only from `eval_seed`, so every evaluation
//! of a run sees the same reference set and noise.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, MetricRecord, OptimizerState, RngState};
use crate::config::ExperimentConfig;
use crate::data::ToyDataset;
use crate::error::{invalid, Error, Result};
use crate::grad::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};
use crate::losses::{
    adversarial_losses, distill_loss, dmd_surrogate, total_loss, AdversarialDraws, DmdDraws, LossNets, LossSet,
};
use crate::metrics::{mmd, sliced_wasserstein};
use crate::nets::{classes, Cond, DenoiserNet, Discriminator};
use crate::sampling::{
    standard_normal, student_sample, teacher_rollout, teacher_sample, NetModel, SolverSpec,
};
use crate::schedule::NoiseSchedule;
use crate::timesteps::{PhasePlan, TimestepDistribution};

pub const TEACHER_PREFIX: &str = "teacher";
pub const STUDENT_PREFIX: &str = "student";
pub const DISC_PREFIX: &str = "disc";
pub const STUDENT_OPT: &str = "student";
pub const DISC_OPT: &str = "disc";
pub const TEACHER_OPT: &str = "teacher";

/// Student step counts evaluated during distillation.
pub const EVAL_NFES: [usize; 3] = [1, 2, 4];
pub const MMD_BANDWIDTH: f64 = 1.0;
/// Points per set used for the (quadratic-cost) MMD estimate.
pub const MMD_POINTS: usize = 500;

const DATA_STREAM: u64 = 0;
const TEACHER_STREAM: u64 = 1;
const DISTILL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable short identifier of a configuration (FNV-1a of its TOML form).
pub fn config_id(cfg: &ExperimentConfig) -> String {
    let text = cfg.to_toml().unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// The fixed training set of a run.
pub fn training_set(cfg: &ExperimentConfig, seed: u64) -> Result<(ToyDataset, Tensor, Vec<u32>)> {
    let ds = cfg.dataset()?;
    let (x, labels) = ds.sample(&mut seeded(seed, DATA_STREAM), cfg.dataset_size)?;
    Ok((ds, x, labels))
}

fn batch<R: Rng + ?Sized>(rng: &mut R, data: &Tensor, labels: &[u32], n: usize) -> (Tensor, Vec<u32>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..labels.len())).collect();
    (data.select_rows(&idx), idx.iter().map(|&i| labels[i]).collect())
}

fn restore_adam(ck: &Checkpoint, name: &str, params: Vec<ParamId>, store: &ParamStore) -> Result<Adam> {
    let saved = ck
        .optimizer(name)
        .ok_or_else(|| invalid(format!("checkpoint has no {name} optimizer")))?;
    if saved.states.len() != params.len()
        || saved.states.iter().zip(&params).any(|((n, _), &id)| n != store.name(id))
    {
        return Err(invalid(format!("{name} optimizer does not match the network")));
    }
    let mut adam = Adam::new(saved.config, params, store);
    adam.set_states(saved.states.iter().map(|(_, s)| s.clone()).collect())?;
    Ok(adam)
}

fn save_adam(name: &str, adam: &Adam, store: &ParamStore) -> OptimizerState {
    OptimizerState {
        name: name.to_string(),
        config: *adam.config(),
        states: adam
            .params()
            .iter()
            .zip(adam.states())
            .map(|(&id, s)| (store.name(id).to_string(), s.clone()))
            .collect(),
    }
}

fn grads_finite(store: &ParamStore, ids: &[ParamId]) -> Result<()> {
    for &id in ids {
        if store.grad(id).data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    Ok(())
}

/// A trained, frozen teacher.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub net: DenoiserNet,
}

impl Teacher {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Teacher {
            return Err(invalid("expected a teacher checkpoint"));
        }
        let store = ck.restore_params()?;
        let ds = ck.config.dataset()?;
        let net = DenoiserNet::bind(ck.config.net_config(&ds), &store, TEACHER_PREFIX)?;
        Ok(Self {
            config: ck.config.clone(),
            seed: ck.seed,
            store,
            net,
        })
    }

    pub fn model(&self) -> NetModel<'_> {
        NetModel::new(&self.net, &self.store)
    }

    /// The distillation config must describe the same data and network.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let t = &self.config;
        for (key, same) in [
            ("dataset", t.dataset == cfg.dataset),
            ("hidden", t.hidden == cfg.hidden),
            ("time_dim", t.time_dim == cfg.time_dim),
            ("cond_dim", t.cond_dim == cfg.cond_dim),
        ] {
            if !same {
                return Err(Error::Config(format!("{key}: differs between teacher checkpoint and config")));
            }
        }
        Ok(())
    }
}

/// Denoising score matching with condition dropout.
pub struct TeacherTrainer {
    config: ExperimentConfig,
    seed: u64,
    data: Tensor,
    labels: Vec<u32>,
    sched: NoiseSchedule,
    store: ParamStore,
    net: DenoiserNet,
    adam: Adam,
    rng: ChaCha8Rng,
    iter: u64,
    history: Vec<MetricRecord>,
}

impl TeacherTrainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (ds, data, labels) = training_set(cfg, seed)?;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed, TEACHER_STREAM);
        let net = DenoiserNet::new(cfg.net_config(&ds), &mut store, TEACHER_PREFIX, &mut rng)?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.teacher_lr), net.trainable_params(&store), &store);
        Ok(Self {
            config: cfg.clone(),
            seed,
            data,
            labels,
            sched: cfg.schedule(),
            store,
            net,
            adam,
            rng,
            iter: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let teacher = Teacher::from_checkpoint(ck)?;
        let (_, data, labels) = training_set(&ck.config, ck.seed)?;
        let adam = restore_adam(ck, TEACHER_OPT, teacher.net.trainable_params(&teacher.store), &teacher.store)?;
        Ok(Self {
            sched: ck.config.schedule(),
            config: ck.config.clone(),
            seed: ck.seed,
            data,
            labels,
            store: teacher.store,
            net: teacher.net,
            adam,
            rng: ck.rng.ok_or_else(|| invalid("teacher checkpoint has no rng state"))?.restore(),
            iter: ck.iter,
            history: ck.history.clone(),
        })
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    /// One Adam step; returns the batch loss `mean_b ‖ε̂ − ε‖²`.
    pub fn step(&mut self) -> Result<f64> {
        let n = self.config.teacher_batch;
        let snapshot = self.rng.clone();
        let (x0, labels) = batch(&mut self.rng, &self.data, &self.labels, n);
        let conds: Vec<Cond> = labels
            .iter()
            .map(|&c| if self.rng.random::<f64>() < self.config.p_uncond { Cond::Null } else { Cond::Class(c) })
            .collect();
        let ts: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
        let eps = standard_normal(&mut self.rng, n, x0.cols())?;
        let result = (|| {
            let zt = self.sched.forward_diffuse_rows(&x0, &ts, &eps)?;
            let mut tape = Tape::new();
            let zv = tape.constant(zt);
            let out = self.net.forward_tape(&mut tape, &self.store, zv, &ts, &conds, true)?;
            let target = tape.constant(eps);
            let diff = tape.sub(out.eps, target)?;
            let sq = tape.square(diff)?;
            let sum = tape.sum(sq)?;
            let loss = tape.scale(sum, 1.0 / n as f64)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term: "teacher", value });
            }
            let grads = tape.backward(loss)?;
            self.store.accumulate(&grads);
            grads_finite(&self.store, self.adam.params())?;
            self.adam.step(&mut self.store)?;
            Ok(value)
        })();
        match result {
            Ok(v) => {
                self.iter += 1;
                Ok(v)
            }
            Err(e) => {
                self.rng = snapshot;
                self.store.zero_grads();
                Err(e)
            }
        }
    }

    /// Trains to `config.teacher_iters`, logging the mean loss of every `log_every` steps.
    pub fn run(&mut self, log_every: u64, mut on_log: impl FnMut(&MetricRecord)) -> Result<()> {
        let log_every = log_every.max(1);
        let mut acc = 0.0;
        let mut count = 0u64;
        while self.iter < self.config.teacher_iters {
            acc += self.step()?;
            count += 1;
            if self.iter % log_every == 0 || self.iter == self.config.teacher_iters {
                let rec = MetricRecord {
                    iter: self.iter,
                    nfe: 0,
                    metric: "loss".into(),
                    value: acc / count as f64,
                };
                on_log(&rec);
                self.history.push(rec);
                acc = 0.0;
                count = 0;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Teacher,
            config: self.config.clone(),
            seed: self.seed,
            iter: self.iter,
            params: Checkpoint::snapshot_params(&self.store),
            optimizers: vec![save_adam(TEACHER_OPT, &self.adam, &self.store)],
            rng: Some(RngState::capture(&self.rng)),
            history: self.history.clone(),
        }
    }

    pub fn finish(self) -> Teacher {
        Teacher {
            config: self.config,
            seed: self.seed,
            store: self.store,
            net: self.net,
        }
    }
}

/// Trains a teacher from scratch; returns it with its loss log.
pub fn train_teacher(cfg: &ExperimentConfig, seed: u64) -> Result<(Teacher, Vec<MetricRecord>)> {
    let mut trainer = TeacherTrainer::new(cfg, seed)?;
    let every = (cfg.teacher_iters / 50).max(1);
    trainer.run(every, |_| {})?;
    let history = trainer.history.clone();
    Ok((trainer.finish(), history))
}

/// What happened in one distillation iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: u64,
    pub phase: usize,
    pub lambda_adv: f64,
    pub lambda_dmd: f64,
    pub omega: f64,
    pub t_index: usize,
    pub loss_distill: f64,
    pub loss_adv: f64,
    pub loss_dis: f64,
    pub loss_dmd: f64,
    pub loss_total: f64,
    pub nfe: usize,
}

/// Held-out reference points and classes used by every evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub points: Tensor,
    pub labels: Vec<u32>,
}

impl EvalSet {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let ds = cfg.dataset()?;
        let (points, labels) = ds.sample(&mut seeded(cfg.eval_seed, 0), cfg.eval_samples)?;
        Ok(Self { points, labels })
    }

    pub fn conds(&self) -> Vec<Cond> {
        classes(&self.labels)
    }

    /// Sliced-Wasserstein and MMD of `x` to the reference set.
    pub fn score(&self, cfg: &ExperimentConfig, x: &Tensor) -> Result<(f64, f64)> {
        let sw = sliced_wasserstein(x, &self.points, cfg.eval_projections, &mut seeded(cfg.eval_seed, 100))?;
        let m = MMD_POINTS.min(x.rows()).min(self.points.rows());
        let idx: Vec<usize> = (0..m).collect();
        let mmd = mmd(&x.select_rows(&idx), &self.points.select_rows(&idx), MMD_BANDWIDTH)?;
        Ok((sw, mmd))
    }
}

fn rec(iter: u64, nfe: usize, metric: &str, value: f64) -> MetricRecord {
    MetricRecord {
        iter,
        nfe,
        metric: metric.to_string(),
        value,
    }
}

/// Teacher samples on `steps` uniform solver steps at `omega`; returns samples and NFE.
pub fn teacher_samples(
    cfg: &ExperimentConfig,
    teacher: &NetModel<'_>,
    eval: &EvalSet,
    steps: usize,
    omega: f64,
) -> Result<(Tensor, usize)> {
    let spec = SolverSpec::uniform(cfg.solver, steps)?;
    let dim = eval.points.cols();
    teacher_sample(teacher, &spec, omega, &eval.conds(), &cfg.schedule(), dim, &mut seeded(cfg.eval_seed, 50 + steps as u64))
}

/// Guided teacher at the `teacher_eval_nfe` budget and, as the undistilled
/// baseline, at a budget of 4. Guidance other than 1 costs two evaluations per step.
pub fn teacher_reference(cfg: &ExperimentConfig, teacher: &NetModel<'_>, eval: &EvalSet) -> Result<Vec<MetricRecord>> {
    let mut rows = Vec::new();
    let omega = cfg.eval_omega();
    let per_step = if omega == 1.0 { 1 } else { 2 };
    for budget in [cfg.teacher_eval_nfe, 4] {
        let (x, nfe) = teacher_samples(cfg, teacher, eval, (budget / per_step).max(1), omega)?;
        let (sw, mmd) = eval.score(cfg, &x)?;
        rows.push(rec(0, nfe, "teacher_sw", sw));
        rows.push(rec(0, nfe, "teacher_mmd", mmd));
    }
    Ok(rows)
}

/// Student samples with `n_steps` steps using the fixed evaluation noise.
pub fn student_samples(
    cfg: &ExperimentConfig,
    student: &NetModel<'_>,
    eval: &EvalSet,
    n_steps: usize,
) -> Result<Tensor> {
    let dim = eval.points.cols();
    let (x, _) = student_sample(
        student,
        &cfg.schedule(),
        n_steps,
        cfg.k,
        &eval.conds(),
        dim,
        &mut seeded(cfg.eval_seed, 10 + n_steps as u64),
    )?;
    Ok(x)
}

/// State of a distillation run: everything needed to continue it bit for bit.
pub struct Distiller {
    config: ExperimentConfig,
    seed: u64,
    data: Tensor,
    labels: Vec<u32>,
    sched: NoiseSchedule,
    dists: Vec<TimestepDistribution>,
    plan: PhasePlan,
    store: ParamStore,
    teacher: DenoiserNet,
    student: DenoiserNet,
    disc: Discriminator,
    adam_s: Adam,
    adam_d: Adam,
    rng: ChaCha8Rng,
    iter: u64,
    history: Vec<MetricRecord>,
    eval: EvalSet,
}

impl Distiller {
    /// Student initialised from the teacher with zero LoRA deltas; fresh discriminator head.
    pub fn new(cfg: &ExperimentConfig, teacher: &Teacher, seed: u64) -> Result<Self> {
        cfg.validate()?;
        teacher.check_compatible(cfg)?;
        let mut store = teacher.store.clone();
        for id in teacher.net.params() {
            store.set_trainable(id, false);
        }
        let mut init = seeded(seed, INIT_STREAM);
        let student = teacher.net.attach_lora(&mut store, STUDENT_PREFIX, cfg.lora_rank, &mut init)?;
        let disc = Discriminator::new(cfg.disc_config(), &teacher.net, &mut store, DISC_PREFIX, &mut init)?;
        let adam_s = Adam::new(AdamConfig::with_lr(cfg.lr_student), student.trainable_params(&store), &store);
        let adam_d = Adam::new(AdamConfig::with_lr(cfg.lr_disc), disc.params(), &store);
        let (_, data, labels) = training_set(cfg, seed)?;
        Self::assemble(cfg, seed, data, labels, store, teacher.net.clone(), student, disc, adam_s, adam_d, seeded(seed, DISTILL_STREAM), 0, Vec::new())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Distill {
            return Err(invalid("expected a distillation checkpoint"));
        }
        let cfg = &ck.config;
        let store = ck.restore_params()?;
        let ds = cfg.dataset()?;
        let teacher = DenoiserNet::bind(cfg.net_config(&ds), &store, TEACHER_PREFIX)?;
        let student = DenoiserNet::bind_student(&teacher, &store, STUDENT_PREFIX, cfg.lora_rank)?;
        let disc = Discriminator::bind(cfg.disc_config(), &teacher, &store, DISC_PREFIX)?;
        let adam_s = restore_adam(ck, STUDENT_OPT, student.trainable_params(&store), &store)?;
        let adam_d = restore_adam(ck, DISC_OPT, disc.params(), &store)?;
        let rng = ck.rng.ok_or_else(|| invalid("distillation checkpoint has no rng state"))?.restore();
        let (_, data, labels) = training_set(cfg, ck.seed)?;
        Self::assemble(cfg, ck.seed, data, labels, store, teacher, student, disc, adam_s, adam_d, rng, ck.iter, ck.history.clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: &ExperimentConfig,
        seed: u64,
        data: Tensor,
        labels: Vec<u32>,
        store: ParamStore,
        teacher: DenoiserNet,
        student: DenoiserNet,
        disc: Discriminator,
        adam_s: Adam,
        adam_d: Adam,
        rng: ChaCha8Rng,
        iter: u64,
        history: Vec<MetricRecord>,
    ) -> Result<Self> {
        let plan = cfg.phase_plan();
        let dists = (0..plan.phases.len())
            .map(|p| cfg.pi.distribution(&plan, p, cfg.k))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            seed,
            data,
            labels,
            sched: cfg.schedule(),
            dists,
            plan,
            store,
            teacher,
            student,
            disc,
            adam_s,
            adam_d,
            rng,
            iter,
            history,
            eval: EvalSet::new(cfg)?,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn teacher_net(&self) -> &DenoiserNet {
        &self.teacher
    }

    pub fn student_net(&self) -> &DenoiserNet {
        &self.student
    }

    pub fn teacher_model(&self) -> NetModel<'_> {
        NetModel::new(&self.teacher, &self.store)
    }

    pub fn student_model(&self) -> NetModel<'_> {
        NetModel::new(&self.student, &self.store)
    }

    pub fn eval_set(&self) -> &EvalSet {
        &self.eval
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Distill,
            config: self.config.clone(),
            seed: self.seed,
            iter: self.iter,
            params: Checkpoint::snapshot_params(&self.store),
            optimizers: vec![
                save_adam(STUDENT_OPT, &self.adam_s, &self.store),
                save_adam(DISC_OPT, &self.adam_d, &self.store),
            ],
            rng: Some(RngState::capture(&self.rng)),
            history: self.history.clone(),
        }
    }

    /// One iteration. Random draws happen in a fixed order: data batch, timestep
    /// index, `ε`, `ω`, the adversarial draws and the distribution-matching draws.
    /// On error the run is left at its last good state.
    pub fn step(&mut self) -> Result<StepReport> {
        let snapshot = self.rng.clone();
        match self.step_inner() {
            Ok(r) => {
                self.iter += 1;
                Ok(r)
            }
            Err(e) => {
                self.rng = snapshot;
                self.store.zero_grads();
                Err(e)
            }
        }
    }

    fn step_inner(&mut self) -> Result<StepReport> {
        let cfg = &self.config;
        let (n, k) = (cfg.batch, cfg.k);
        let phase = self.plan.phase_index(self.iter)?;
        let p = &self.plan.phases[phase];
        let weights = cfg.weights(p.lambda_adv, p.lambda_dmd)?;
        let (use_adv, use_dmd) = match cfg.losses {
            LossSet::Distill => (false, false),
            LossSet::DistillDmd => (false, true),
            LossSet::DistillAdv => (true, false),
            LossSet::All => (true, true),
        };

        let rng = &mut self.rng;
        let (z0, labels) = batch(rng, &self.data, &self.labels, n);
        let conds = classes(&labels);
        let (i, t) = self.dists[phase].sample(rng);
        let eps = standard_normal(rng, n, z0.cols())?;
        let u: f64 = rng.random();
        let omega = cfg.omega_min + u * (cfg.omega_max - cfg.omega_min);
        let spec = cfg.renoise();
        let adv_draws = AdversarialDraws::sample(rng, &spec, n, z0.cols())?;
        let dmd_draws = DmdDraws::sample(rng, &spec, n, z0.cols())?;

        let sched = &self.sched;
        let z_t = sched.forward_diffuse(&z0, t, &eps)?;
        let teacher = NetModel::new(&self.teacher, &self.store);
        let grid = cfg.rollout_grid();
        let rollout = teacher_rollout(&teacher, &z_t, i, omega, &conds, sched, k, cfg.solver, grid)?;

        let mut tape = Tape::new();
        let zv = tape.constant(z_t);
        let ts = vec![t; n];
        let x0 = self.student.x0_tape(&mut tape, &self.store, sched, zv, &ts, &conds, true)?;
        let l_distill = distill_loss(&mut tape, cfg.distill_loss, x0, &rollout.x0)?;
        let mut nfe = rollout.nfe + 1;

        let zero = tape.constant(Tensor::scalar(0.0)?);
        let (l_adv, l_dis) = if use_adv {
            let nets = LossNets {
                store: &self.store,
                teacher: &self.teacher,
                student: &self.student,
                disc: &self.disc,
                sched,
            };
            let adv = adversarial_losses(&mut tape, nets, cfg.gan, &z0, &conds, &adv_draws)?;
            nfe += adv.nfe;
            (adv.l_adv, Some(adv.l_dis))
        } else {
            (zero, None)
        };
        let l_dmd = if use_dmd {
            let student = NetModel::new(&self.student, &self.store);
            let d = dmd_surrogate(
                &mut tape,
                &student,
                &teacher,
                sched,
                x0,
                &conds,
                cfg.omega_dmd(),
                &dmd_draws,
                cfg.dmd_normalize,
            )?;
            nfe += d.nfe;
            d.loss
        } else {
            zero
        };

        let expected = 2 * (grid.times(i, k)?.len() - 1)
            + 1
            + usize::from(use_adv)
            + if use_dmd { if cfg.omega_dmd() == 1.0 { 2 } else { 3 } } else { 0 };
        if nfe != expected {
            return Err(invalid(format!("evaluation budget {nfe} differs from the expected {expected}")));
        }

        let total = total_loss(&mut tape, l_distill, l_adv, l_dmd, weights)?;
        let grads = tape.backward(total)?;
        self.store.accumulate(&grads);
        let loss_dis = match l_dis {
            Some(l) => {
                let value = tape.value(l).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { term: "discriminator", value });
                }
                let g = tape.backward(l)?;
                self.store.accumulate(&g);
                value
            }
            None => 0.0,
        };
        grads_finite(&self.store, self.adam_s.params())?;
        grads_finite(&self.store, self.adam_d.params())?;
        self.adam_s.step(&mut self.store)?;
        if use_adv {
            self.adam_d.step(&mut self.store)?;
        }
        Ok(StepReport {
            iter: self.iter,
            phase,
            lambda_adv: weights.lambda_adv,
            lambda_dmd: weights.lambda_dmd,
            omega,
            t_index: i,
            loss_distill: tape.value(l_distill).item(),
            loss_adv: tape.value(l_adv).item(),
            loss_dis,
            loss_dmd: tape.value(l_dmd).item(),
            loss_total: tape.value(total).item(),
            nfe,
        })
    }

    /// Student metrics at every evaluated step count.
    pub fn evaluate(&self) -> Result<Vec<MetricRecord>> {
        let mut rows = Vec::new();
        let student = self.student_model();
        for nfe in EVAL_NFES {
            let x = student_samples(&self.config, &student, &self.eval, nfe)?;
            let (sw, m) = self.eval.score(&self.config, &x)?;
            rows.push(rec(self.iter, nfe, "sw", sw));
            rows.push(rec(self.iter, nfe, "mmd", m));
        }
        Ok(rows)
    }

    fn log_step(&self, r: &StepReport) -> Vec<MetricRecord> {
        let it = self.iter;
        vec![
            rec(it, r.nfe, "nfe_per_iter", r.nfe as f64),
            rec(it, 0, "lambda_adv", r.lambda_adv),
            rec(it, 0, "lambda_dmd", r.lambda_dmd),
            rec(it, 0, "loss_distill", r.loss_distill),
            rec(it, 0, "loss_adv", r.loss_adv),
            rec(it, 0, "loss_dis", r.loss_dis),
            rec(it, 0, "loss_dmd", r.loss_dmd),
        ]
    }

    /// Runs until iteration `until` (capped at `config.iters`). The first call
    /// records teacher reference metrics and the untrained student; afterwards
    /// every `eval_every` iterations and the final one append evaluation rows.
    pub fn run(&mut self, until: u64, mut on_row: impl FnMut(&MetricRecord)) -> Result<()> {
        let until = until.min(self.config.iters);
        let mut emit = |hist: &mut Vec<MetricRecord>, rows: Vec<MetricRecord>| {
            for r in rows {
                on_row(&r);
                hist.push(r);
            }
        };
        if self.iter == 0 && self.history.is_empty() {
            let mut rows = teacher_reference(&self.config, &self.teacher_model(), &self.eval)?;
            rows.extend(self.evaluate()?);
            emit(&mut self.history, rows);
        }
        while self.iter < until {
            let report = self.step()?;
            let every = self.config.eval_every;
            if (every > 0 && self.iter % every == 0) || self.iter == self.config.iters {
                let mut rows = self.log_step(&report);
                rows.extend(self.evaluate()?);
                emit(&mut self.history, rows);
            }
        }
        Ok(())
    }

    /// Last logged value of `metric` at `nfe`.
    pub fn last_metric(&self, metric: &str, nfe: usize) -> Option<f64> {
        last_metric(&self.history, metric, nfe)
    }
}

pub fn last_metric(history: &[MetricRecord], metric: &str, nfe: usize) -> Option<f64> {
    history.iter().rev().find(|r| r.metric == metric && r.nfe == nfe).map(|r| r.value)
}

/// Full distillation run from a trained teacher.
pub fn distill(cfg: &ExperimentConfig, teacher: &Teacher, seed: u64) -> Result<Distiller> {
    let mut d = Distiller::new(cfg, teacher, seed)?;
    d.run(cfg.iters, |_| {})?;
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Losses,
    Pi,
    DistillLoss,
    Gan,
    K,
    Guidance,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Losses,
        AblationAxis::Pi,
        AblationAxis::DistillLoss,
        AblationAxis::Gan,
        AblationAxis::K,
        AblationAxis::Guidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Losses => "losses",
            AblationAxis::Pi => "pi",
            AblationAxis::DistillLoss => "distill_loss",
            AblationAxis::Gan => "gan",
            AblationAxis::K => "k",
            AblationAxis::Guidance => "guidance",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            invalid(format!("unknown ablation axis `{name}`; supported axes: {}", names.join(", ")))
        })
    }
}

pub const GUIDANCE_SWEEP: [f64; 7] = [1.0, 3.0, 5.0, 7.0, 10.0, 13.0, 15.0];
pub const K_SWEEP: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
    /// The sampled-guidance reference point of the guidance sweep.
    pub reference: bool,
}

/// Configurations compared along `axis`, all derived from `base`.
pub fn variants(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<Variant>> {
    use crate::losses::{DistillLossKind, GanKind};
    use crate::timesteps::PiPreset;
    let with = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { name, config, reference: false }
    };
    let out: Vec<Variant> = match axis {
        AblationAxis::Losses => [LossSet::Distill, LossSet::DistillDmd, LossSet::DistillAdv, LossSet::All]
            .into_iter()
            .map(|l| with(l.name().into(), &|c| c.losses = l))
            .collect(),
        AblationAxis::Pi => PiPreset::ALL.into_iter().map(|p| with(p.name().into(), &|c| c.pi = p)).collect(),
        AblationAxis::DistillLoss => [DistillLossKind::Mse, DistillLossKind::L1]
            .into_iter()
            .map(|d| with(d.name().into(), &|c| c.distill_loss = d))
            .collect(),
        AblationAxis::Gan => [GanKind::Hinge, GanKind::Wgan, GanKind::Lsgan]
            .into_iter()
            .map(|g| with(g.name().into(), &|c| c.gan = g))
            .collect(),
        AblationAxis::K => K_SWEEP.into_iter().map(|k| with(format!("k={k}"), &|c| c.k = k)).collect(),
        AblationAxis::Guidance => {
            let mut v: Vec<Variant> = GUIDANCE_SWEEP
                .into_iter()
                .map(|w| {
                    with(format!("omega={w}"), &|c| {
                        c.omega_min = w;
                        c.omega_max = w;
                        c.omega_dmd = Some(w);
                    })
                })
                .collect();
            v.push(Variant {
                name: format!("omega~U[{},{}]", base.omega_min, base.omega_max),
                config: base.clone(),
                reference: true,
            });
            v
        }
    };
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub config_id: String,
    pub reference: bool,
    pub nfe: usize,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs `jobs` on up to `threads` worker threads; results keep job order.
pub fn parallel_map<T: Send, F: Fn(usize) -> Result<T> + Sync>(jobs: usize, threads: usize, f: F) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs {
                    break;
                }
                let r = f(j);
                *slots[j].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

/// Final `sw` at `nfe` for every variant along `axis`, one row per variant.
/// Teachers are trained once per seed and shared by all variants.
pub fn ablate(
    base: &ExperimentConfig,
    axis: AblationAxis,
    seeds: &[u64],
    nfe: usize,
    threads: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<AblationRow>> {
    if !EVAL_NFES.contains(&nfe) {
        return Err(invalid(format!("ablation step count {nfe} not in {EVAL_NFES:?}")));
    }
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let vars = variants(base, axis)?;
    let teachers = parallel_map(seeds.len(), threads, |s| {
        progress(&format!("teacher seed {}", seeds[s]));
        Ok(train_teacher(base, seeds[s])?.0)
    })?;
    let jobs = vars.len() * seeds.len();
    let values = parallel_map(jobs, threads, |j| {
        let (v, s) = (j / seeds.len(), j % seeds.len());
        let var = &vars[v];
        // Derived from (seed, variant index) so variants are independent runs.
        let run_seed = seeds[s] ^ ((v as u64 + 1) << 32);
        progress(&format!("{} seed {}", var.name, seeds[s]));
        let d = distill(&var.config, &teachers[s], run_seed)?;
        d.last_metric("sw", nfe).ok_or_else(|| invalid("run produced no evaluation"))
    })?;
    Ok(vars
        .iter()
        .enumerate()
        .map(|(v, var)| {
            let vals = values[v * seeds.len()..(v + 1) * seeds.len()].to_vec();
            let (mean, sd) = mean_sd(&vals);
            AblationRow {
                axis: axis.name().into(),
                variant: var.name.clone(),
                config_id: config_id(&var.config),
                reference: var.reference,
                nfe,
                seeds: seeds.to_vec(),
                median: median(&vals),
                values: vals,
                mean,
                sd,
            }
        })
        .collect())
}
