use flashlab_core::data::{DatasetKind, GaussianOracle, ToyDataset};
use flashlab_core::grad::{finite_diff_grad, max_relative_error, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor};
use flashlab_core::losses::{
    adversarial_losses, discriminator_loss, distill_loss, dmd_surrogate, AdversarialDraws, DistillLossKind, DmdDraws,
    GanKind, LossNets, RenoiseSpec,
};
use flashlab_core::nets::{classes, Cond, DenoiserNet, DiscConfig, Discriminator, NetConfig};
use flashlab_core::sampling::{standard_normal, NetModel, OracleModel};
use flashlab_core::schedule::NoiseSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config() -> NetConfig {
    NetConfig {
        data_dim: 2,
        n_classes: 4,
        hidden: vec![12, 10],
        time_dim: 8,
        cond_dim: 4,
    }
}

struct Setup {
    store: ParamStore,
    teacher: DenoiserNet,
    student: DenoiserNet,
    disc: Discriminator,
    rng: ChaCha8Rng,
}

fn setup(seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let teacher = DenoiserNet::build(config(), &mut store, "teacher", &mut rng, false).unwrap();
    let student = teacher.attach_lora(&mut store, "student", 3, &mut rng).unwrap();
    let disc_cfg = DiscConfig {
        hidden: vec![8],
        feature_depth: 2,
        use_cond: true,
    };
    let disc = Discriminator::new(disc_cfg, &teacher, &mut store, "disc", &mut rng).unwrap();
    Setup {
        store,
        teacher,
        student,
        disc,
        rng,
    }
}

fn perturb(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                scale * v
            })
            .collect();
        store.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

fn adapter_ids(net: &DenoiserNet) -> Vec<ParamId> {
    net.adapters().iter().flat_map(|a| [a.a, a.b]).collect()
}

#[test]
fn adversarial_terms_respect_the_detachment_contract() {
    let mut s = setup(1);
    perturb(&mut s.store, &adapter_ids(&s.student), &mut s.rng, 0.2);
    perturb(&mut s.store, &s.disc.params(), &mut s.rng, 0.3);
    let sched = NoiseSchedule::cosine();
    let z0 = standard_normal(&mut s.rng, 6, 2).unwrap();
    let conds = classes(&[0, 1, 2, 3, 0, 1]);
    for kind in GanKind::ALL {
        let draws = AdversarialDraws::sample(&mut s.rng, &RenoiseSpec::default(), 6, 2).unwrap();
        let mut tape = Tape::new();
        let nets = LossNets {
            store: &s.store,
            teacher: &s.teacher,
            student: &s.student,
            disc: &s.disc,
            sched: &sched,
        };
        let out = adversarial_losses(&mut tape, nets, kind, &z0, &conds, &draws).unwrap();
        assert_eq!(out.nfe, 1);

        let g_adv = tape.backward(out.l_adv).unwrap();
        let g_dis = tape.backward(out.l_dis).unwrap();
        for id in s.disc.params() {
            assert!(g_adv.param(id).is_none(), "{kind:?}: generator loss reached {}", s.store.name(id));
            assert!(g_dis.param(id).is_some());
        }
        for id in s.student.trainable_params(&s.store) {
            assert!(g_dis.param(id).is_none(), "{kind:?}: discriminator loss reached {}", s.store.name(id));
        }
        assert!(s.student.trainable_params(&s.store).iter().any(|&id| g_adv.param(id).is_some_and(|g| g.max_abs() > 0.0)));
        for id in s.teacher.params() {
            assert!(g_adv.param(id).is_none() && g_dis.param(id).is_none());
        }
    }
}

#[test]
fn adversarial_losses_reject_an_empty_batch() {
    let s = setup(2);
    let spec = RenoiseSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(AdversarialDraws::sample(&mut rng, &spec, 0, 2).is_err());
    let sched = NoiseSchedule::cosine();
    let draws = AdversarialDraws::sample(&mut rng, &spec, 2, 2).unwrap();
    let nets = LossNets {
        store: &s.store,
        teacher: &s.teacher,
        student: &s.student,
        disc: &s.disc,
        sched: &sched,
    };
    let mut tape = Tape::new();
    let z0 = Tensor::zeros(&[3, 2]);
    assert!(adversarial_losses(&mut tape, nets, GanKind::Lsgan, &z0, &classes(&[0, 1, 2]), &draws).is_err());
}

#[test]
fn distill_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut s = setup(10 + seed);
        perturb(&mut s.store, &adapter_ids(&s.student), &mut s.rng, 0.2);
        let sched = NoiseSchedule::cosine();
        let z = standard_normal(&mut s.rng, 5, 2).unwrap();
        let target = standard_normal(&mut s.rng, 5, 2).unwrap();
        let ts = [0.1, 0.3, 0.5, 0.8, 0.95];
        let conds = classes(&[0, 1, 2, 3, 1]);
        let loss = |store: &ParamStore, tape: &mut Tape| {
            let zv = tape.constant(z.clone());
            let x0 = s.student.x0_tape(tape, store, &sched, zv, &ts, &conds, true)?;
            distill_loss(tape, DistillLossKind::Mse, x0, &target)
        };
        let mut tape = Tape::new();
        let l = loss(&s.store, &mut tape).unwrap();
        let grads = tape.backward(l).unwrap();
        let ids = s.student.trainable_params(&s.store);
        let num = finite_diff_grad(
            |st| {
                let mut t = Tape::new();
                let v = loss(st, &mut t)?;
                Ok(t.value(v).item())
            },
            &mut s.store,
            &ids,
            1e-6,
        )
        .unwrap();
        for (id, n) in ids.iter().zip(&num) {
            let a = grads.param(*id).unwrap();
            assert!(max_relative_error(&a, n, 1e-6) < 1e-4, "{}", s.store.name(*id));
        }
    }
}

#[test]
fn dmd_vanishes_exactly_when_student_equals_teacher() {
    let mut s = setup(3);
    let sched = NoiseSchedule::cosine();
    let spec = RenoiseSpec::default();
    for _ in 0..10 {
        let z = standard_normal(&mut s.rng, 8, 2).unwrap();
        let conds = classes(&[0, 1, 2, 3, 3, 2, 1, 0]);
        let ts = vec![1.0; 8];
        let draws = DmdDraws::sample(&mut s.rng, &spec, 8, 2).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let x0 = s.student.x0_tape(&mut tape, &s.store, &sched, zv, &ts, &conds, true).unwrap();
        let student = NetModel::new(&s.student, &s.store);
        let teacher = NetModel::new(&s.teacher, &s.store);
        for normalize in [false, true] {
            let out = dmd_surrogate(&mut tape, &student, &teacher, &sched, x0, &conds, 1.0, &draws, normalize).unwrap();
            assert_eq!(out.delta.max_abs(), 0.0);
            assert_eq!(out.nfe, 2);
            let g = tape.backward(out.loss).unwrap();
            let norm: f64 = g.param_grads().map(|(_, t)| t.norm().powi(2)).sum();
            assert_eq!(norm, 0.0);
        }
    }
}

#[test]
fn dmd_gradient_is_delta_over_batch() {
    let mut s = setup(4);
    perturb(&mut s.store, &adapter_ids(&s.student), &mut s.rng, 0.3);
    let sched = NoiseSchedule::cosine();
    let x0 = standard_normal(&mut s.rng, 5, 2).unwrap();
    let conds = [Cond::Class(1), Cond::Class(0), Cond::Null, Cond::Class(3), Cond::Class(2)];
    let draws = DmdDraws::sample(&mut s.rng, &RenoiseSpec::default(), 5, 2).unwrap();
    assert!(draws.t_dd.iter().all(|&t| (0.02..=1.0).contains(&t)));
    let student = NetModel::new(&s.student, &s.store);
    let teacher = NetModel::new(&s.teacher, &s.store);
    for normalize in [false, true] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let out = dmd_surrogate(&mut tape, &student, &teacher, &sched, xv, &conds, 2.5, &draws, normalize).unwrap();
        assert_eq!(out.nfe, 3);
        assert!(out.delta.max_abs() > 0.0);
        let g = tape.backward(out.loss).unwrap();
        let want = out.delta.scale(1.0 / 5.0).unwrap();
        assert!(g.wrt(xv).unwrap().max_abs_diff(&want) <= 1e-12);
        if normalize {
            for r in 0..5 {
                let m: f64 = out.delta.row(r).iter().map(|v| v.abs()).sum::<f64>() / 2.0;
                assert!((m - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn dmd_pushes_an_overdispersed_student_inward() {
    // Student law N(0, 2) against teacher law N(0, 1), both with exact scores.
    let sched = NoiseSchedule::cosine();
    let student = OracleModel {
        oracle: GaussianOracle::new(vec![0.0], vec![vec![2.0]]).unwrap(),
        sched,
    };
    let teacher = OracleModel {
        oracle: GaussianOracle::new(vec![0.0], vec![vec![1.0]]).unwrap(),
        sched,
    };
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = standard_normal(&mut rng, n, 1).unwrap().scale(2f64.sqrt()).unwrap();
    let draws = DmdDraws::sample(&mut rng, &RenoiseSpec::default(), n, 1).unwrap();
    let conds = vec![Cond::Null; n];
    let mut tape = Tape::new();
    let xv = tape.leaf(x0.clone());
    let out = dmd_surrogate(&mut tape, &student, &teacher, &sched, xv, &conds, 1.0, &draws, false).unwrap();
    let y = sched.forward_diffuse_rows(&x0, &draws.t_dd, &draws.eps).unwrap();
    let mut agree = 0usize;
    let mut pull = 0.0;
    for r in 0..n {
        let (d, yv, xv) = (out.delta.data()[r], y.data()[r], x0.data()[r]);
        // Δ = y·(1/(α²+σ²) − 1/(2α²+σ²)) has the sign of y.
        if d * yv >= 0.0 {
            agree += 1;
        }
        pull += d * xv;
    }
    assert_eq!(agree, n);
    // Descent along −Δ shrinks |x̃0| on average.
    let mean_pull = pull / n as f64;
    let g = tape.backward(out.loss).unwrap();
    let step = x0.sub(&g.wrt(xv).unwrap().scale(1e-2 * n as f64).unwrap()).unwrap();
    assert!(mean_pull > 0.0);
    assert!(step.norm() < x0.norm());
}

#[test]
fn discriminator_learns_to_separate_reals_from_fakes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let ds = ToyDataset::new(DatasetKind::Gaussians8).unwrap();
    let cfg = NetConfig {
        data_dim: 2,
        n_classes: 8,
        hidden: vec![32, 32],
        time_dim: 16,
        cond_dim: 8,
    };
    let teacher = DenoiserNet::build(cfg, &mut store, "teacher", &mut rng, false).unwrap();
    for id in teacher.params() {
        store.set_trainable(id, false);
    }
    let disc_cfg = DiscConfig {
        hidden: vec![32, 32],
        ..DiscConfig::default()
    };
    let disc = Discriminator::new(disc_cfg, &teacher, &mut store, "disc", &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(3e-3), disc.params(), &store);
    let sched = NoiseSchedule::cosine();
    let mut last = Vec::new();
    for step in 0..200 {
        let (real0, labels) = ds.sample(&mut rng, 64).unwrap();
        // fakes: the right class drawn at half the radius
        let fake0 = ds.sample_given(&mut rng, &labels).unwrap().scale(0.5).unwrap();
        let conds = classes(&labels);
        let ts = vec![0.25; 64];
        let e1 = standard_normal(&mut rng, 64, 2).unwrap();
        let e2 = standard_normal(&mut rng, 64, 2).unwrap();
        let mut tape = Tape::new();
        let real = tape.constant(sched.forward_diffuse_rows(&real0, &ts, &e1).unwrap());
        let fake = tape.constant(sched.forward_diffuse_rows(&fake0, &ts, &e2).unwrap());
        let dr = disc.forward_tape(&mut tape, &store, &teacher, real, &ts, &conds, true).unwrap();
        let df = disc.forward_tape(&mut tape, &store, &teacher, fake, &ts, &conds, true).unwrap();
        let l = discriminator_loss(&mut tape, GanKind::Lsgan, dr, df).unwrap();
        if step == 0 {
            assert_eq!(tape.value(l).item(), 0.5);
        }
        if step >= 180 {
            last.push(tape.value(l).item());
        }
        let g = tape.backward(l).unwrap();
        store.accumulate(&g);
        adam.step(&mut store).unwrap();
    }
    let avg = last.iter().sum::<f64>() / last.len() as f64;
    assert!(avg < 0.2, "discriminator loss stayed at {avg}");
}
