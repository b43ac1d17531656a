use flashlab_core::grad::{finite_diff_grad, finite_diff_input, max_relative_error, ParamId, ParamStore, Tape, Tensor};
use flashlab_core::nets::{classes, Cond, DenoiserNet, DiscConfig, Discriminator, NetConfig};
use flashlab_core::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_config() -> NetConfig {
    NetConfig {
        data_dim: 2,
        n_classes: 3,
        hidden: vec![8, 6],
        time_dim: 8,
        cond_dim: 4,
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<f64>, Vec<Cond>) {
    let z = randn(rng, n, 2);
    let ts = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut conds = classes(&(0..n as u32).map(|i| i % 3).collect::<Vec<_>>());
    conds[0] = Cond::Null;
    (z, ts, conds)
}

/// Fills every listed parameter with fresh noise so no gradient path is trivially zero.
fn randomise(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| { let v: f64 = StandardNormal.sample(rng); scale * v }).collect();
        store.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

fn teacher_and_student(seed: u64, rank: usize) -> (ParamStore, DenoiserNet, DenoiserNet, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let teacher = DenoiserNet::build(small_config(), &mut store, "teacher", &mut rng, false).unwrap();
    let student = teacher.attach_lora(&mut store, "student", rank, &mut rng).unwrap();
    (store, teacher, student, rng)
}

#[test]
fn fresh_network_predicts_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = DenoiserNet::new(small_config(), &mut store, "n", &mut rng).unwrap();
    let (z, ts, conds) = batch(&mut rng, 5);
    assert_eq!(net.forward(&store, &z, &ts, &conds).unwrap().max_abs(), 0.0);
}

#[test]
fn student_matches_teacher_exactly_at_init() {
    let (store, teacher, student, mut rng) = teacher_and_student(1, 2);
    let (z, ts, conds) = batch(&mut rng, 7);
    let a = teacher.forward(&store, &z, &ts, &conds).unwrap();
    let b = student.forward(&store, &z, &ts, &conds).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn merged_weights_match_adapter_path() {
    for seed in 0..10 {
        let (mut store, _teacher, student, mut rng) = teacher_and_student(100 + seed, 1 + seed as usize % 6);
        let ad_ids: Vec<ParamId> = student.adapters().iter().flat_map(|a| [a.a, a.b]).collect();
        randomise(&mut store, &ad_ids, &mut rng, 0.3);
        let merged = student.merged(&mut store, &format!("merged{seed}")).unwrap();
        let (z, ts, conds) = batch(&mut rng, 9);
        let a = student.forward(&store, &z, &ts, &conds).unwrap();
        let b = merged.forward(&store, &z, &ts, &conds).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10, "seed {seed}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn student_trains_far_fewer_parameters() {
    let (store, teacher, student, _) = teacher_and_student(2, 2);
    let t = store.num_elements(&teacher.params());
    let s = store.num_elements(&student.trainable_params(&store));
    assert!(s < t, "{s} vs {t}");
    assert!(teacher.trainable_params(&store).is_empty());
}

#[test]
fn rank_outside_range_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let teacher = DenoiserNet::new(small_config(), &mut store, "t", &mut rng).unwrap();
    assert!(teacher.attach_lora(&mut store, "s0", 0, &mut rng).is_err());
    assert!(teacher.attach_lora(&mut store, "s9", 7, &mut rng).is_err());
    let s6 = teacher.attach_lora(&mut store, "s6", 6, &mut rng).unwrap();
    // the 2-wide output end is capped at full rank
    assert_eq!(store.value(s6.adapters()[2].a).shape(), &[2, 6]);
}

#[test]
fn rebinding_reproduces_the_same_networks() {
    let (mut store, teacher, student, mut rng) = teacher_and_student(4, 2);
    let ad_ids: Vec<ParamId> = student.adapters().iter().flat_map(|a| [a.a, a.b]).collect();
    randomise(&mut store, &ad_ids, &mut rng, 0.2);
    let t2 = DenoiserNet::bind(small_config(), &store, "teacher").unwrap();
    let s2 = DenoiserNet::bind_student(&t2, &store, "student", 2).unwrap();
    let (z, ts, conds) = batch(&mut rng, 4);
    assert_eq!(
        teacher.forward(&store, &z, &ts, &conds).unwrap().data(),
        t2.forward(&store, &z, &ts, &conds).unwrap().data()
    );
    assert_eq!(
        student.forward(&store, &z, &ts, &conds).unwrap().data(),
        s2.forward(&store, &z, &ts, &conds).unwrap().data()
    );
    assert!(DenoiserNet::bind_student(&t2, &store, "student", 3).is_err());
    assert!(DenoiserNet::bind_student(&t2, &store, "student", 1).is_err());
    assert!(DenoiserNet::bind(small_config(), &store, "nobody").is_err());
}

fn check_param_grads(store: &mut ParamStore, ids: &[ParamId], loss: impl Fn(&ParamStore, &mut Tape) -> flashlab_core::Result<flashlab_core::grad::Var>) {
    let mut tape = Tape::new();
    let l = loss(store, &mut tape).unwrap();
    let grads = tape.backward(l).unwrap();
    let numeric = finite_diff_grad(
        |s| {
            let mut t = Tape::new();
            let v = loss(s, &mut t)?;
            Ok(t.value(v).item())
        },
        store,
        ids,
        1e-6,
    )
    .unwrap();
    for (id, num) in ids.iter().zip(&numeric) {
        let ana = grads.param(*id).unwrap_or_else(|| Tensor::zeros(num.shape()));
        let err = max_relative_error(&ana, num, 1e-6);
        assert!(err < 1e-5, "{}: relative error {err}", store.name(*id));
    }
}

#[test]
fn teacher_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let net = DenoiserNet::build(small_config(), &mut store, "t", &mut rng, false).unwrap();
    let (z, ts, conds) = batch(&mut rng, 4);
    let ids = net.params();
    check_param_grads(&mut store, &ids, |s, tape| {
        let zv = tape.constant(z.clone());
        let out = net.forward_tape(tape, s, zv, &ts, &conds, true)?;
        let sq = tape.square(out.eps)?;
        tape.mean(sq)
    });
}

#[test]
fn student_gradients_reach_only_adapters_and_class_table() {
    let (mut store, teacher, student, mut rng) = teacher_and_student(6, 2);
    let ad_ids: Vec<ParamId> = student.adapters().iter().flat_map(|a| [a.a, a.b]).collect();
    randomise(&mut store, &ad_ids, &mut rng, 0.3);
    let sched = NoiseSchedule::cosine();
    let (z, ts, conds) = batch(&mut rng, 4);
    let target = randn(&mut rng, 4, 2);
    let loss = |s: &ParamStore, tape: &mut Tape| {
        let zv = tape.constant(z.clone());
        let x0 = student.x0_tape(tape, s, &sched, zv, &ts, &conds, true)?;
        let tv = tape.constant(target.clone());
        let d = tape.sub(x0, tv)?;
        let sq = tape.square(d)?;
        tape.mean(sq)
    };
    let trainable = student.trainable_params(&store);
    assert_eq!(trainable.len(), 1 + ad_ids.len());
    check_param_grads(&mut store, &trainable, loss);

    let mut tape = Tape::new();
    let l = loss(&store, &mut tape).unwrap();
    let grads = tape.backward(l).unwrap();
    for id in teacher.params() {
        assert!(grads.param(id).is_none(), "{} received a gradient", store.name(id));
    }
}

#[test]
fn input_gradient_of_clean_prediction() {
    let (store, _teacher, student, mut rng) = teacher_and_student(7, 2);
    let sched = NoiseSchedule::cosine();
    let (z, ts, conds) = batch(&mut rng, 3);
    let f = |x: &Tensor| -> flashlab_core::Result<f64> { Ok(student.x0(&store, &sched, x, &ts, &conds)?.sum()) };
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let x0 = student.x0_tape(&mut tape, &store, &sched, zv, &ts, &conds, false).unwrap();
    let s = tape.sum(x0).unwrap();
    let g = tape.backward(s).unwrap();
    let num = finite_diff_input(f, &z, 1e-6).unwrap();
    assert!(max_relative_error(g.wrt(zv).unwrap(), &num, 1e-6) < 1e-6);
}

#[test]
fn clean_prediction_rejects_zero_time() {
    let (store, _teacher, student, mut rng) = teacher_and_student(8, 2);
    let z = randn(&mut rng, 1, 2);
    let sched = NoiseSchedule::cosine();
    assert!(student.x0(&store, &sched, &z, &[0.0], &[Cond::Class(0)]).is_err());
    assert!(student.x0(&store, &sched, &z, &[1.0], &[Cond::Class(0)]).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn discriminator_gradients_skip_the_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let teacher = DenoiserNet::build(small_config(), &mut store, "t", &mut rng, false).unwrap();
    let _student = teacher.attach_lora(&mut store, "s", 2, &mut rng).unwrap();
    let cfg = DiscConfig {
        hidden: vec![5],
        feature_depth: 2,
        use_cond: true,
    };
    let disc = Discriminator::new(cfg.clone(), &teacher, &mut store, "d", &mut rng).unwrap();
    randomise(&mut store, &disc.params(), &mut rng, 0.5);
    assert_eq!(disc.params().len(), 1 + 4);
    let (z, ts, conds) = batch(&mut rng, 4);

    let loss = |s: &ParamStore, tape: &mut Tape| {
        let zv = tape.constant(z.clone());
        let score = disc.forward_tape(tape, s, &teacher, zv, &ts, &conds, true)?;
        let sq = tape.square(score)?;
        tape.mean(sq)
    };
    check_param_grads(&mut store, &disc.params(), loss);

    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let score = disc.forward_tape(&mut tape, &store, &teacher, zv, &ts, &conds, true).unwrap();
    let total = tape.sum(score).unwrap();
    let g = tape.backward(total).unwrap();
    for id in teacher.params() {
        assert!(g.param(id).is_none());
    }
    assert!(g.wrt(zv).unwrap().max_abs() > 0.0, "input gradient must flow through teacher features");

    let rebound = Discriminator::bind(cfg, &teacher, &store, "d").unwrap();
    assert_eq!(
        disc.forward(&store, &teacher, &z, &ts, &conds).unwrap().data(),
        rebound.forward(&store, &teacher, &z, &ts, &conds).unwrap().data()
    );
}

#[test]
fn discriminator_starts_neutral_and_checks_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let teacher = DenoiserNet::new(small_config(), &mut store, "t", &mut rng).unwrap();
    let disc = Discriminator::new(DiscConfig::default(), &teacher, &mut store, "d", &mut rng).unwrap();
    let (z, ts, conds) = batch(&mut rng, 3);
    assert_eq!(disc.forward(&store, &teacher, &z, &ts, &conds).unwrap().shape(), &[3, 1]);
    assert_eq!(disc.forward(&store, &teacher, &z, &ts, &conds).unwrap().max_abs(), 0.0);
    let deep = DiscConfig {
        feature_depth: 3,
        ..DiscConfig::default()
    };
    assert!(Discriminator::new(deep, &teacher, &mut store, "d2", &mut rng).is_err());
}

#[test]
fn forward_is_deterministic_per_seed() {
    let build = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = DenoiserNet::build(small_config(), &mut store, "t", &mut rng, false).unwrap();
        let (z, ts, conds) = batch(&mut rng, 3);
        net.forward(&store, &z, &ts, &conds).unwrap()
    };
    assert_eq!(build(11).data(), build(11).data());
    assert_ne!(build(11).data(), build(12).data());
}
