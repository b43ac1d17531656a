use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flashlab_core::grad::{ParamStore, Tape, Tensor};
use flashlab_core::metrics::sliced_wasserstein;
use flashlab_core::nets::{classes, DenoiserNet, NetConfig};
use flashlab_core::sampling::{standard_normal, teacher_rollout, NetModel, RolloutGrid, SolverKind};
use flashlab_core::schedule::NoiseSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 32;

fn net(width: usize) -> (ParamStore, DenoiserNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = DenoiserNet::new(NetConfig::new(2, 8, vec![width; 3]), &mut store, "bench", &mut rng).unwrap();
    (store, net)
}

fn forward_backward(c: &mut Criterion) {
    let z = Tensor::full(&[BATCH, 2], 0.3);
    let ts = vec![0.5; BATCH];
    let cs = classes(&vec![1; BATCH]);
    let mut g = c.benchmark_group("denoiser");
    for width in [64, 128] {
        let (mut store, net) = net(width);
        g.bench_with_input(BenchmarkId::new("forward", width), &width, |b, _| {
            b.iter(|| net.forward(&store, &z, &ts, &cs).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", width), &width, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let out = net.forward_tape(&mut tape, &store, zv, &ts, &cs, true).unwrap();
                let sq = tape.square(out.eps).unwrap();
                let loss = tape.mean(sq).unwrap();
                let grads = tape.backward(loss).unwrap();
                store.accumulate(&grads);
            })
        });
    }
    g.finish();
}

fn rollout(c: &mut Criterion) {
    let (store, net) = net(64);
    let model = NetModel::new(&net, &store);
    let sched = NoiseSchedule::cosine();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = standard_normal(&mut rng, BATCH, 2).unwrap();
    let cs = classes(&vec![2; BATCH]);
    c.bench_function("teacher_rollout_k32_full", |b| {
        b.iter(|| teacher_rollout(&model, &z, 32, 2.5, &cs, &sched, 32, SolverKind::Ddim, RolloutGrid::Full).unwrap())
    });
}

fn sliced(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = standard_normal(&mut rng, 2000, 2).unwrap();
    let y = standard_normal(&mut rng, 2000, 2).unwrap();
    c.bench_function("sliced_wasserstein_2000x128", |b| {
        b.iter(|| sliced_wasserstein(&x, &y, 128, &mut ChaCha8Rng::seed_from_u64(3)).unwrap())
    });
}

criterion_group!(benches, forward_backward, rollout, sliced);
criterion_main!(benches);
