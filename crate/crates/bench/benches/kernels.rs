use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deepdp::nn::{FeedforwardNet, ForwardCache};
use deepdp::semilinear::dbdp1_loss;
use deepdp::sim::{path_rng, simulate_paths};
use deepdp::{build_problem, Activation, ProblemInstance, ProblemParams, TimeGrid};

fn net_passes(c: &mut Criterion) {
    let d = 3;
    let net = FeedforwardNet::glorot(d, 1, &[d + 10, d + 10], Activation::Tanh, &mut path_rng(1, 0)).unwrap();
    let mut cache = ForwardCache::new(&net);
    let mut grad = vec![0.0; net.num_params()];
    let mut gx = vec![0.0; d];
    let x = [0.3, -0.2, 1.1];
    c.bench_function("net forward d=3", |b| b.iter(|| black_box(net.forward(black_box(&x), &mut cache)[0])));
    c.bench_function("net forward+backward d=3", |b| {
        b.iter(|| {
            net.forward(black_box(&x), &mut cache);
            net.backward(&mut cache, &[1.0], Some(&mut grad), Some(&mut gx));
            black_box(grad[0])
        })
    });
}

fn simulation(c: &mut Criterion) {
    let ProblemInstance::Pde(p) = build_problem("cva", &ProblemParams { dim: Some(3), ..Default::default() }).unwrap() else {
        unreachable!()
    };
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    c.bench_function("simulate 1000 paths d=3 N=20", |b| {
        b.iter(|| simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 1000, black_box(7)).unwrap())
    });
    let paths = simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 1000, 7).unwrap();
    let u = FeedforwardNet::glorot(3, 1, &[13, 13], Activation::Tanh, &mut path_rng(2, 0)).unwrap();
    let z = FeedforwardNet::glorot(3, 3, &[13, 13], Activation::Tanh, &mut path_rng(3, 0)).unwrap();
    c.bench_function("dbdp1 loss 1000 paths d=3", |b| {
        b.iter(|| dbdp1_loss(&p, &grid, 10, &u, &z, Some(&u), &paths).unwrap())
    });
}

criterion_group!(benches, net_passes, simulation);
criterion_main!(benches);
