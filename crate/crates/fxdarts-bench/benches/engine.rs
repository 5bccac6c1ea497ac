//! Benchmarks for the hot paths of a search step: the convolution
//! kernels, a full super-network forward/backward, and the in-loop
//! discretization sweep.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use fxdarts::autodiff::{Tape, Tensor};
use fxdarts::discretize::dynamic_discretize;
use fxdarts::supernet::{init_supernet, NetDims, SuperNetwork};
use fxdarts::SpaceId;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[8, 16, 16, 16], &mut rng);
    let w = random_tensor(&[16, 16, 3, 3], &mut rng);

    c.bench_function("conv2d_forward_16c_16x16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.leaf(w.clone(), true);
            black_box(tape.conv2d(xi, wi, 1, 1, 1, 1).unwrap());
        })
    });

    c.bench_function("conv2d_forward_backward_16c_16x16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone(), true);
            let wi = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xi, wi, 1, 1, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wi)[0]);
        })
    });
}

fn tiny_supernet() -> SuperNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    init_supernet(
        NetDims {
            cells: 4,
            nodes: 5,
            channels: 8,
            in_channels: 3,
            input_hw: 8,
            classes: 4,
        },
        SpaceId::O2,
        &mut rng,
    )
    .unwrap()
}

fn bench_supernet_step(c: &mut Criterion) {
    let net = tiny_supernet();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_tensor(&[16, 3, 8, 8], &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();

    c.bench_function("supernet_forward_L4N5_O2", |b| {
        b.iter(|| {
            let pass = net.forward(&batch).unwrap();
            black_box(pass.tape.value(pass.logits).data[0]);
        })
    });

    c.bench_function("supernet_forward_backward_L4N5_O2", |b| {
        b.iter(|| {
            let mut pass = net.forward(&batch).unwrap();
            let ce = pass.tape.cross_entropy(pass.logits, &labels).unwrap();
            pass.tape.backward(ce).unwrap();
            black_box(pass.tape.grad(pass.alpha_ids[0][0])[0]);
        })
    });
}

fn bench_discretize(c: &mut Criterion) {
    c.bench_function("dynamic_discretize_L4N5_O2", |b| {
        b.iter_with_setup(tiny_supernet, |mut net| {
            black_box(dynamic_discretize(&mut net, 0.02));
        })
    });
}

criterion_group!(benches, bench_conv2d, bench_supernet_step, bench_discretize);
criterion_main!(benches);
