use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lipcast_bench::matrix;
use lipcast_core::backbone::SelfAttention;
use lipcast_core::numcore::{init, rng_for};
use lipcast_core::{Graph, ParamStore};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256, 512] {
        let (a, b) = (matrix(n, n, 0), matrix(n, n, 1));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b).expect("square matmul")));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("self_attention");
    let width = 512;
    for tokens in [15usize, 30, 60] {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng_for(3, 0), "attn", width, 4).expect("attention");
        let x = init::normal(&mut rng_for(3, 1), &[7, tokens, width], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &tokens, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::inference();
                let xv = g.constant(x.clone());
                let y = attn.forward(&mut g, &store, xv).expect("attention forward");
                g.value(y).numel()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
