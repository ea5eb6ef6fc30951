//! Compares the data-parallel integer kernels against their sequential
//! fallbacks. Build with `--no-default-features` to measure the
//! sequential path as the library default instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ditto_core::diffengine::{diff_linear, temporal_diff};
use ditto_core::kernel::{matmul_i32, matmul_i32_seq};
use ditto_core::qtensor::{direct_linear, LinearSpec, QuantScale, QuantTensor};
use ditto_core::rng::SplitMix64;

fn random_qt(dims: Vec<usize>, seed: u64) -> QuantTensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = dims.iter().product();
    let values: Vec<i8> = (0..n).map(|_| rng.uniform(-100.0, 100.0) as i8).collect();
    QuantTensor::new(dims, values, QuantScale::new(0.01).unwrap()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_i32");
    for &size in &[32usize, 96, 192] {
        let mut rng = SplitMix64::new(size as u64);
        let a: Vec<i32> = (0..size * size)
            .map(|_| rng.uniform(-127.0, 127.0) as i32)
            .collect();
        let b: Vec<i32> = (0..size * size)
            .map(|_| rng.uniform(-127.0, 127.0) as i32)
            .collect();
        group.bench_with_input(BenchmarkId::new("parallel", size), &size, |bench, &s| {
            bench.iter(|| matmul_i32(&a, &b, s, s, s));
        });
        group.bench_with_input(BenchmarkId::new("sequential", size), &size, |bench, &s| {
            bench.iter(|| matmul_i32_seq(&a, &b, s, s, s));
        });
    }
    group.finish();
}

fn bench_diff_linear(c: &mut Criterion) {
    let (m, k, n) = (64, 64, 64);
    let spec = LinearSpec::Matmul { m, k, n };
    let w = random_qt(vec![k, n], 1);
    let prev = random_qt(vec![m, k], 2);
    let mut cur = prev.clone();
    // perturb a quarter of the input so the diff stream is sparse
    let mut rng = SplitMix64::new(3);
    for v in cur.values.iter_mut().step_by(4) {
        *v = v.saturating_add(rng.uniform(-10.0, 10.0) as i8);
    }
    let prev_out = direct_linear(&prev, &w, &spec).unwrap();
    let d = temporal_diff(&cur, &prev).unwrap();
    c.bench_function("diff_linear_sparse_64", |bench| {
        bench.iter(|| diff_linear(&d, &w, &prev_out, &spec).unwrap());
    });
    c.bench_function("direct_linear_64", |bench| {
        bench.iter(|| direct_linear(&cur, &w, &spec).unwrap());
    });
}

criterion_group!(benches, bench_matmul, bench_diff_linear);
criterion_main!(benches);
