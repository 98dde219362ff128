use std::hint::black_box;

use apl_bench::fixture;
use apl_core::SamplingConfig;
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_policy(c: &mut Criterion) {
    let f = fixture();
    let prompt = f.task.pool[0].clone();
    let completion = f.task.corpus[0].clone();
    let mut g = c.benchmark_group("policy");
    g.bench_function("logprob", |b| b.iter(|| f.theta0.logprob(black_box(&prompt), black_box(&completion)).unwrap()));
    g.bench_function("grad_logprob", |b| {
        b.iter(|| f.theta0.grad_logprob(black_box(&prompt), black_box(&completion)).unwrap())
    });
    let mut seed = 0;
    g.bench_function("sample_8", |b| {
        b.iter(|| {
            seed += 1;
            let cfg = SamplingConfig { temperature: 0.7, max_tokens: 8, seed };
            f.theta0.sample(black_box(&prompt), &cfg).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_policy);
criterion_main!(benches);
