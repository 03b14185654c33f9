use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_bigint::BigUint;
use ppml_bench::{keypair, rng};
use ppml_core::paillier::random_below;

fn paillier(c: &mut Criterion) {
    let mut group = c.benchmark_group("paillier");
    for bits in [256u32, 1024] {
        let (pk, sk) = keypair(bits);
        let mut r = rng(1);
        let m = random_below(pk.n(), &mut r);
        let ct = pk.encrypt(&m, &mut r).unwrap();
        let small = BigUint::from(123_457u32);
        let large = pk.n() - 3u32;

        group.bench_with_input(BenchmarkId::new("encrypt", bits), &bits, |b, _| {
            b.iter(|| pk.encrypt(&m, &mut r).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decrypt", bits), &bits, |b, _| {
            b.iter(|| sk.decrypt(&ct).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("add", bits), &bits, |b, _| {
            b.iter(|| pk.add(&ct, &ct).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("scalar_mul_small", bits), &bits, |b, _| {
            b.iter(|| pk.scalar_mul(&ct, &small).unwrap())
        });
        group.bench_with_input(
            BenchmarkId::new("scalar_mul_negative", bits),
            &bits,
            |b, _| b.iter(|| pk.scalar_mul(&ct, &large).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, paillier);
criterion_main!(benches);
