use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vecmap_bench::{random_tensor, rng};
use vecmap_core::decoder::{build_instance_mask, DecoderLayer, MaskMode, Placement};
use vecmap_core::numcore::{attention, attention_backward, matmul, ParamStore};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let mut r = rng(1);
        let (a, b) = (random_tensor(n, n, &mut r), random_tensor(n, n, &mut r));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    // 96 queries against 200 BEV tokens, d = 64
    let mut r = rng(2);
    let q = random_tensor(96, 64, &mut r);
    let k = random_tensor(200, 64, &mut r);
    let v = random_tensor(200, 64, &mut r);
    let dy = random_tensor(96, 64, &mut r);
    c.bench_function("attention/forward", |b| {
        b.iter(|| attention(black_box(&q), &k, &v, None).unwrap())
    });
    let (_, cache) = attention(&q, &k, &v, None).unwrap();
    c.bench_function("attention/backward", |b| {
        b.iter(|| attention_backward(black_box(&cache), &dy).unwrap())
    });
}

fn bench_decoder_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("decoder_layer");
    for mode in MaskMode::ALL {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::init("dec", 32, mode, Placement::AfterCross, &mut store, &mut r);
        let layout: Vec<usize> = (0..96).map(|j| j / 8).collect();
        let mask = build_instance_mask(&layout, 0.1, &mut r, true);
        let x = random_tensor(96, 32, &mut r);
        let bev = random_tensor(50, 32, &mut r);
        let dy = random_tensor(96, 32, &mut r);
        g.bench_function(mode.name(), |b| {
            b.iter(|| {
                let (_, cache) = layer.forward(&store, &x, &bev, &bev, &mask).unwrap();
                layer.backward(&mut store, &cache, &dy).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_decoder_layer);
criterion_main!(benches);
