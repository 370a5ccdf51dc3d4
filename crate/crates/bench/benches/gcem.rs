use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cafpn::gcem::{dcn_v2, gcem_forward, predict_offsets_mask};
use cafpn_bench::gcem_inputs;

fn gcem(c: &mut Criterion) {
    let mut group = c.benchmark_group("gcem");
    group.sample_size(10);
    for size in [4usize, 8, 16] {
        let (x, config, params) = gcem_inputs(64, size, 0).expect("inputs");
        group.bench_with_input(BenchmarkId::new("forward", size), &size, |b, _| {
            b.iter(|| gcem_forward(&x, &config, &params).expect("forward"))
        });
        let block = &params.blocks[0];
        let compressed = cafpn::ops::conv2d(&x, &block.compress).expect("compress");
        let (offsets, mask) = predict_offsets_mask(&compressed, &block.dcn).expect("predict");
        group.bench_with_input(BenchmarkId::new("dcn_v2", size), &size, |b, _| {
            b.iter(|| dcn_v2(&compressed, &block.dcn, &offsets, &mask).expect("dcn"))
        });
    }
    group.finish();
}

criterion_group!(benches, gcem);
criterion_main!(benches);
