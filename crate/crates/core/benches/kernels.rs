use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vil_core::mlstm::{self, GateInputs, KernelMode, QkvSequence};

fn instance(len: usize, d: usize) -> (QkvSequence<f32>, GateInputs<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let q = draw(len * d);
    let k = draw(len * d);
    let v = draw(len * d);
    let gates = GateInputs {
        i_pre: draw(len),
        f_pre: draw(len).into_iter().map(|f| f + 3.0).collect(),
    };
    (QkvSequence::new(q, k, v, len, d, d).unwrap(), gates)
}

fn modes(c: &mut Criterion) {
    let d = 64;
    let mut group = c.benchmark_group("mlstm_forward");
    group.sample_size(20);
    for len in [64, 256, 1024] {
        let (qkv, gates) = instance(len, d);
        group.throughput(Throughput::Elements(len as u64));
        for mode in [
            KernelMode::Recurrent,
            KernelMode::Parallel,
            KernelMode::Chunkwise(16),
            KernelMode::Chunkwise(64),
        ] {
            group.bench_with_input(BenchmarkId::new(mode.label(), len), &len, |b, _| {
                b.iter(|| mlstm::forward(mode, &qkv, &gates).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, modes);
criterion_main!(benches);
