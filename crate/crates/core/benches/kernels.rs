//! Parallel vs sequential kernel timings. Both paths share one binary;
//! the runtime switch flips between them so the comparison isolates the
//! dispatch strategy from codegen differences.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsdn_core::kernels::conv2d::{conv2d_fwd, Conv2dSpec};
use dsdn_core::kernels::conv3d::{conv3d_fwd, Conv3dSpec};
use dsdn_core::kernels::matmul::matmul_fwd;
use dsdn_core::parallel::set_parallel;
use dsdn_core::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (batch, m, k, n) = (16, 128, 64, 128);
    let a = Array::<f32>::randn(&mut rng, &[batch, m, k]);
    let b = Array::<f32>::randn(&mut rng, &[batch, k, n]);
    let mut out = vec![0f32; batch * m * n];
    let mut group = c.benchmark_group("matmul_16x128x64x128");
    for (label, par) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &par, |bch, &par| {
            set_parallel(par);
            bch.iter(|| {
                matmul_fwd(a.data(), b.data(), batch, m, k, n, true, &mut out);
                out[0]
            });
        });
    }
    set_parallel(true);
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, cin, h, w) = (8, 24, 16, 16);
    let cout = 24;
    let x = Array::<f32>::randn(&mut rng, &[batch, cin, h, w]);
    let wt = Array::<f32>::randn(&mut rng, &[cout, cin, 3, 3]);
    let spec = Conv2dSpec {
        stride: (1, 1),
        padding: (1, 1),
        groups: 1,
    };
    let mut out = vec![0f32; batch * cout * h * w];
    let mut group = c.benchmark_group("conv2d_8x24x16x16_k3");
    for (label, par) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &par, |bch, &par| {
            set_parallel(par);
            bch.iter(|| {
                conv2d_fwd(
                    x.data(),
                    wt.data(),
                    None,
                    (batch, cin, h, w),
                    (cout, 3, 3),
                    spec,
                    &mut out,
                );
                out[0]
            });
        });
    }
    set_parallel(true);
    group.finish();
}

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (batch, cin, l, h, w) = (2, 16, 8, 16, 16);
    let cout = 16;
    let x = Array::<f32>::randn(&mut rng, &[batch, cin, l, h, w]);
    let wt = Array::<f32>::randn(&mut rng, &[cout, cin, 3, 3, 3]);
    let spec = Conv3dSpec {
        stride: (1, 1, 1),
        padding: (1, 1, 1),
    };
    let mut out = vec![0f32; batch * cout * l * h * w];
    let mut group = c.benchmark_group("conv3d_2x16x8x16x16_k3");
    group.sample_size(20);
    for (label, par) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &par, |bch, &par| {
            set_parallel(par);
            bch.iter(|| {
                conv3d_fwd(
                    x.data(),
                    wt.data(),
                    None,
                    (batch, cin, l, h, w),
                    (cout, 3, 3, 3),
                    spec,
                    &mut out,
                );
                out[0]
            });
        });
    }
    set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv2d, bench_conv3d);
criterion_main!(benches);
