//! Parallel vs sequential timing for the heavy kernels.
//!
//! Both paths live in one binary: the chunk helpers consult a runtime
//! switch, so each benchmark group runs the identical code with the thread
//! pool on and off. Outputs are bitwise identical either way; only the wall
//! time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sshunet_core::layers::{ssh_residual_block, BlockShape, BlockVars, ShiftPlacement, ShiftSpec};
use sshunet_core::ops::conv::{conv_backward_input, conv_backward_weight, conv_forward, ConvSpec};
use sshunet_core::ops::norm::instance_norm_forward;
use sshunet_core::parallel::set_parallel;
use sshunet_core::{Tape, Tensor};

fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        })
        .collect()
}

fn bench_conv(c: &mut Criterion) {
    let xs = [2usize, 16, 16, 32, 32];
    let cout = 16;
    let spec = ConvSpec::unit_stride((1, 3, 3));
    let x = rand_vec(xs.iter().product(), 1);
    let w = rand_vec(cout * xs[1] * spec.kernel_volume(), 2);

    let mut group = c.benchmark_group("conv_forward_16c_32x32");
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""),
            &par,
            |bench, &p| {
                set_parallel(p);
                bench.iter(|| conv_forward(&x, xs, &w, cout, None, &spec));
                set_parallel(true);
            },
        );
    }
    group.finish();

    let (y, ys) = conv_forward(&x, xs, &w, cout, None, &spec);
    let dy = rand_vec(y.len(), 3);
    let mut group = c.benchmark_group("conv_backward_16c_32x32");
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""),
            &par,
            |bench, &p| {
                set_parallel(p);
                bench.iter(|| {
                    let dx = conv_backward_input(&dy, ys, &w, xs, &spec);
                    let dw = conv_backward_weight(&dy, ys, &x, xs, &spec);
                    (dx, dw)
                });
                set_parallel(true);
            },
        );
    }
    group.finish();
}

fn bench_instance_norm(c: &mut Criterion) {
    let (b, ch, spatial) = (2usize, 32usize, 16 * 32 * 32);
    let x = rand_vec(b * ch * spatial, 7);
    let gamma = vec![1.0f32; ch];
    let beta = vec![0.0f32; ch];

    let mut group = c.benchmark_group("instance_norm_32c");
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""),
            &par,
            |bench, &p| {
                set_parallel(p);
                bench.iter(|| instance_norm_forward(&x, b, ch, spatial, &gamma, &beta, 1e-5));
                set_parallel(true);
            },
        );
    }
    group.finish();
}

/// Whole training unit: one shifted residual block, forward and backward
/// through the tape. Covers the kernels above plus shift, activation, and
/// gradient accumulation in their real composition.
fn bench_residual_block(c: &mut Criterion) {
    let (b, ch, s, hw) = (1usize, 16usize, 8usize, 16usize);
    let xt = Tensor::from_vec(&[b, ch, s, hw, hw], rand_vec(b * ch * s * hw * hw, 11)).unwrap();
    let w1 = rand_vec(ch * ch * 9, 12);
    let w2 = rand_vec(ch * ch * 9, 13);
    let spec = ShiftSpec::quarter();
    let shape = BlockShape {
        in_channels: ch,
        out_channels: ch,
        kernel: (1, 3, 3),
        stride: (1, 1, 1),
    };

    let mut group = c.benchmark_group("residual_block_fwd_bwd_16c");
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, ""),
            &par,
            |bench, &p| {
                set_parallel(p);
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let x = tape.leaf(&xt);
                    let ones = Tensor::filled(&[ch], 1.0);
                    let zeros = Tensor::zeros(&[ch]);
                    let params = BlockVars {
                        conv1_w: tape
                            .leaf_data(&[ch, ch, 1, 3, 3], w1.clone(), true)
                            .unwrap(),
                        norm1_gamma: tape.leaf(&ones),
                        norm1_beta: tape.leaf(&zeros),
                        conv2_w: tape
                            .leaf_data(&[ch, ch, 1, 3, 3], w2.clone(), true)
                            .unwrap(),
                        norm2_gamma: tape.leaf(&ones),
                        norm2_beta: tape.leaf(&zeros),
                        skip: None,
                    };
                    let y = ssh_residual_block(
                        &mut tape,
                        x,
                        &params,
                        &shape,
                        Some((&spec, ShiftPlacement::PreConv)),
                    )
                    .unwrap();
                    let loss = tape.sum(y).unwrap();
                    tape.backward(loss).unwrap();
                    tape.grad(params.conv1_w).map(|g| g[0])
                });
                set_parallel(true);
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_instance_norm, bench_residual_block);
criterion_main!(benches);
