//! Instance normalization over `[B, C, S, H, W]`.
//!
//! Each (batch, channel) instance is normalized over its spatial volume with
//! biased variance, then scaled and shifted by per-channel affine weights.

use crate::parallel::for_each_chunk;

/// Per-instance (mean, inv_std) saved by the forward pass for backward.
pub type InstanceStats = Vec<(f32, f32)>;

/// y = gamma[c] * (x - mean) / sqrt(var + eps) + beta[c], stats per (b, c).
pub fn instance_norm_forward(
    x: &[f32],
    b: usize,
    c: usize,
    spatial: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, InstanceStats) {
    let mut stats = vec![(0.0f32, 0.0f32); b * c];
    for_each_chunk(&mut stats, 1, |i, st| {
        let base = i * spatial;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for &v in &x[base..base + spatial] {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
        }
        let mean = sum / spatial as f64;
        let var = (sumsq / spatial as f64 - mean * mean).max(0.0);
        st[0] = (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32);
    });

    let mut y = vec![0.0f32; x.len()];
    for_each_chunk(&mut y, spatial, |i, out| {
        let (mean, inv) = stats[i];
        let ch = i % c;
        let (g, bt) = (gamma[ch], beta[ch]);
        let base = i * spatial;
        for (j, o) in out.iter_mut().enumerate() {
            *o = (x[base + j] - mean) * inv * g + bt;
        }
    });
    (y, stats)
}

/// Gradients w.r.t. input, gamma, and beta.
pub fn instance_norm_backward(
    dy: &[f32],
    x: &[f32],
    b: usize,
    c: usize,
    spatial: usize,
    gamma: &[f32],
    stats: &InstanceStats,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = spatial as f64;
    let mut dx = vec![0.0f32; x.len()];
    for_each_chunk(&mut dx, spatial, |i, out| {
        let (mean, inv) = stats[i];
        let g = gamma[i % c] as f64;
        let base = i * spatial;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for j in 0..spatial {
            let xhat = ((x[base + j] - mean) * inv) as f64;
            sum_dy += dy[base + j] as f64;
            sum_dy_xhat += dy[base + j] as f64 * xhat;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let xhat = ((x[base + j] - mean) * inv) as f64;
            let term = dy[base + j] as f64 - sum_dy / n - xhat * sum_dy_xhat / n;
            *o = (g * inv as f64 * term) as f32;
        }
    });

    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for_each_chunk(&mut dgamma, 1, |ch, out| {
        let mut acc = 0.0f64;
        for bb in 0..b {
            let i = bb * c + ch;
            let (mean, inv) = stats[i];
            let base = i * spatial;
            for j in 0..spatial {
                acc += dy[base + j] as f64 * ((x[base + j] - mean) * inv) as f64;
            }
        }
        out[0] = acc as f32;
    });
    for_each_chunk(&mut dbeta, 1, |ch, out| {
        let mut acc = 0.0f64;
        for bb in 0..b {
            let base = (bb * c + ch) * spatial;
            for j in 0..spatial {
                acc += dy[base + j] as f64;
            }
        }
        out[0] = acc as f32;
    });
    (dx, dgamma, dbeta)
}
