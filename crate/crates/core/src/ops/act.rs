//! Pointwise activations and the channel softmax.

use crate::parallel::for_each_chunk;

pub fn leaky_relu_forward(x: &[f32], slope: f32) -> Vec<f32> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

pub fn leaky_relu_backward(dy: &[f32], x: &[f32], slope: f32) -> Vec<f32> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| if v >= 0.0 { g } else { slope * g })
        .collect()
}

/// Softmax over the channel axis of `[B, K, ...spatial]`, max-subtracted.
/// Batch size is implied by `x.len() / (k * inner)`.
pub fn softmax_channels(x: &[f32], k: usize, inner: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for_each_chunk(&mut y, k * inner, |bb, out| {
        let base = bb * k * inner;
        for j in 0..inner {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..k {
                m = m.max(x[base + ch * inner + j]);
            }
            let mut z = 0.0f64;
            for ch in 0..k {
                let e = ((x[base + ch * inner + j] - m) as f64).exp();
                out[ch * inner + j] = e as f32;
                z += e;
            }
            for ch in 0..k {
                out[ch * inner + j] = (out[ch * inner + j] as f64 / z) as f32;
            }
        }
    });
    y
}

/// VJP of `softmax_channels` given the forward output `p`:
/// dz_j = p_j * (dy_j - sum_k dy_k p_k) per channel column.
pub fn softmax_channels_backward(dy: &[f32], p: &[f32], k: usize, inner: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; p.len()];
    for_each_chunk(&mut dx, k * inner, |bb, out| {
        let base = bb * k * inner;
        for j in 0..inner {
            let mut dot = 0.0f64;
            for ch in 0..k {
                let idx = ch * inner + j;
                dot += dy[base + idx] as f64 * p[base + idx] as f64;
            }
            for ch in 0..k {
                let idx = ch * inner + j;
                out[idx] = (p[base + idx] as f64 * (dy[base + idx] as f64 - dot)) as f32;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_keeps_positive_and_scales_negative() {
        let y = leaky_relu_forward(&[-1.0, 0.0, 2.0], 0.01);
        assert_eq!(y, vec![-0.01, 0.0, 2.0]);
        // Gradient: slope on the negative side, 1 at and above zero.
        let g = leaky_relu_backward(&[1.0, 1.0, 1.0], &[-1.0, 0.0, 2.0], 0.01);
        assert_eq!(g, vec![0.01, 1.0, 1.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = [0.0, 1.0, -2.0, 0.5, 3.0, -1.0]; // b=1, k=3, inner=2
        let p = softmax_channels(&x, 3, 2);
        for j in 0..2 {
            let s: f32 = (0..3).map(|ch| p[ch * 2 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // Uniform logits give uniform probabilities.
        let u = softmax_channels(&[7.0; 4], 4, 1);
        for v in u {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax_channels(&[1.0, 2.0, 3.0], 3, 1);
        let b = softmax_channels(&[1001.0, 1002.0, 1003.0], 3, 1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_backward_matches_central_differences() {
        let x = [0.2f32, -0.4, 1.1, 0.3];
        let r = [0.7f32, -0.3, 0.5, 0.2];
        let loss = |xv: &[f32]| -> f64 {
            softmax_channels(xv, 2, 2)
                .iter()
                .zip(&r)
                .map(|(a, w)| *a as f64 * *w as f64)
                .sum()
        };
        let p = softmax_channels(&x, 2, 2);
        let dx = softmax_channels_backward(&r, &p, 2, 2);
        for i in 0..4 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += 1e-3;
            xm[i] -= 1e-3;
            let num = (loss(&xp) - loss(&xm)) / (xp[i] as f64 - xm[i] as f64);
            assert!((dx[i] as f64 - num).abs() < 1e-4, "i={}", i);
        }
    }
}
