//! Zero-parameter slice shift along the S axis of `[B, C, S, H, W]`.
//!
//! Channels `[0, n_fwd)` move one slice forward (`out[s] = in[s-1]`, slice 0
//! zero-filled), channels `[n_fwd, n_fwd + n_bwd)` move one slice backward
//! (`out[s] = in[s+1]`, last slice zero-filled), remaining channels copy
//! through. Pure data movement: no parameters, no arithmetic.

use crate::parallel::for_each_chunk;

use super::Dim5;

/// Applies the shift; with `transpose` set the directions swap, which is the
/// adjoint map used by the backward pass.
pub fn slice_shift(x: &[f32], xs: Dim5, n_fwd: usize, n_bwd: usize, transpose: bool) -> Vec<f32> {
    let [b, c, s, h, w] = xs;
    debug_assert!(n_fwd + n_bwd <= c);
    let plane = h * w;
    let mut y = vec![0.0f32; x.len()];
    for_each_chunk(&mut y, s * plane, |i, out| {
        let ch = i % c;
        let base = i * s * plane;
        let dir = if ch < n_fwd {
            if transpose { Dir::Backward } else { Dir::Forward }
        } else if ch < n_fwd + n_bwd {
            if transpose { Dir::Forward } else { Dir::Backward }
        } else {
            Dir::Copy
        };
        match dir {
            Dir::Forward => {
                out[..plane].fill(0.0);
                out[plane..].copy_from_slice(&x[base..base + (s - 1) * plane]);
            }
            Dir::Backward => {
                out[..(s - 1) * plane].copy_from_slice(&x[base + plane..base + s * plane]);
                out[(s - 1) * plane..].fill(0.0);
            }
            Dir::Copy => out.copy_from_slice(&x[base..base + s * plane]),
        }
    });
    let _ = b;
    y
}

enum Dir {
    Forward,
    Backward,
    Copy,
}

#[cfg(test)]
mod tests {
    use super::*;

    // Index-arithmetic oracle: out[b,c,s] = in[b,c,s-dir] with explicit
    // bounds checks, one scalar at a time.
    fn shift_oracle(x: &[f32], xs: Dim5, n_fwd: usize, n_bwd: usize) -> Vec<f32> {
        let [b, c, s, h, w] = xs;
        let mut y = vec![0.0f32; x.len()];
        for bb in 0..b {
            for ch in 0..c {
                let delta: isize = if ch < n_fwd {
                    1
                } else if ch < n_fwd + n_bwd {
                    -1
                } else {
                    0
                };
                for sl in 0..s as isize {
                    let src = sl - delta;
                    if src < 0 || src >= s as isize {
                        continue;
                    }
                    for p in 0..h * w {
                        let dst_i = (((bb * c + ch) * s + sl as usize) * h * w) + p;
                        let src_i = (((bb * c + ch) * s + src as usize) * h * w) + p;
                        y[dst_i] = x[src_i];
                    }
                }
            }
        }
        y
    }

    #[test]
    fn three_channel_example() {
        // S=3, three single-pixel channels: ch0 forward [1,2,3] -> [0,1,2],
        // ch1 backward [4,5,6] -> [5,6,0], ch2 unchanged.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let y = slice_shift(&x, [1, 3, 3, 1, 1], 1, 1, false);
        assert_eq!(y, vec![0.0, 1.0, 2.0, 5.0, 6.0, 0.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn matches_oracle_on_random_volumes() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 30) as f32) - 2.0
        };
        for &(xs, nf, nb) in &[
            ([2usize, 4, 3, 2, 2], 1usize, 1usize),
            ([1, 8, 5, 3, 3], 2, 2),
            ([1, 5, 2, 1, 4], 1, 1),
            ([2, 6, 4, 2, 2], 0, 0),
            ([1, 4, 3, 2, 2], 2, 2),
        ] {
            let n: usize = xs.iter().product();
            let x: Vec<f32> = (0..n).map(|_| next()).collect();
            assert_eq!(
                slice_shift(&x, xs, nf, nb, false),
                shift_oracle(&x, xs, nf, nb),
                "shape {:?} nf {} nb {}",
                xs,
                nf,
                nb
            );
        }
    }

    #[test]
    fn zero_counts_is_identity() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        assert_eq!(slice_shift(&x, [1, 2, 3, 2, 2], 0, 0, false), x);
    }

    #[test]
    fn single_slice_shifted_channels_become_zero() {
        // S=1: both neighbors are out of range, so shifted channels zero out.
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = slice_shift(&x, [1, 4, 1, 1, 1], 1, 1, false);
        assert_eq!(y, vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn transpose_is_the_adjoint() {
        // <shift(x), g> == <x, shift_T(g)> for random vectors.
        let xs: Dim5 = [1, 4, 4, 2, 2];
        let n: usize = xs.iter().product();
        let x: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let g: Vec<f32> = (0..n).map(|i| (i as f32 * 0.73).cos()).collect();
        let y = slice_shift(&x, xs, 1, 1, false);
        let gt = slice_shift(&g, xs, 1, 1, true);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.iter().zip(&gt).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-6);
    }
}
