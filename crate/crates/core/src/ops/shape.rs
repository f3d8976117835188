//! Data-movement kernels: permute, concatenate, slice.

use crate::parallel::for_each_chunk;
use crate::tensor::strides;

/// out[i0, i1, ...] = x[i_order[0], i_order[1], ...]; axis d of the output
/// is axis order[d] of the input.
pub fn permute(x: &[f32], shape: &[usize], order: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    debug_assert_eq!(order.len(), rank);
    let out_shape: Vec<usize> = order.iter().map(|&d| shape[d]).collect();
    let in_strides = strides(shape);
    // Stride to add in the input when the output multi-index advances on axis d.
    let step: Vec<usize> = order.iter().map(|&d| in_strides[d]).collect();
    let n: usize = shape.iter().product();
    let mut y = vec![0.0f32; n];
    if rank == 0 || n == 0 {
        return (y, out_shape);
    }
    let chunk = n / out_shape[0];
    for_each_chunk(&mut y, chunk, |i0, out| {
        // Odometer walk over output axes 1..rank, input offset maintained.
        let mut idx = vec![0usize; rank];
        idx[0] = i0;
        let mut off = i0 * step[0];
        for slot in out.iter_mut() {
            *slot = x[off];
            // Increment the last axis; carry toward axis 1.
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    break; // odometer exhausted (last element of the chunk)
                }
                idx[d] += 1;
                off += step[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= out_shape[d] * step[d];
                idx[d] = 0;
                d -= 1;
            }
        }
    });
    (y, out_shape)
}

/// Inverse of a permutation order: inv[order[d]] = d.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (d, &o) in order.iter().enumerate() {
        inv[o] = d;
    }
    inv
}

pub fn is_permutation(order: &[usize], rank: usize) -> bool {
    if order.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &o in order {
        if o >= rank || seen[o] {
            return false;
        }
        seen[o] = true;
    }
    true
}

/// Concatenates equal-shaped-except-axis parts along `axis`.
pub fn concat(parts: &[(&[f32], &[usize])], axis: usize) -> (Vec<f32>, Vec<usize>) {
    let rank = parts[0].1.len();
    let tail: usize = parts[0].1[axis + 1..].iter().product();
    let outer: usize = parts[0].1[..axis].iter().product();
    let axis_total: usize = parts.iter().map(|(_, s)| s[axis]).sum();
    let mut out_shape = parts[0].1.to_vec();
    out_shape[axis] = axis_total;
    let mut y = vec![0.0f32; outer * axis_total * tail];
    let chunk = axis_total * tail;
    for_each_chunk(&mut y, chunk, |o, out| {
        let mut at = 0usize;
        for (data, shape) in parts {
            let span = shape[axis] * tail;
            out[at..at + span].copy_from_slice(&data[o * span..(o + 1) * span]);
            at += span;
        }
    });
    let _ = rank;
    (y, out_shape)
}

/// Extracts `len` indices starting at `start` along `axis`.
pub fn slice_axis(
    x: &[f32],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> (Vec<f32>, Vec<usize>) {
    let tail: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let full = shape[axis] * tail;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut y = vec![0.0f32; outer * len * tail];
    let chunk = len * tail;
    for_each_chunk(&mut y, chunk, |o, out| {
        let base = o * full + start * tail;
        out.copy_from_slice(&x[base..base + chunk]);
    });
    (y, out_shape)
}

/// Adjoint of `slice_axis`: embeds `g` back into a zero buffer of the input
/// shape at the sliced window.
pub fn slice_axis_adjoint(
    g: &[f32],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let tail: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let full = in_shape[axis] * tail;
    let mut y = vec![0.0f32; outer * full];
    let window = len * tail;
    for_each_chunk(&mut y, full, |o, out| {
        out[start * tail..start * tail + window]
            .copy_from_slice(&g[o * window..(o + 1) * window]);
    });
    y
}
