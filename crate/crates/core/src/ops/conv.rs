//! Direct (no im2col) convolution and transposed convolution.
//!
//! Feature maps are `[B, C, S, H, W]`. Convolution is cross-correlation with
//! same-style zero padding, `pad = (k - 1) / 2` per axis, so stride 1
//! preserves extents and stride 2 halves them (ceil). Transposed convolution
//! requires `kernel == stride` (non-overlapping upsampling), so each output
//! voxel receives exactly one contribution per input channel.
//!
//! Backward passes are written in gather form: every output element of a
//! gradient buffer is produced by its own f64 accumulation loop, never by
//! scattering, so parallel chunking cannot reorder any reduction.

use crate::parallel::for_each_chunk;

pub type Dim5 = [usize; 5];

/// Kernel and stride for one convolution; padding is derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize, usize), stride: (usize, usize, usize)) -> Self {
        ConvSpec { kernel, stride }
    }

    pub fn unit_stride(kernel: (usize, usize, usize)) -> Self {
        ConvSpec { kernel, stride: (1, 1, 1) }
    }

    /// Same-style zero padding per axis.
    pub fn padding(&self) -> (usize, usize, usize) {
        (
            (self.kernel.0 - 1) / 2,
            (self.kernel.1 - 1) / 2,
            (self.kernel.2 - 1) / 2,
        )
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    /// Output spatial extents of a forward convolution on `[_, _, s, h, w]`.
    pub fn out_extents(&self, s: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let p = self.padding();
        (
            out_extent(s, self.kernel.0, self.stride.0, p.0),
            out_extent(h, self.kernel.1, self.stride.1, p.1),
            out_extent(w, self.kernel.2, self.stride.2, p.2),
        )
    }
}

pub fn out_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// y[b, co, so, ho, wo] = bias[co] + sum over (ci, ks, kh, kw) of
/// x[b, ci, so*ss + ks - ps, ...] * w[co, ci, ks, kh, kw], zeros outside.
pub fn conv_forward(
    x: &[f32],
    xs: Dim5,
    w: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> (Vec<f32>, Dim5) {
    let [b, cin, si, hi, wi] = xs;
    let (ks, kh, kw) = spec.kernel;
    let (ss, sh, sw) = spec.stride;
    let (ps, ph, pw) = spec.padding();
    let (so, ho, wo) = spec.out_extents(si, hi, wi);
    let mut y = vec![0.0f32; b * cout * so * ho * wo];
    let plane = so * ho * wo;
    let kvol = ks * kh * kw;

    for_each_chunk(&mut y, plane, |chunk_idx, out| {
        let bb = chunk_idx / cout;
        let co = chunk_idx % cout;
        let base = bias.map_or(0.0f64, |bv| bv[co] as f64);
        let wbase = co * cin * kvol;
        for os in 0..so {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = base;
                    for ci in 0..cin {
                        let xc = (bb * cin + ci) * si;
                        let wc = wbase + ci * kvol;
                        for dks in 0..ks {
                            let is = (os * ss + dks) as isize - ps as isize;
                            if is < 0 || is >= si as isize {
                                continue;
                            }
                            let xrow_s = (xc + is as usize) * hi;
                            for dkh in 0..kh {
                                let ih = (oh * sh + dkh) as isize - ph as isize;
                                if ih < 0 || ih >= hi as isize {
                                    continue;
                                }
                                let xrow = (xrow_s + ih as usize) * wi;
                                let wrow = wc + (dks * kh + dkh) * kw;
                                for dkw in 0..kw {
                                    let iw = (ow * sw + dkw) as isize - pw as isize;
                                    if iw < 0 || iw >= wi as isize {
                                        continue;
                                    }
                                    acc += x[xrow + iw as usize] as f64
                                        * w[wrow + dkw] as f64;
                                }
                            }
                        }
                    }
                    out[(os * ho + oh) * wo + ow] = acc as f32;
                }
            }
        }
    });
    (y, [b, cout, so, ho, wo])
}

/// Gradient of `conv_forward` w.r.t. its input, gather form:
/// dx[b, ci, i] = sum over (co, k) with i = o*s + k - p of dy[b, co, o] * w[co, ci, k].
pub fn conv_backward_input(dy: &[f32], ys: Dim5, w: &[f32], xs: Dim5, spec: &ConvSpec) -> Vec<f32> {
    let [b, cin, si, hi, wi] = xs;
    let cout = ys[1];
    let (so, ho, wo) = (ys[2], ys[3], ys[4]);
    let (ks, kh, kw) = spec.kernel;
    let (ss, sh, sw) = spec.stride;
    let (ps, ph, pw) = spec.padding();
    let kvol = ks * kh * kw;
    let mut dx = vec![0.0f32; b * cin * si * hi * wi];
    let plane = si * hi * wi;

    // For input index i and kernel offset k the contributing output index is
    // o = (i + p - k) / s, valid when the division is exact and in range.
    let contrib = |i: usize, p: usize, k: usize, s: usize, n: usize| -> Option<usize> {
        let t = i as isize + p as isize - k as isize;
        if t < 0 || t % s as isize != 0 {
            return None;
        }
        let o = (t / s as isize) as usize;
        (o < n).then_some(o)
    };

    for_each_chunk(&mut dx, plane, |chunk_idx, out| {
        let bb = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for is in 0..si {
            for ih in 0..hi {
                for iw in 0..wi {
                    let mut acc = 0.0f64;
                    for co in 0..cout {
                        let ybase = (bb * cout + co) * so;
                        let wbase = (co * cin + ci) * kvol;
                        for dks in 0..ks {
                            let Some(os) = contrib(is, ps, dks, ss, so) else {
                                continue;
                            };
                            for dkh in 0..kh {
                                let Some(oh) = contrib(ih, ph, dkh, sh, ho) else {
                                    continue;
                                };
                                for dkw in 0..kw {
                                    let Some(ow) = contrib(iw, pw, dkw, sw, wo) else {
                                        continue;
                                    };
                                    acc += dy[((ybase + os) * ho + oh) * wo + ow] as f64
                                        * w[wbase + (dks * kh + dkh) * kw + dkw] as f64;
                                }
                            }
                        }
                    }
                    out[(is * hi + ih) * wi + iw] = acc as f32;
                }
            }
        }
    });
    dx
}

/// Gradient of `conv_forward` w.r.t. the weights.
pub fn conv_backward_weight(dy: &[f32], ys: Dim5, x: &[f32], xs: Dim5, spec: &ConvSpec) -> Vec<f32> {
    let [b, cin, si, hi, wi] = xs;
    let cout = ys[1];
    let (so, ho, wo) = (ys[2], ys[3], ys[4]);
    let (ks, kh, kw) = spec.kernel;
    let (ss, sh, sw) = spec.stride;
    let (ps, ph, pw) = spec.padding();
    let kvol = ks * kh * kw;
    let mut dw = vec![0.0f32; cout * cin * kvol];

    for_each_chunk(&mut dw, cin * kvol, |co, out| {
        for ci in 0..cin {
            for dks in 0..ks {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let mut acc = 0.0f64;
                        for bb in 0..b {
                            let ybase = (bb * cout + co) * so;
                            let xbase = (bb * cin + ci) * si;
                            for os in 0..so {
                                let is = (os * ss + dks) as isize - ps as isize;
                                if is < 0 || is >= si as isize {
                                    continue;
                                }
                                let yrow_s = (ybase + os) * ho;
                                let xrow_s = (xbase + is as usize) * hi;
                                for oh in 0..ho {
                                    let ih = (oh * sh + dkh) as isize - ph as isize;
                                    if ih < 0 || ih >= hi as isize {
                                        continue;
                                    }
                                    let yrow = (yrow_s + oh) * wo;
                                    let xrow = (xrow_s + ih as usize) * wi;
                                    for ow in 0..wo {
                                        let iw = (ow * sw + dkw) as isize - pw as isize;
                                        if iw < 0 || iw >= wi as isize {
                                            continue;
                                        }
                                        acc += dy[yrow + ow] as f64 * x[xrow + iw as usize] as f64;
                                    }
                                }
                            }
                        }
                        out[(ci * ks + dks) * kh * kw + dkh * kw + dkw] = acc as f32;
                    }
                }
            }
        }
    });
    dw
}

/// Gradient of `conv_forward` w.r.t. the bias: per-channel sum of dy.
pub fn conv_backward_bias(dy: &[f32], ys: Dim5) -> Vec<f32> {
    let [b, cout, so, ho, wo] = ys;
    let plane = so * ho * wo;
    let mut db = vec![0.0f32; cout];
    for_each_chunk(&mut db, 1, |co, out| {
        let mut acc = 0.0f64;
        for bb in 0..b {
            let base = (bb * cout + co) * plane;
            for i in 0..plane {
                acc += dy[base + i] as f64;
            }
        }
        out[0] = acc as f32;
    });
    db
}

/// Transposed convolution with `kernel == stride` (exact upsampling).
/// Weights are `[C_in, C_out, ks, kh, kw]`; output extent is `in * stride`.
/// Written as a gather: y[b, co, i] = x[b, ci, i / s] * w[ci, co, i % s].
pub fn conv_transpose_forward(
    x: &[f32],
    xs: Dim5,
    w: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> (Vec<f32>, Dim5) {
    let [b, cin, si, hi, wi] = xs;
    let (ks, kh, kw) = spec.kernel;
    debug_assert_eq!(spec.kernel, spec.stride, "transpose requires kernel == stride");
    let (so, ho, wo) = (si * ks, hi * kh, wi * kw);
    let kvol = ks * kh * kw;
    let mut y = vec![0.0f32; b * cout * so * ho * wo];
    let plane = so * ho * wo;

    for_each_chunk(&mut y, plane, |chunk_idx, out| {
        let bb = chunk_idx / cout;
        let co = chunk_idx % cout;
        let base = bias.map_or(0.0f64, |bv| bv[co] as f64);
        for os in 0..so {
            let (is, dks) = (os / ks, os % ks);
            for oh in 0..ho {
                let (ih, dkh) = (oh / kh, oh % kh);
                for ow in 0..wo {
                    let (iw, dkw) = (ow / kw, ow % kw);
                    let mut acc = base;
                    for ci in 0..cin {
                        let xi = (((bb * cin + ci) * si + is) * hi + ih) * wi + iw;
                        let wi_ = ((ci * cout + co) * kvol) + (dks * kh + dkh) * kw + dkw;
                        acc += x[xi] as f64 * w[wi_] as f64;
                    }
                    out[(os * ho + oh) * wo + ow] = acc as f32;
                }
            }
        }
    });
    (y, [b, cout, so, ho, wo])
}

/// Gradient of `conv_transpose_forward` w.r.t. its input: a valid strided
/// convolution of dy with the same weights.
pub fn conv_transpose_backward_input(
    dy: &[f32],
    ys: Dim5,
    w: &[f32],
    xs: Dim5,
    spec: &ConvSpec,
) -> Vec<f32> {
    let [b, cin, si, hi, wi] = xs;
    let cout = ys[1];
    let (ho, wo) = (ys[3], ys[4]);
    let (ks, kh, kw) = spec.kernel;
    let kvol = ks * kh * kw;
    let mut dx = vec![0.0f32; b * cin * si * hi * wi];
    let plane = si * hi * wi;

    for_each_chunk(&mut dx, plane, |chunk_idx, out| {
        let bb = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for is in 0..si {
            for ih in 0..hi {
                for iw in 0..wi {
                    let mut acc = 0.0f64;
                    for co in 0..cout {
                        let ybase = (bb * cout + co) * ys[2];
                        let wbase = (ci * cout + co) * kvol;
                        for dks in 0..ks {
                            let yrow_s = (ybase + is * ks + dks) * ho;
                            for dkh in 0..kh {
                                let yrow = (yrow_s + ih * kh + dkh) * wo;
                                for dkw in 0..kw {
                                    acc += dy[yrow + iw * kw + dkw] as f64
                                        * w[wbase + (dks * kh + dkh) * kw + dkw] as f64;
                                }
                            }
                        }
                    }
                    out[(is * hi + ih) * wi + iw] = acc as f32;
                }
            }
        }
    });
    dx
}

/// Gradient of `conv_transpose_forward` w.r.t. the weights.
pub fn conv_transpose_backward_weight(
    dy: &[f32],
    ys: Dim5,
    x: &[f32],
    xs: Dim5,
    spec: &ConvSpec,
) -> Vec<f32> {
    let [b, cin, si, hi, wi] = xs;
    let cout = ys[1];
    let (ho, wo) = (ys[3], ys[4]);
    let (ks, kh, kw) = spec.kernel;
    let kvol = ks * kh * kw;
    let mut dw = vec![0.0f32; cin * cout * kvol];

    for_each_chunk(&mut dw, cout * kvol, |ci, out| {
        for co in 0..cout {
            for dks in 0..ks {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let mut acc = 0.0f64;
                        for bb in 0..b {
                            let xbase = (bb * cin + ci) * si;
                            let ybase = (bb * cout + co) * ys[2];
                            for is in 0..si {
                                let yrow_s = (ybase + is * ks + dks) * ho;
                                let xrow_s = (xbase + is) * hi;
                                for ih in 0..hi {
                                    let yrow = (yrow_s + ih * kh + dkh) * wo;
                                    let xrow = (xrow_s + ih) * wi;
                                    for iw in 0..wi {
                                        acc += dy[yrow + iw * kw + dkw] as f64
                                            * x[xrow + iw] as f64;
                                    }
                                }
                            }
                        }
                        out[(co * ks + dks) * kh * kw + dkh * kw + dkw] = acc as f32;
                    }
                }
            }
        }
    });
    dw
}
