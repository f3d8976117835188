//! Slice-shift building blocks: multi-view batching, the shift spec, the
//! residual block, and the multi-view fusion head.
//!
//! A canonical volume is `[B, C, X, Y, Z]` with x as the slice axis. The
//! multi-view transform re-expresses the same volume with each spatial axis
//! taking a turn as the slice axis and rides all three views on the batch
//! axis, so one set of weights processes every view.

use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::ops::shift::slice_shift as shift_kernel;
use crate::tape::{Tape, Var};

/// Axis order of each view relative to the canonical `[B, C, X, Y, Z]`.
/// The slice axis of a view is whichever volume axis lands in position 2.
/// The yz view (slices along x, planes (y, z)) is the canonical order
/// itself and needs no permutation.
const XY_ORDER: [usize; 5] = [0, 1, 4, 2, 3]; // slices along z, planes (x, y)
const XZ_ORDER: [usize; 5] = [0, 1, 3, 2, 4]; // slices along y, planes (x, z)
const XY_INVERSE: [usize; 5] = [0, 1, 3, 4, 2];
const XZ_INVERSE: [usize; 5] = [0, 1, 3, 2, 4];

/// Per-direction fraction of channels to shift, kept rational so channel
/// counts resolve exactly (`floor(C * num / den)` per direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSpec {
    num: u32,
    den: u32,
}

impl ShiftSpec {
    /// Fraction `num/den` must lie in [0, 1/2]: both directions together
    /// can move at most every channel.
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::argument("shift fraction denominator is zero"));
        }
        if 2 * num > den {
            return Err(Error::argument(format!(
                "shift fraction {}/{} exceeds 1/2 per direction",
                num, den
            )));
        }
        Ok(ShiftSpec { num, den })
    }

    pub fn zero() -> Self {
        ShiftSpec { num: 0, den: 1 }
    }

    pub fn quarter() -> Self {
        ShiftSpec { num: 1, den: 4 }
    }

    /// Accepts "1/4" style rationals and plain decimals like "0.25".
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |_| Error::argument(format!("cannot parse shift fraction `{}`", s));
        if let Some((n, d)) = s.split_once('/') {
            ShiftSpec::new(
                n.trim().parse::<u32>().map_err(bad)?,
                d.trim().parse::<u32>().map_err(bad)?,
            )
        } else if let Some((int, frac)) = s.split_once('.') {
            let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(bad)? };
            if frac.len() > 9 || frac.chars().any(|c| !c.is_ascii_digit()) {
                return Err(Error::argument(format!("cannot parse shift fraction `{}`", s)));
            }
            let den = 10u32.pow(frac.len() as u32);
            let num = int * den + if frac.is_empty() { 0 } else { frac.parse::<u32>().map_err(bad)? };
            ShiftSpec::new(num, den)
        } else {
            ShiftSpec::new(s.trim().parse::<u32>().map_err(bad)?, 1)
        }
    }

    /// Channels shifted per direction for a `channels`-wide tensor.
    pub fn shifted_channels(&self, channels: usize) -> usize {
        channels * self.num as usize / self.den as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }
}

impl std::fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Three views of a `[B, C, D, D, D]` volume stacked on the batch axis.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch {
    pub var: Var,
    pub base_batch: usize,
}

/// Permutes the volume into (xy, yz, xz) views and concatenates them along
/// the batch axis in that order: `[3B, C, D, D, D]`.
pub fn create_multi_view(tape: &mut Tape, v: Var) -> Result<ViewBatch> {
    let shape = tape.shape(v).to_vec();
    if shape.len() != 5 {
        return Err(Error::shape(format!("multi-view input must be rank 5, got {:?}", shape)));
    }
    if !(shape[2] == shape[3] && shape[3] == shape[4]) {
        return Err(Error::shape(format!(
            "multi-view needs an isotropic volume, got extents {}x{}x{}",
            shape[2], shape[3], shape[4]
        )));
    }
    let xy = tape.permute(v, &XY_ORDER)?;
    let xz = tape.permute(v, &XZ_ORDER)?;
    let var = tape.concat(&[xy, v, xz], 0)?;
    Ok(ViewBatch { var, base_batch: shape[0] })
}

/// Splits a view batch back into three canonically-oriented `[B, C, X, Y, Z]`
/// tensors, in (xy, yz, xz) order.
pub fn reverse_multi_view(tape: &mut Tape, vb: &ViewBatch) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(vb.var).to_vec();
    if shape.len() != 5 || shape[0] != 3 * vb.base_batch {
        return Err(Error::shape(format!(
            "view batch should have batch {}, got shape {:?}",
            3 * vb.base_batch,
            shape
        )));
    }
    let b = vb.base_batch;
    let xy = tape.slice(vb.var, 0, 0, b)?;
    let yz = tape.slice(vb.var, 0, b, b)?;
    let xz = tape.slice(vb.var, 0, 2 * b, b)?;
    let xy = tape.permute(xy, &XY_INVERSE)?;
    let xz = tape.permute(xz, &XZ_INVERSE)?;
    Ok((xy, yz, xz))
}

/// Shifts `floor(C * fraction)` channels one slice forward and the next
/// `floor(C * fraction)` one slice backward; vacated slices are zero-filled.
pub fn slice_shift(tape: &mut Tape, x: Var, spec: &ShiftSpec) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 5 {
        return Err(Error::shape(format!("slice shift input must be rank 5, got {:?}", shape)));
    }
    let n = spec.shifted_channels(shape[1]);
    tape.slice_shift(x, n, n)
}

/// Where the shift sits inside a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftPlacement {
    /// On the conv-path input, before the first convolution.
    #[default]
    PreConv,
    /// Between the two convolutions.
    BetweenConvs,
}

impl ShiftPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre_conv" => Ok(ShiftPlacement::PreConv),
            "between_convs" => Ok(ShiftPlacement::BetweenConvs),
            other => Err(Error::argument(format!(
                "unknown shift placement `{}` (pre_conv, between_convs)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftPlacement::PreConv => "pre_conv",
            ShiftPlacement::BetweenConvs => "between_convs",
        }
    }
}

/// Parameters of one residual block, already bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub conv1_w: Var,
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub conv2_w: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    /// 1x1x1 projection (+ norm affine) present iff channels or stride
    /// change across the block.
    pub skip: Option<SkipVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct SkipVars {
    pub w: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Static geometry of one residual block.
#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel of both convolutions: (1,3,3) planar or (3,3,3) full 3D.
    pub kernel: (usize, usize, usize),
    /// Stride of the first convolution (and of the skip projection).
    pub stride: (usize, usize, usize),
}

impl BlockShape {
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != (1, 1, 1)
    }
}

pub const NORM_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

/// conv -> norm -> act -> conv -> norm, plus the skip from the unshifted
/// block input, then a trailing activation. The optional shift acts on the
/// conv path only, so the identity skip stays intact.
pub fn ssh_residual_block(
    tape: &mut Tape,
    x: Var,
    params: &BlockVars,
    shape: &BlockShape,
    shift: Option<(&ShiftSpec, ShiftPlacement)>,
) -> Result<Var> {
    let mut h = x;
    if let Some((spec, ShiftPlacement::PreConv)) = shift {
        h = slice_shift(tape, h, spec)?;
    }
    h = tape.conv(h, params.conv1_w, None, ConvSpec::new(shape.kernel, shape.stride))?;
    h = tape.instance_norm(h, params.norm1_gamma, params.norm1_beta, NORM_EPS)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    if let Some((spec, ShiftPlacement::BetweenConvs)) = shift {
        h = slice_shift(tape, h, spec)?;
    }
    h = tape.conv(h, params.conv2_w, None, ConvSpec::unit_stride(shape.kernel))?;
    h = tape.instance_norm(h, params.norm2_gamma, params.norm2_beta, NORM_EPS)?;

    let skip = match (&params.skip, shape.needs_projection()) {
        (Some(sv), true) => {
            let projected = tape.conv(x, sv.w, None, ConvSpec::new((1, 1, 1), shape.stride))?;
            tape.instance_norm(projected, sv.gamma, sv.beta, NORM_EPS)?
        }
        (None, false) => x,
        (got, _) => {
            return Err(Error::argument(format!(
                "block {}x{} stride {:?}: projection params {} but geometry says {}",
                shape.in_channels,
                shape.out_channels,
                shape.stride,
                if got.is_some() { "present" } else { "missing" },
                if shape.needs_projection() { "required" } else { "unused" },
            )))
        }
    };
    let merged = tape.add(h, skip)?;
    tape.leaky_relu(merged, LEAKY_SLOPE)
}

/// Parameters of the two-conv prediction head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

/// Restores every view to canonical orientation, sums them, and maps the
/// merged features to class logits with two 1x1x1 convolutions.
pub fn multi_view_fusion(tape: &mut Tape, vb: &ViewBatch, head: &HeadVars) -> Result<Var> {
    let (xy, yz, xz) = reverse_multi_view(tape, vb)?;
    let sum = tape.add(xy, yz)?;
    let sum = tape.add(sum, xz)?;
    prediction_head(tape, sum, head)
}

/// The same two-conv head without view merging, for single-view variants.
pub fn prediction_head(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<Var> {
    let unit = ConvSpec::unit_stride((1, 1, 1));
    let h = tape.conv(x, head.conv1_w, Some(head.conv1_b), unit)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    tape.conv(h, head.conv2_w, Some(head.conv2_b), unit)
}

/// Decomposition report for the shift/multiply-accumulate identity.
#[derive(Debug)]
pub struct ShiftMacReport {
    pub direct: Vec<f32>,
    pub decomposed: Vec<f32>,
    pub max_abs_err: f32,
}

/// Demonstrates that a zero-padded 3-tap 1D convolution equals a sum of
/// shifted copies weighted by the taps: direct[i] = w1*x[i-1] + w2*x[i] +
/// w3*x[i+1], decomposed = w1 * forward-shift + w2 * identity + w3 *
/// backward-shift, both under this module's shift semantics.
pub fn shift_mac_equivalence(x: &[f32], w: (f32, f32, f32)) -> ShiftMacReport {
    let s = x.len();
    let direct: Vec<f32> = (0..s)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { x[i - 1] };
            let right = if i + 1 == s { 0.0 } else { x[i + 1] };
            w.0 * left + w.1 * x[i] + w.2 * right
        })
        .collect();

    // Three copies of x on the channel axis of [1, 3, S, 1, 1]: the shift
    // kernel moves channel 0 forward (holds x[i-1]) and channel 1 backward
    // (holds x[i+1]); channel 2 passes through.
    let mut stacked = Vec::with_capacity(3 * s);
    for _ in 0..3 {
        stacked.extend_from_slice(x);
    }
    let shifted = shift_kernel(&stacked, [1, 3, s, 1, 1], 1, 1, false);
    let decomposed: Vec<f32> = (0..s)
        .map(|i| w.0 * shifted[i] + w.2 * shifted[s + i] + w.1 * shifted[2 * s + i])
        .collect();

    let max_abs_err = direct
        .iter()
        .zip(&decomposed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ShiftMacReport { direct, decomposed, max_abs_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn volume_0_to_7() -> Tensor {
        // [1, 1, 2, 2, 2] with v[x, y, z] = 4x + 2y + z.
        Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn view_orders_invert_correctly() {
        use crate::ops::shape::inverse_order;
        assert_eq!(inverse_order(&XY_ORDER), XY_INVERSE.to_vec());
        assert_eq!(inverse_order(&XZ_ORDER), XZ_INVERSE.to_vec());
    }

    #[test]
    fn view_orientations_match_hand_indexing() {
        let v = volume_0_to_7();
        let mut tape = Tape::new();
        let xv = tape.leaf(&v);
        let vb = create_multi_view(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(vb.var), &[3, 1, 2, 2, 2]);
        let out = tape.value(vb.var);

        // yz view (second third) is the identity: slice s=0 is the x=0
        // plane [[0,1],[2,3]].
        assert_eq!(&out[8..12], &[0.0, 1.0, 2.0, 3.0]);
        // xy view (first third) has axes (z, x, y): element (z=1, x=0, y=1)
        // = v[0, 1, 1] = 3, at flat offset z*4 + x*2 + y = 5.
        assert_eq!(out[5], 3.0);
        // xz view (last third) has axes (y, x, z): element (y=1, x=0, z=1)
        // = v[0, 1, 1] = 3, at flat offset 16 + y*4 + x*2 + z = 16 + 5.
        assert_eq!(out[16 + 5], 3.0);
    }

    #[test]
    fn create_then_reverse_restores_every_view() {
        let v = Tensor::from_vec(
            &[2, 3, 4, 4, 4],
            (0..2 * 3 * 64).map(|i| (i as f32 * 0.31).sin()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&v);
        let vb = create_multi_view(&mut tape, xv).unwrap();
        let (xy, yz, xz) = reverse_multi_view(&mut tape, &vb).unwrap();
        for (name, var) in [("xy", xy), ("yz", yz), ("xz", xz)] {
            assert_eq!(tape.shape(var), v.shape(), "{} shape", name);
            assert_eq!(tape.value(var), v.data(), "{} round trip", name);
        }
    }

    #[test]
    fn multi_view_rejects_anisotropic_volumes() {
        let v = Tensor::zeros(&[1, 1, 2, 2, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&v);
        assert!(matches!(
            create_multi_view(&mut tape, xv),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shift_spec_validation_and_counts() {
        assert!(ShiftSpec::new(1, 0).is_err());
        assert!(ShiftSpec::new(2, 3).is_err()); // > 1/2
        let q = ShiftSpec::new(1, 4).unwrap();
        assert_eq!(q.shifted_channels(4), 1);
        assert_eq!(q.shifted_channels(7), 1); // floor
        assert_eq!(q.shifted_channels(8), 2);
        let half = ShiftSpec::new(1, 2).unwrap();
        assert_eq!(half.shifted_channels(8), 4); // all 8 move, 4 each way
        assert_eq!(ShiftSpec::zero().shifted_channels(100), 0);
    }

    #[test]
    fn shift_spec_parsing() {
        assert_eq!(ShiftSpec::parse("1/4").unwrap(), ShiftSpec::quarter());
        assert_eq!(ShiftSpec::parse("0.25").unwrap(), ShiftSpec::new(25, 100).unwrap());
        assert_eq!(ShiftSpec::parse("0").unwrap(), ShiftSpec::zero());
        assert_eq!(ShiftSpec::parse("0.5").unwrap(), ShiftSpec::new(5, 10).unwrap());
        assert!(ShiftSpec::parse("3/4").is_err());
        assert!(ShiftSpec::parse("x").is_err());
        // Same floor behavior either way of writing one quarter.
        assert_eq!(
            ShiftSpec::parse("0.25").unwrap().shifted_channels(6),
            ShiftSpec::parse("1/4").unwrap().shifted_channels(6)
        );
    }

    #[test]
    fn slice_shift_moves_expected_channels() {
        // C=4, fraction 1/4: one channel forward, one backward, two copy.
        let x = Tensor::from_vec(
            &[1, 4, 3, 1, 1],
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.],
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let spec = ShiftSpec::quarter();
        let y = slice_shift(&mut tape, xv, &spec).unwrap();
        assert_eq!(
            tape.value(y),
            &[0., 1., 2., 5., 6., 0., 7., 8., 9., 10., 11., 12.]
        );
    }

    #[test]
    fn slice_shift_is_linear() {
        // shift(a*x + b*y) == a*shift(x) + b*shift(y), exactly: the op is
        // pure data movement so the float ops happen in identical order.
        let n = 2 * 4 * 3 * 2 * 2;
        let xv: Vec<f32> = (0..n).map(|i| (i as f32 * 0.7).sin()).collect();
        let yv: Vec<f32> = (0..n).map(|i| (i as f32 * 1.3).cos()).collect();
        let (a, b) = (0.6f32, -1.7f32);
        let shape = [2usize, 4, 3, 2, 2];
        let combo: Vec<f32> = xv.iter().zip(&yv).map(|(x, y)| a * x + b * y).collect();
        let lhs = shift_kernel(&combo, shape, 1, 1, false);
        let sx = shift_kernel(&xv, shape, 1, 1, false);
        let sy = shift_kernel(&yv, shape, 1, 1, false);
        let rhs: Vec<f32> = sx.iter().zip(&sy).map(|(x, y)| a * x + b * y).collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn shift_mac_decomposition_hand_example() {
        // x = [1,2,3,4], taps (1, 0, -1): direct = [-2, -2, -2, 3].
        let report = shift_mac_equivalence(&[1.0, 2.0, 3.0, 4.0], (1.0, 0.0, -1.0));
        assert_eq!(report.direct, vec![-2.0, -2.0, -2.0, 3.0]);
        assert_eq!(report.decomposed, report.direct);
        assert_eq!(report.max_abs_err, 0.0);
    }

    fn unit_block_vars(tape: &mut Tape, ch: usize, kernel: (usize, usize, usize)) -> BlockVars {
        // Identity-friendly fixed params: zero convs, unit affine.
        let zeros_w = Tensor::zeros(&[ch, ch, kernel.0, kernel.1, kernel.2]);
        let ones = Tensor::filled(&[ch], 1.0);
        let zeros = Tensor::zeros(&[ch]);
        BlockVars {
            conv1_w: tape.leaf(&zeros_w),
            norm1_gamma: tape.leaf(&ones),
            norm1_beta: tape.leaf(&zeros),
            conv2_w: tape.leaf(&zeros_w),
            norm2_gamma: tape.leaf(&ones),
            norm2_beta: tape.leaf(&zeros),
            skip: None,
        }
    }

    #[test]
    fn zero_conv_block_reduces_to_leaky_relu_of_input() {
        // All conv weights zero, identity skip: main path contributes
        // nothing (norm of zeros is zero), so out = leaky_relu(x).
        let x = Tensor::from_vec(
            &[1, 2, 2, 3, 3],
            (0..36).map(|i| i as f32 * 0.5 - 8.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let params = unit_block_vars(&mut tape, 2, (1, 3, 3));
        let xv = tape.leaf(&x);
        let shape = BlockShape {
            in_channels: 2,
            out_channels: 2,
            kernel: (1, 3, 3),
            stride: (1, 1, 1),
        };
        let y = ssh_residual_block(&mut tape, xv, &params, &shape, None).unwrap();
        let want: Vec<f32> = x.data().iter().map(|&v| if v >= 0.0 { v } else { 0.01 * v }).collect();
        assert_eq!(tape.value(y), &want[..]);
    }

    #[test]
    fn zero_fraction_block_matches_plain_block_bitwise() {
        let x = Tensor::from_vec(
            &[1, 4, 3, 4, 4],
            (0..192).map(|i| ((i * 13 % 29) as f32) / 7.0 - 2.0).collect(),
        )
        .unwrap();
        let w1 = Tensor::from_vec(
            &[4, 4, 1, 3, 3],
            (0..144).map(|i| ((i * 7 % 23) as f32) / 23.0 - 0.5).collect(),
        )
        .unwrap();
        let w2 = Tensor::from_vec(
            &[4, 4, 1, 3, 3],
            (0..144).map(|i| ((i * 11 % 19) as f32) / 19.0 - 0.5).collect(),
        )
        .unwrap();
        let run = |shift: Option<(&ShiftSpec, ShiftPlacement)>| -> Vec<f32> {
            let mut tape = Tape::new();
            let ones = Tensor::filled(&[4], 1.0);
            let zeros = Tensor::zeros(&[4]);
            let params = BlockVars {
                conv1_w: tape.leaf(&w1),
                norm1_gamma: tape.leaf(&ones),
                norm1_beta: tape.leaf(&zeros),
                conv2_w: tape.leaf(&w2),
                norm2_gamma: tape.leaf(&ones),
                norm2_beta: tape.leaf(&zeros),
                skip: None,
            };
            let xv = tape.leaf(&x);
            let shape = BlockShape {
                in_channels: 4,
                out_channels: 4,
                kernel: (1, 3, 3),
                stride: (1, 1, 1),
            };
            let y = ssh_residual_block(&mut tape, xv, &params, &shape, shift).unwrap();
            tape.value(y).to_vec()
        };
        let zero = ShiftSpec::zero();
        let with_zero_shift = run(Some((&zero, ShiftPlacement::PreConv)));
        let without = run(None);
        assert_eq!(with_zero_shift, without);
    }

    #[test]
    fn single_slice_input_zeroes_shifted_channels_before_conv() {
        // S=1: both shift directions move data out of range, so the conv
        // path sees zeros in the shifted channels while the skip keeps the
        // original values.
        let x = Tensor::from_vec(&[1, 4, 1, 2, 2], (1..=16).map(|v| v as f32).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let spec = ShiftSpec::quarter();
        let shifted = slice_shift(&mut tape, xv, &spec).unwrap();
        let out = tape.value(shifted);
        assert_eq!(&out[0..4], &[0.0; 4]); // forward channel gone
        assert_eq!(&out[4..8], &[0.0; 4]); // backward channel gone
        assert_eq!(&out[8..16], &x.data()[8..16]);
    }

    #[test]
    fn fusion_of_identical_views_triples_first_channels() {
        // A real view batch of one volume reverses to three identical
        // canonical copies. With the head convs set to identity on the first
        // K channels and the input non-negative, logits == 3 * v[:, :K].
        let (b, c, k, d) = (1usize, 3usize, 2usize, 2usize);
        let v = Tensor::from_vec(
            &[b, c, d, d, d],
            (0..c * 8).map(|i| i as f32 * 0.25).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&v);
        let vb = create_multi_view(&mut tape, xv).unwrap();

        let mut id_cc = Tensor::zeros(&[c, c, 1, 1, 1]);
        for i in 0..c {
            id_cc.data_mut()[i * c + i] = 1.0;
        }
        let mut id_kc = Tensor::zeros(&[k, c, 1, 1, 1]);
        for i in 0..k {
            id_kc.data_mut()[i * c + i] = 1.0;
        }
        let head = HeadVars {
            conv1_w: tape.leaf(&id_cc),
            conv1_b: tape.leaf(&Tensor::zeros(&[c])),
            conv2_w: tape.leaf(&id_kc),
            conv2_b: tape.leaf(&Tensor::zeros(&[k])),
        };
        let logits = multi_view_fusion(&mut tape, &vb, &head).unwrap();
        assert_eq!(tape.shape(logits), &[b, k, d, d, d]);
        let want: Vec<f32> = v.data()[..k * 8].iter().map(|&x| 3.0 * x).collect();
        assert_eq!(tape.value(logits), &want[..]);
    }

    #[test]
    fn shared_weights_feed_all_three_views() {
        // One weight tensor convs the whole view batch; changing it changes
        // every view's output, proving there is no hidden per-view copy.
        let v = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let run = |wval: f32| -> (Vec<f32>, Vec<f32>, Vec<f32>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(&v);
            let vb = create_multi_view(&mut tape, xv).unwrap();
            let w = Tensor::filled(&[1, 1, 1, 1, 1], wval);
            let wv = tape.leaf(&w);
            let y = tape
                .conv(vb.var, wv, None, ConvSpec::unit_stride((1, 1, 1)))
                .unwrap();
            let yb = ViewBatch { var: y, base_batch: 1 };
            let (xy, yz, xz) = reverse_multi_view(&mut tape, &yb).unwrap();
            (
                tape.value(xy).to_vec(),
                tape.value(yz).to_vec(),
                tape.value(xz).to_vec(),
            )
        };
        let (a1, b1, c1) = run(1.0);
        let (a2, b2, c2) = run(2.0);
        for (one, two) in [(&a1, &a2), (&b1, &b2), (&c1, &c2)] {
            for (x, y) in one.iter().zip(two.iter()) {
                assert_eq!(*y, 2.0 * *x);
            }
        }
    }

    #[test]
    fn block_gradcheck_with_and_without_shift() {
        use crate::tape::gradcheck;
        let x = Tensor::from_vec(
            &[1, 4, 2, 3, 3],
            (0..72).map(|i| ((i * 17 % 31) as f32) / 15.0 - 1.0 + 0.013).collect(),
        )
        .unwrap();
        let w1: Vec<f32> = (0..144).map(|i| ((i * 7 % 23) as f32) / 23.0 - 0.5).collect();
        let w2: Vec<f32> = (0..144).map(|i| ((i * 11 % 19) as f32) / 19.0 - 0.5).collect();
        for placement in [ShiftPlacement::PreConv, ShiftPlacement::BetweenConvs] {
            let report = gradcheck(
                |tape, xv| {
                    let ones = Tensor::filled(&[4], 1.0);
                    let zeros = Tensor::zeros(&[4]);
                    let params = BlockVars {
                        conv1_w: tape.leaf_data(&[4, 4, 1, 3, 3], w1.clone(), false)?,
                        norm1_gamma: tape.leaf(&ones),
                        norm1_beta: tape.leaf(&zeros),
                        conv2_w: tape.leaf_data(&[4, 4, 1, 3, 3], w2.clone(), false)?,
                        norm2_gamma: tape.leaf(&ones),
                        norm2_beta: tape.leaf(&zeros),
                        skip: None,
                    };
                    let shape = BlockShape {
                        in_channels: 4,
                        out_channels: 4,
                        kernel: (1, 3, 3),
                        stride: (1, 1, 1),
                    };
                    let spec = ShiftSpec::quarter();
                    let y =
                        ssh_residual_block(tape, xv, &params, &shape, Some((&spec, placement)))?;
                    // Mean rather than sum keeps the loss O(1); a loss that
                    // grows with element count drowns the central difference
                    // in f32 forward rounding noise.
                    let sq = tape.mul(y, y)?;
                    let total = tape.sum(sq)?;
                    tape.scale(total, 1.0 / 72.0)
                },
                &x,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(
                report.pass,
                "{:?}: max rel err {}",
                placement, report.max_rel_err
            );
        }
    }
}
