//! Reverse-mode autodiff on a flat recording tape.
//!
//! Ops append nodes holding the forward value plus whatever the adjoint
//! needs; `backward` replays the records in reverse and accumulates
//! gradients per node. Every op validates shapes up front and errors if its
//! output contains NaN or Inf, so non-finite values surface at the op that
//! produced them instead of corrupting downstream state.

use crate::error::{Error, Result};
use crate::ops::act::{
    leaky_relu_backward, leaky_relu_forward, softmax_channels, softmax_channels_backward,
};
use crate::ops::conv::{
    conv_backward_bias, conv_backward_input, conv_backward_weight, conv_forward,
    conv_transpose_backward_input, conv_transpose_backward_weight, conv_transpose_forward,
    ConvSpec, Dim5,
};
use crate::ops::norm::{instance_norm_backward, instance_norm_forward, InstanceStats};
use crate::ops::shape::{
    concat, inverse_order, is_permutation, permute, slice_axis, slice_axis_adjoint,
};
use crate::ops::shift::slice_shift as shift_kernel;
use crate::tensor::{check_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { requires_grad: bool },
    Permute { x: Var, order: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: InstanceStats },
    LeakyRelu { x: Var, slope: f32 },
    Softmax { x: Var },
    SliceShift { x: Var, n_fwd: usize, n_bwd: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Sum { x: Var },
    DiceCe(Box<DiceCeRecord>),
}

struct DiceCeRecord {
    logits: Var,
    labels: Vec<u8>,
    classes: usize,
    probs: Vec<f32>,
    /// Per (batch, class): sum of probs and intersection sum, for backward.
    sums: Vec<(f64, f64, f64)>, // (sum_p, sum_py, sum_y)
    ce: f64,
    soft_dice: f64,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    /// Exact f64 value for scalar reductions; avoids f32 rounding in
    /// finite-difference comparisons.
    scalar_f64: Option<f64>,
}

/// Smoothing constant in the soft-Dice denominator and numerator; keeps the
/// term defined (and equal to 1) when a class is absent from both inputs.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Var {
        self.push_scalar(shape, data, op, None)
    }

    fn push_scalar(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        op: Op,
        scalar_f64: Option<f64>,
    ) -> Var {
        self.nodes.push(Node { shape, data, op, scalar_f64 });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    // ---- node access ----

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node, exact for reductions.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.scalar_f64.unwrap_or(node.data[0] as f64))
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Copies the node into a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("node shape and data always agree")
    }

    fn dim5(&self, v: Var) -> Result<Dim5> {
        let s = self.shape(v);
        if s.len() != 5 {
            return Err(Error::shape(format!("expected rank-5 tensor, got {:?}", s)));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    // ---- leaves ----

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { requires_grad: t.requires_grad },
        )
    }

    pub fn leaf_data(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "leaf shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf { requires_grad }))
    }

    // ---- ops ----

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !is_permutation(order, shape.len()) {
            return Err(Error::argument(format!(
                "order {:?} is not a permutation of {} axes",
                order,
                shape.len()
            )));
        }
        let (data, out_shape) = permute(self.value(x), &shape, order);
        Ok(self.push(out_shape, data, Op::Permute { x, order: order.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::argument("concat of zero tensors"));
        }
        let rank = self.shape(xs[0]).len();
        if axis >= rank {
            return Err(Error::argument(format!("concat axis {} out of rank {}", axis, rank)));
        }
        for &v in xs {
            let s = self.shape(v);
            if s.len() != rank
                || s.iter()
                    .zip(self.shape(xs[0]))
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat parts disagree off-axis: {:?} vs {:?}",
                    self.shape(xs[0]),
                    s
                )));
            }
        }
        let parts: Vec<(&[f32], &[usize])> =
            xs.iter().map(|&v| (self.value(v), self.shape(v))).collect();
        let (data, out_shape) = concat(&parts, axis);
        Ok(self.push(out_shape, data, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::argument(format!(
                "slice [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let (data, out_shape) = slice_axis(self.value(x), &shape, axis, start, len);
        Ok(self.push(out_shape, data, Op::Slice { x, axis, start, len }))
    }

    fn validate_conv_shapes(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        transpose: bool,
    ) -> Result<(Dim5, usize)> {
        let xs = self.dim5(x)?;
        let ws = self.shape(w);
        if ws.len() != 5 {
            return Err(Error::shape(format!("conv weights must be rank 5, got {:?}", ws)));
        }
        let (ks, kh, kw) = spec.kernel;
        if (ws[2], ws[3], ws[4]) != (ks, kh, kw) {
            return Err(Error::shape(format!(
                "weight kernel dims {:?} disagree with spec {:?}",
                &ws[2..],
                spec.kernel
            )));
        }
        let (cin_axis, cout_axis) = if transpose { (0, 1) } else { (1, 0) };
        if ws[cin_axis] != xs[1] {
            return Err(Error::shape(format!(
                "input has {} channels, weights expect {}",
                xs[1], ws[cin_axis]
            )));
        }
        let cout = ws[cout_axis];
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [cout] {
                return Err(Error::shape(format!("bias shape {:?}, want [{}]", bs, cout)));
            }
        }
        if transpose {
            if spec.kernel != spec.stride {
                return Err(Error::argument(format!(
                    "transposed conv requires kernel == stride, got {:?} vs {:?}",
                    spec.kernel, spec.stride
                )));
            }
            let ok = |k: usize| (1..=2).contains(&k);
            if !(ok(ks) && ok(kh) && ok(kw)) {
                return Err(Error::argument(format!(
                    "transposed conv kernel {:?} outside {{1,2}} per axis",
                    spec.kernel
                )));
            }
        } else {
            if ks % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::argument(format!(
                    "conv kernel {:?} must be odd per axis",
                    spec.kernel
                )));
            }
            if !(ks == 1 || ks == 3) {
                return Err(Error::argument(format!(
                    "slice-axis kernel extent {} outside {{1,3}}",
                    ks
                )));
            }
            let ok = |s: usize| (1..=2).contains(&s);
            if !(ok(spec.stride.0) && ok(spec.stride.1) && ok(spec.stride.2)) {
                return Err(Error::argument(format!(
                    "conv stride {:?} outside {{1,2}} per axis",
                    spec.stride
                )));
            }
        }
        Ok((xs, cout))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, cout) = self.validate_conv_shapes(x, w, b, &spec, false)?;
        let (data, ys) = conv_forward(
            self.value(x),
            xs,
            self.value(w),
            cout,
            b.map(|v| self.value(v)),
            &spec,
        );
        check_finite(&data, "conv")?;
        Ok(self.push(ys.to_vec(), data, Op::Conv { x, w, b, spec }))
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, cout) = self.validate_conv_shapes(x, w, b, &spec, true)?;
        let (data, ys) = conv_transpose_forward(
            self.value(x),
            xs,
            self.value(w),
            cout,
            b.map(|v| self.value(v)),
            &spec,
        );
        check_finite(&data, "conv_transpose")?;
        Ok(self.push(ys.to_vec(), data, Op::ConvTranspose { x, w, b, spec }))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xs = self.dim5(x)?;
        let [b, c, s, h, w] = xs;
        let spatial = s * h * w;
        if spatial < 2 {
            return Err(Error::Degenerate(format!(
                "instance norm needs at least 2 spatial elements per instance, got {}",
                spatial
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "affine shapes {:?}/{:?}, want [{}]",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        let (data, stats) = instance_norm_forward(
            self.value(x),
            b,
            c,
            spatial,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        check_finite(&data, "instance_norm")?;
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::InstanceNorm { x, gamma, beta, stats },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let data = leaky_relu_forward(self.value(x), slope);
        check_finite(&data, "leaky_relu")?;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::LeakyRelu { x, slope }))
    }

    /// Softmax over axis 1 of a rank >= 2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("softmax needs rank >= 2, got {:?}", shape)));
        }
        let k = shape[1];
        let inner: usize = shape[2..].iter().product();
        let data = softmax_channels(self.value(x), k, inner);
        check_finite(&data, "softmax")?;
        Ok(self.push(shape, data, Op::Softmax { x }))
    }

    pub fn slice_shift(&mut self, x: Var, n_fwd: usize, n_bwd: usize) -> Result<Var> {
        let xs = self.dim5(x)?;
        if n_fwd + n_bwd > xs[1] {
            return Err(Error::argument(format!(
                "shift counts {}+{} exceed {} channels",
                n_fwd, n_bwd, xs[1]
            )));
        }
        let data = shift_kernel(self.value(x), xs, n_fwd, n_bwd, false);
        Ok(self.push(xs.to_vec(), data, Op::SliceShift { x, n_fwd, n_bwd }))
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{} of {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "add")?;
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&data, "add")?;
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&data, "mul")?;
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let data: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        check_finite(&data, "scale")?;
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::Scale { x, c }))
    }

    /// Full reduction to a scalar node (shape `[1]`).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|v| *v as f64).sum();
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "sum" });
        }
        Ok(self.push_scalar(vec![1], vec![total as f32], Op::Sum { x }, Some(total)))
    }

    /// Cross-entropy plus (1 - soft Dice) over `[B, K, ...]` logits against
    /// integer labels, averaged over the batch. Labels are one value per
    /// spatial position, flattened batch-major.
    pub fn dice_ce(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "dice_ce needs [B, K, spatial...], got {:?}",
                shape
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if labels.len() != b * inner {
            return Err(Error::shape(format!(
                "labels have {} elements, logits imply {}",
                labels.len(),
                b * inner
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::argument(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let probs = softmax_channels(self.value(logits), k, inner);
        check_finite(&probs, "dice_ce")?;

        let mut ce_total = 0.0f64;
        let mut dice_total = 0.0f64;
        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); b * k];
        for bb in 0..b {
            let base = bb * k * inner;
            let lbase = bb * inner;
            let mut ce = 0.0f64;
            for j in 0..inner {
                let y = labels[lbase + j] as usize;
                let p = probs[base + y * inner + j] as f64;
                ce -= p.max(1e-12).ln();
                for ch in 0..k {
                    let s = &mut sums[bb * k + ch];
                    s.0 += probs[base + ch * inner + j] as f64;
                    if ch == y {
                        s.1 += probs[base + ch * inner + j] as f64;
                        s.2 += 1.0;
                    }
                }
            }
            ce /= inner as f64;
            let mut dice = 0.0f64;
            for ch in 0..k {
                let (sum_p, sum_py, sum_y) = sums[bb * k + ch];
                dice += (2.0 * sum_py + DICE_SMOOTH) / (sum_p + sum_y + DICE_SMOOTH);
            }
            dice /= k as f64;
            ce_total += ce;
            dice_total += dice;
        }
        let ce = ce_total / b as f64;
        let soft_dice = dice_total / b as f64;
        let loss = ce + (1.0 - soft_dice);
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "dice_ce" });
        }
        Ok(self.push_scalar(
            vec![1],
            vec![loss as f32],
            Op::DiceCe(Box::new(DiceCeRecord {
                logits,
                labels: labels.to_vec(),
                classes: k,
                probs,
                sums,
                ce,
                soft_dice,
            })),
            Some(loss),
        ))
    }

    /// (cross-entropy, soft Dice) components of the most recent `dice_ce`
    /// node, exact in f64.
    pub fn dice_ce_parts(&self, v: Var) -> Option<(f64, f64)> {
        match &self.nodes[v.0].op {
            Op::DiceCe(rec) => Some((rec.ce, rec.soft_dice)),
            _ => None,
        }
    }

    // ---- backward ----

    fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls;
    /// afterwards every leaf with `requires_grad` has a gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Propagate through per-pass scratch buffers, folded into the
        // persistent gradients at the end. Reusing the persistent buffers as
        // scratch would re-propagate stale gradients on a second call.
        let mut pass: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if pass[id].is_none() {
                continue;
            }
            let g = pass[id].take().expect("checked above");
            {
                let nodes = &self.nodes;
                let grads = &mut pass;
                match &nodes[id].op {
                    Op::Leaf { .. } => {}
                    Op::Permute { x, order } => {
                        let inv = inverse_order(order);
                        let (dx, _) = permute(&g, &nodes[id].shape, &inv);
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::Concat { xs, axis } => {
                        let mut at = 0usize;
                        for &part in xs {
                            let len = nodes[part.0].shape[*axis];
                            let (dpart, _) =
                                slice_axis(&g, &nodes[id].shape, *axis, at, len);
                            Self::accumulate(grads, part, &dpart);
                            at += len;
                        }
                    }
                    Op::Slice { x, axis, start, len } => {
                        let dx =
                            slice_axis_adjoint(&g, &nodes[x.0].shape, *axis, *start, *len);
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::Conv { x, w, b, spec } => {
                        let xs: Dim5 = nodes[x.0].shape.clone().try_into().expect("rank 5");
                        let ys: Dim5 = nodes[id].shape.clone().try_into().expect("rank 5");
                        let dx = conv_backward_input(&g, ys, &nodes[w.0].data, xs, spec);
                        Self::accumulate(grads, *x, &dx);
                        let dw = conv_backward_weight(&g, ys, &nodes[x.0].data, xs, spec);
                        Self::accumulate(grads, *w, &dw);
                        if let Some(bv) = b {
                            let db = conv_backward_bias(&g, ys);
                            Self::accumulate(grads, *bv, &db);
                        }
                    }
                    Op::ConvTranspose { x, w, b, spec } => {
                        let xs: Dim5 = nodes[x.0].shape.clone().try_into().expect("rank 5");
                        let ys: Dim5 = nodes[id].shape.clone().try_into().expect("rank 5");
                        let dx = conv_transpose_backward_input(&g, ys, &nodes[w.0].data, xs, spec);
                        Self::accumulate(grads, *x, &dx);
                        let dw = conv_transpose_backward_weight(&g, ys, &nodes[x.0].data, xs, spec);
                        Self::accumulate(grads, *w, &dw);
                        if let Some(bv) = b {
                            let db = conv_backward_bias(&g, ys);
                            Self::accumulate(grads, *bv, &db);
                        }
                    }
                    Op::InstanceNorm { x, gamma, beta, stats } => {
                        let s = &nodes[x.0].shape;
                        let (b_, c) = (s[0], s[1]);
                        let spatial: usize = s[2..].iter().product();
                        let (dx, dgamma, dbeta) = instance_norm_backward(
                            &g,
                            &nodes[x.0].data,
                            b_,
                            c,
                            spatial,
                            &nodes[gamma.0].data,
                            stats,
                        );
                        Self::accumulate(grads, *x, &dx);
                        Self::accumulate(grads, *gamma, &dgamma);
                        Self::accumulate(grads, *beta, &dbeta);
                    }
                    Op::LeakyRelu { x, slope } => {
                        let dx = leaky_relu_backward(&g, &nodes[x.0].data, *slope);
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::Softmax { x } => {
                        let s = &nodes[id].shape;
                        let inner: usize = s[2..].iter().product();
                        let dx =
                            softmax_channels_backward(&g, &nodes[id].data, s[1], inner);
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::SliceShift { x, n_fwd, n_bwd } => {
                        let xs: Dim5 = nodes[x.0].shape.clone().try_into().expect("rank 5");
                        let dx = shift_kernel(&g, xs, *n_fwd, *n_bwd, true);
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::Add { a, b } => {
                        Self::accumulate(grads, *a, &g);
                        Self::accumulate(grads, *b, &g);
                    }
                    Op::Mul { a, b } => {
                        let da: Vec<f32> =
                            g.iter().zip(&nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                        let db: Vec<f32> =
                            g.iter().zip(&nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                        Self::accumulate(grads, *a, &da);
                        Self::accumulate(grads, *b, &db);
                    }
                    Op::Scale { x, c } => {
                        let dx: Vec<f32> = g.iter().map(|gv| gv * c).collect();
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::Sum { x } => {
                        let dx = vec![g[0]; nodes[x.0].data.len()];
                        Self::accumulate(grads, *x, &dx);
                    }
                    Op::DiceCe(rec) => {
                        let dz = dice_ce_backward(rec, &nodes[rec.logits.0].shape);
                        let scaled: Vec<f32> = dz.iter().map(|v| v * g[0]).collect();
                        Self::accumulate(grads, rec.logits, &scaled);
                    }
                }
            }
            pass[id] = Some(g);
        }

        for (id, pg) in pass.into_iter().enumerate() {
            if let Some(pg) = pg {
                Self::accumulate(&mut self.grads, Var(id), &pg);
            }
        }

        // Leaves that asked for a gradient but received no flow get zeros so
        // callers can always read a buffer of the right size.
        for id in 0..self.nodes.len() {
            if let Op::Leaf { requires_grad: true } = self.nodes[id].op {
                if self.grads[id].is_none() {
                    self.grads[id] = Some(vec![0.0; self.nodes[id].data.len()]);
                }
            }
        }
        Ok(())
    }
}

/// d(ce + 1 - soft_dice)/d logits, derived through the softmax in one step.
fn dice_ce_backward(rec: &DiceCeRecord, logit_shape: &[usize]) -> Vec<f32> {
    let (b, k) = (logit_shape[0], rec.classes);
    let inner: usize = logit_shape[2..].iter().product();
    let mut dz = vec![0.0f32; rec.probs.len()];
    let bn = b as f64;
    let vn = inner as f64;
    crate::parallel::for_each_chunk(&mut dz, k * inner, |bb, out| {
        let base = bb * k * inner;
        let lbase = bb * inner;
        let mut gs = vec![0.0f64; k];
        for j in 0..inner {
            let y = rec.labels[lbase + j] as usize;
            // dL_dice/dp for each class at this voxel.
            // d_k = (2*S_k + eps) / (P_k + G_k + eps); dL/dd_k = -1/K.
            // dd_k/dp_kj = (2*[y==k]*(P+G+eps) - (2S+eps)) / (P+G+eps)^2.
            let mut gdot = 0.0f64; // sum_k g_k p_k for the softmax VJP
            for ch in 0..k {
                let (sum_p, sum_py, sum_y) = rec.sums[bb * k + ch];
                let denom = sum_p + sum_y + DICE_SMOOTH;
                let ind = if ch == y { 1.0 } else { 0.0 };
                let dd = (2.0 * ind * denom - (2.0 * sum_py + DICE_SMOOTH)) / (denom * denom);
                let gch = -dd / k as f64;
                gs[ch] = gch;
                gdot += gch * rec.probs[base + ch * inner + j] as f64;
            }
            for ch in 0..k {
                let p = rec.probs[base + ch * inner + j] as f64;
                let ind = if ch == y { 1.0 } else { 0.0 };
                // CE through softmax collapses to (p - onehot) / voxels.
                let d_ce = (p - ind) / vn;
                let d_dice = p * (gs[ch] - gdot);
                out[ch * inner + j] = ((d_ce + d_dice) / bn) as f32;
            }
        }
    });
    dz
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Checks d(f)/d(x) against central differences with step `h`.
///
/// `f` must build a scalar from the given tape and input var. Relative error
/// is `|a - n| / max(|a|, |n|, 1)`, so elements with near-zero gradients are
/// compared absolutely. Inputs should sit away from activation kinks by more
/// than `h`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut xt = x.clone();
    xt.requires_grad = true;
    let xv = tape.leaf(&xt);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .expect("requires_grad leaf always has a gradient after backward")
        .to_vec();

    let eval = |data: &[f32]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf_data(x.shape(), data.to_vec(), false)?;
        let l = f(&mut t, v)?;
        t.scalar(l)
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        let xp = orig + h as f32;
        let xm = orig - h as f32;
        probe[i] = xp;
        let fp = eval(&probe)?;
        probe[i] = xm;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (xp as f64 - xm as f64);
        let a = analytic[i] as f64;
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1.0);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_rel_err: max_rel, max_abs_err: max_abs, pass: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_square_gradient_is_two_x() {
        // loss = sum(x * x): d/dx = 2x.
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Argument(_))));
    }

    #[test]
    fn unused_grad_leaf_gets_zeros() {
        let used = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let orphan = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap().with_grad();
        let mut tape = Tape::new();
        let uv = tape.leaf(&used);
        let ov = tape.leaf(&orphan);
        let loss = tape.sum(uv).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ov).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates_through_both_paths() {
        // loss = sum(x + x) => grad 2 per element.
        let x = Tensor::from_vec(&[2], vec![1.0, 5.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.add(xv, xv).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn nan_from_op_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![f32::MAX]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        // MAX * MAX overflows to Inf.
        assert!(matches!(
            tape.mul(xv, xv),
            Err(Error::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn gradcheck_passes_for_composite_op_chain() {
        // leaky_relu(conv-free chain): scale, add, mul, sum. Inputs kept
        // away from the relu kink.
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.2, 0.8, 1.5, -0.6, 0.9]).unwrap();
        let report = gradcheck(
            |tape, xv| {
                let a = tape.scale(xv, 1.7)?;
                let b = tape.leaky_relu(a, 0.01)?;
                let c = tape.mul(b, b)?;
                tape.sum(c)
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradcheck_catches_a_wrong_gradient() {
        // Negative control: the analytic pass (first call) sees sum(x*x)
        // but every numeric probe sees 2*sum(x*x), so the measured slope is
        // twice the reported gradient and the check must fail.
        use std::cell::Cell;
        let x = Tensor::from_vec(&[2], vec![0.4, 0.7]).unwrap();
        let calls = Cell::new(0u32);
        let report = gradcheck(
            |tape, xv| {
                let n = calls.get();
                calls.set(n + 1);
                let sq = tape.mul(xv, xv)?;
                let s = tape.sum(sq)?;
                if n == 0 {
                    Ok(s)
                } else {
                    tape.scale(s, 2.0)
                }
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!report.pass, "desynced function must fail, rel {}", report.max_rel_err);
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn gradcheck_conv_and_norm_chain() {
        let x = Tensor::from_vec(
            &[1, 2, 2, 3, 3],
            (0..36).map(|i| ((i * 7 % 13) as f32) / 6.5 - 0.9).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[2, 2, 1, 3, 3],
            (0..36).map(|i| ((i * 5 % 11) as f32) / 11.0 - 0.45).collect(),
        )
        .unwrap();
        let report = gradcheck(
            |tape, xv| {
                let wv = tape.leaf_data(w.shape(), w.data().to_vec(), false)?;
                let y = tape.conv(xv, wv, None, ConvSpec::unit_stride((1, 3, 3)))?;
                let y2 = tape.mul(y, y)?;
                tape.sum(y2)
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "conv chain max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dice_ce_uniform_logits_gives_ln2() {
        // K=2, uniform logits, balanced labels: CE = ln 2 and soft dice has
        // p = 0.5 everywhere.
        let logits = Tensor::zeros(&[1, 2, 1, 2, 2]);
        let labels = vec![0u8, 1, 0, 1];
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        let loss = tape.dice_ce(lv, &labels).unwrap();
        let (ce, _dice) = tape.dice_ce_parts(loss).unwrap();
        assert!((ce - (2.0f64).ln()).abs() < 1e-9, "ce {}", ce);
    }

    #[test]
    fn dice_ce_perfect_prediction_loss_near_zero() {
        // Strong logits toward the true class: CE -> 0, soft dice -> 1.
        let labels = vec![0u8, 1, 1, 0];
        let mut data = vec![0.0f32; 8];
        for (j, &l) in labels.iter().enumerate() {
            data[l as usize * 4 + j] = 50.0;
        }
        let logits = Tensor::from_vec(&[1, 2, 1, 2, 2], data).unwrap();
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        let loss = tape.dice_ce(lv, &labels).unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-4);
    }

    #[test]
    fn dice_ce_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 2, 1, 1, 2]);
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        assert!(matches!(
            tape.dice_ce(lv, &[0, 2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dice_ce_gradcheck() {
        let logits = Tensor::from_vec(
            &[2, 3, 1, 2, 2],
            (0..24).map(|i| ((i * 11 % 17) as f32) / 8.5 - 1.0).collect(),
        )
        .unwrap();
        let labels: Vec<u8> = vec![0, 1, 2, 1, 2, 0, 0, 1];
        let report = gradcheck(
            |tape, xv| tape.dice_ce(xv, &labels),
            &logits,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "dice_ce max rel err {}", report.max_rel_err);
    }
}
