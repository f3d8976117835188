//! Training loop, optimizers, learning-rate schedule, and sliding-window
//! inference.
//!
//! Everything is seeded and single-stream: one RNG drives patch sampling
//! and augmentation in a fixed draw order, parameters update in store
//! order, and all reductions run through the deterministic parallel
//! helpers, so a (seed, config) pair reproduces a run bitwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::preprocess::{augment, sample_patch, AugmentCfg};
use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::metrics::{dice, LabelVolume};
use crate::network::SshUnet;
use crate::ops::act::softmax_channels;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adamw" => Ok(OptimKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{}` (sgd, adamw)", other))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Heavy-ball momentum (SGD only).
    pub momentum: f64,
    /// AdamW moment decays, epsilon, and decoupled weight decay.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd() -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            lr: 0.01,
            warmup_steps: 50,
            momentum: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }

    pub fn adamw() -> Self {
        OptimConfig { kind: OptimKind::AdamW, lr: 4e-4, ..OptimConfig::sgd() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{} must be in [0, 1), got {}", name, b));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup over
/// `warmup_steps` (reaching `base` at the last warmup step), then cosine
/// decay to zero. Degenerate totals fall back to the constant base rate.
pub fn lr_at(base: f64, warmup_steps: usize, total_steps: usize, step: usize) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

enum OptState {
    Sgd { velocity: Vec<f64> },
    AdamW { m: Vec<f64>, v: Vec<f64> },
}

/// Stateful optimizer over a parameter store. Slot order is store order;
/// update arithmetic runs in f64 and writes back f32.
pub struct Optimizer {
    cfg: OptimConfig,
    total_steps: usize,
    state: Vec<OptState>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, total_steps: usize, param_sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let state = param_sizes
            .iter()
            .map(|&n| match cfg.kind {
                OptimKind::Sgd => OptState::Sgd { velocity: vec![0.0; n] },
                OptimKind::AdamW => OptState::AdamW { m: vec![0.0; n], v: vec![0.0; n] },
            })
            .collect();
        Ok(Optimizer { cfg, total_steps, state })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(self.cfg.lr, self.cfg.warmup_steps, self.total_steps, step)
    }

    /// Applies one update. `grads` must be parallel to the store ordering
    /// this optimizer was sized from.
    pub fn apply(
        &mut self,
        step: usize,
        params: &mut crate::network::ParamStore,
        grads: &[Vec<f32>],
    ) -> Result<()> {
        if grads.len() != self.state.len() {
            return Err(Error::argument(format!(
                "got {} gradient slots, optimizer has {}",
                grads.len(),
                self.state.len()
            )));
        }
        let lr = self.lr_at(step);
        let c = &self.cfg;
        for ((slot, grad), (_, tensor)) in self.state.iter_mut().zip(grads).zip(params.iter_mut()) {
            let data = tensor.data_mut();
            match slot {
                OptState::Sgd { velocity } => {
                    for i in 0..data.len() {
                        let g = grad[i] as f64;
                        velocity[i] = c.momentum * velocity[i] + g;
                        data[i] = (data[i] as f64 - lr * velocity[i]) as f32;
                    }
                }
                OptState::AdamW { m, v } => {
                    let t = (step + 1) as i32;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..data.len() {
                        let g = grad[i] as f64;
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        let w = data[i] as f64;
                        data[i] =
                            (w - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_extent: [usize; 3],
    /// Validate every this many steps (and always at the end); 0 means
    /// final validation only.
    pub val_every: usize,
    /// Probability a sampled patch centers on a foreground voxel.
    pub fg_bias: f64,
    pub augment: Option<AugmentCfg>,
    pub optim: OptimConfig,
    /// Sliding-window overlap fraction for validation inference.
    pub infer_overlap: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.patch_extent.iter().any(|&e| e == 0) {
            problems.push(format!("patch_extent {:?} has a zero extent", self.patch_extent));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            problems.push(format!("fg_bias must be in [0, 1], got {}", self.fg_bias));
        }
        if !(0.0..1.0).contains(&self.infer_overlap) {
            problems.push(format!("infer_overlap must be in [0, 1), got {}", self.infer_overlap));
        }
        if let Err(e) = self.optim.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub final_val_dice: Option<f64>,
}

/// Renders history as CSV with a fixed `step,loss,lr,val_dice` header and
/// six-decimal formatting; `val_dice` is blank on non-validation steps.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("step,loss,lr,val_dice\n");
    for row in rows {
        match row.val_dice {
            Some(d) => {
                s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", row.step, row.loss, row.lr, d))
            }
            None => s.push_str(&format!("{},{:.6},{:.6},\n", row.step, row.loss, row.lr)),
        }
    }
    s
}

/// Mean Dice over classes 1..K present in ground truth or prediction;
/// `None` when no foreground class appears anywhere.
fn macro_dice(gt: &LabelVolume, pred: &LabelVolume, num_classes: usize) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for class in 1..num_classes {
        let class = class as u8;
        if gt.contains_class(class) || pred.contains_class(class) {
            scores.push(dice(gt, pred, class)?);
        }
    }
    if scores.is_empty() {
        Ok(None)
    } else {
        Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Index mirrored into [0, n): reflect(-1) = 1, reflect(n) = n-2.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Whole-volume inference by tiling with overlapping patches. Volumes
/// smaller than the patch are reflect-padded up to it. Class probabilities
/// are averaged uniformly where tiles overlap (every tile covering a voxel
/// counts once), then argmaxed.
pub fn sliding_window_infer(
    net: &SshUnet,
    vol: &VolumeRecord,
    patch: [usize; 3],
    overlap: f64,
) -> Result<LabelVolume> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::argument(format!("overlap must be in [0, 1), got {}", overlap)));
    }
    if patch.iter().any(|&p| p == 0) {
        return Err(Error::argument(format!("patch extent {:?} has a zero axis", patch)));
    }
    let k = net.cfg.num_classes;
    let shape = vol.shape;
    let padded = [
        shape[0].max(patch[0]),
        shape[1].max(patch[1]),
        shape[2].max(patch[2]),
    ];
    let pad_lo = [
        (padded[0] - shape[0]) / 2,
        (padded[1] - shape[1]) / 2,
        (padded[2] - shape[2]) / 2,
    ];
    let padded_numel = padded[0] * padded[1] * padded[2];

    let mut canvas = vec![0f32; padded_numel];
    for x in 0..padded[0] {
        let sx = reflect(x as isize - pad_lo[0] as isize, shape[0]);
        for y in 0..padded[1] {
            let sy = reflect(y as isize - pad_lo[1] as isize, shape[1]);
            for z in 0..padded[2] {
                let sz = reflect(z as isize - pad_lo[2] as isize, shape[2]);
                canvas[(x * padded[1] + y) * padded[2] + z] =
                    vol.intensity[(sx * shape[1] + sy) * shape[2] + sz];
            }
        }
    }

    let positions = |ext: usize, p: usize| -> Vec<usize> {
        let stride = ((p as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        let mut out = Vec::new();
        let mut pos = 0usize;
        loop {
            out.push(pos.min(ext - p));
            if pos + p >= ext {
                break;
            }
            pos += stride;
        }
        out.dedup();
        out
    };
    let xs = positions(padded[0], patch[0]);
    let ys = positions(padded[1], patch[1]);
    let zs = positions(padded[2], patch[2]);

    // Probability sums per class plus a per-voxel tile count. Argmax of
    // the mean equals argmax of the sum because the count is shared by
    // all classes of a voxel; the division is kept for clarity.
    let mut prob_sum = vec![0f32; k * padded_numel];
    let mut cover = vec![0f32; padded_numel];
    let patch_numel = patch[0] * patch[1] * patch[2];
    for &ox in &xs {
        for &oy in &ys {
            for &oz in &zs {
                let mut tile = Vec::with_capacity(patch_numel);
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            tile.push(
                                canvas[((ox + x) * padded[1] + oy + y) * padded[2] + oz + z],
                            );
                        }
                    }
                }
                let input = Tensor::from_vec(&[1, 1, patch[0], patch[1], patch[2]], tile)?;
                let logits = net.infer(&input)?;
                let probs = softmax_channels(logits.data(), k, patch_numel);
                for c in 0..k {
                    for x in 0..patch[0] {
                        for y in 0..patch[1] {
                            for z in 0..patch[2] {
                                let local = (x * patch[1] + y) * patch[2] + z;
                                let global =
                                    ((ox + x) * padded[1] + oy + y) * padded[2] + oz + z;
                                prob_sum[c * padded_numel + global] +=
                                    probs[c * patch_numel + local];
                            }
                        }
                    }
                }
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            cover[((ox + x) * padded[1] + oy + y) * padded[2] + oz + z] += 1.0;
                        }
                    }
                }
            }
        }
    }

    let mut labels = vec![0u8; shape[0] * shape[1] * shape[2]];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let global =
                    ((x + pad_lo[0]) * padded[1] + y + pad_lo[1]) * padded[2] + z + pad_lo[2];
                let n = cover[global];
                debug_assert!(n > 0.0, "voxel left uncovered by the tiling");
                let mut best = 0usize;
                let mut best_p = f32::NEG_INFINITY;
                for c in 0..k {
                    let p = prob_sum[c * padded_numel + global] / n;
                    if p > best_p {
                        best_p = p;
                        best = c;
                    }
                }
                labels[(x * shape[1] + y) * shape[2] + z] = best as u8;
            }
        }
    }
    LabelVolume::new(shape, vol.spacing, labels)
}

/// Mean macro Dice of sliding-window predictions against ground truth
/// over a set of volumes.
pub fn validate_dice(
    net: &SshUnet,
    vols: &[VolumeRecord],
    patch: [usize; 3],
    overlap: f64,
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for vol in vols {
        let pred = sliding_window_infer(net, vol, patch, overlap)?;
        if let Some(d) = macro_dice(&vol.label_volume(), &pred, net.cfg.num_classes)? {
            scores.push(d);
        }
    }
    if scores.is_empty() {
        Ok(None)
    } else {
        Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Runs the optimization loop, mutating the network parameters in place.
/// A non-finite loss or gradient aborts with step and diagnostic context
/// instead of continuing to train on garbage.
pub fn train(
    net: &mut SshUnet,
    train_vols: &[VolumeRecord],
    val_vols: &[VolumeRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_vols.is_empty() {
        return Err(Error::argument("no training volumes"));
    }
    let [px, py, pz] = cfg.patch_extent;
    let patch_numel = px * py * pz;
    let param_sizes: Vec<usize> = net.params.iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = Optimizer::new(cfg.optim, cfg.steps, &param_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size * patch_numel);
        let mut labels = Vec::with_capacity(cfg.batch_size * patch_numel);
        for _ in 0..cfg.batch_size {
            let vol = &train_vols[rng.gen_range(0..train_vols.len())];
            let mut patch = sample_patch(vol, cfg.patch_extent, cfg.fg_bias, &mut rng)?;
            if let Some(aug) = &cfg.augment {
                augment(&mut patch, aug, &mut rng)?;
            }
            batch.extend_from_slice(&patch.intensity);
            labels.extend_from_slice(&patch.labels);
        }

        let abort = |reason: String| Error::TrainAbort { step, reason };
        let mut tape = Tape::new();
        let step_result: Result<(f64, Vec<Vec<f32>>)> = (|| {
            let bindings = net.bind(&mut tape, true)?;
            let x = tape.leaf_data(&[cfg.batch_size, 1, px, py, pz], batch, false)?;
            let logits = net.forward(&mut tape, x, &bindings)?;
            let loss = tape.dice_ce(logits, &labels)?;
            let loss_value = tape.scalar(loss)?;
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(names.len());
            for (name, size) in names.iter().zip(&param_sizes) {
                let v = bindings.var(name)?;
                grads.push(match tape.grad(v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; *size],
                });
            }
            Ok((loss_value, grads))
        })();
        let (loss_value, grads) = match step_result {
            Ok(r) => r,
            // Forward or backward hit non-finite values: abort with step
            // context instead of surfacing a bare numeric error.
            Err(Error::NonFinite { op }) => {
                return Err(abort(format!("non-finite values in `{}`", op)))
            }
            Err(e) => return Err(e),
        };

        let grad_norm_sq: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum();
        let lr = optimizer.lr_at(step);
        if !loss_value.is_finite() || !grad_norm_sq.is_finite() {
            return Err(abort(format!(
                "loss {} / grad norm {} (lr {:.6})",
                loss_value,
                grad_norm_sq.sqrt(),
                lr
            )));
        }

        optimizer.apply(step, &mut net.params, &grads)?;

        let validate_now = (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)
            || step + 1 == cfg.steps;
        let val_dice = if validate_now && !val_vols.is_empty() {
            validate_dice(net, val_vols, cfg.patch_extent, cfg.infer_overlap)?
        } else {
            None
        };
        history.push(HistoryRow { step, loss: loss_value, lr, val_dice });
    }

    let final_val_dice = history.iter().rev().find_map(|r| r.val_dice);
    Ok(TrainReport { history, final_val_dice })
}
