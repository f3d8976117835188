//! Intensity windowing, training patch extraction, and augmentation.

use rand::Rng;

use crate::data::VolumeRecord;
use crate::error::{Error, Result};

/// Clamps values to `[lo, hi]` and maps that window affinely onto [0, 1].
/// Monotone: v1 <= v2 always yields w(v1) <= w(v2).
pub fn hu_window(values: &mut [f32], lo: f32, hi: f32) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::argument(format!("window [{}:{}] is not usable", lo, hi)));
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = (v.clamp(lo, hi) - lo) / span;
    }
    Ok(())
}

/// One training example cut from a volume.
#[derive(Debug, Clone)]
pub struct Patch {
    pub extent: [usize; 3],
    pub origin: [usize; 3],
    pub intensity: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Cuts a random patch. With probability `fg_bias` the patch is centered
/// on a uniformly chosen foreground voxel (clamped into bounds); otherwise
/// the origin is uniform over all valid positions. A volume with no
/// foreground always samples uniformly.
pub fn sample_patch<R: Rng>(
    rec: &VolumeRecord,
    extent: [usize; 3],
    fg_bias: f64,
    rng: &mut R,
) -> Result<Patch> {
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::argument(format!("fg_bias must be in [0, 1], got {}", fg_bias)));
    }
    for a in 0..3 {
        if extent[a] == 0 || extent[a] > rec.shape[a] {
            return Err(Error::argument(format!(
                "patch extent {:?} does not fit volume {:?}",
                extent, rec.shape
            )));
        }
    }

    // Draw order is fixed: the bias coin first, then either one foreground
    // ordinal or three origin coordinates. Same seed, same patch.
    let use_fg = rng.gen::<f64>() < fg_bias;
    let origin = if use_fg {
        let fg_count = rec.labels.iter().filter(|&&l| l != 0).count();
        if fg_count == 0 {
            uniform_origin(rec.shape, extent, rng)
        } else {
            let ordinal = rng.gen_range(0..fg_count);
            let flat = rec
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != 0)
                .nth(ordinal)
                .map(|(i, _)| i)
                .unwrap();
            let center = unflatten(flat, rec.shape);
            let mut origin = [0usize; 3];
            for a in 0..3 {
                let half = extent[a] / 2;
                let lo = center[a].saturating_sub(half);
                origin[a] = lo.min(rec.shape[a] - extent[a]);
            }
            origin
        }
    } else {
        uniform_origin(rec.shape, extent, rng)
    };

    let mut intensity = Vec::with_capacity(extent[0] * extent[1] * extent[2]);
    let mut labels = Vec::with_capacity(intensity.capacity());
    for x in 0..extent[0] {
        for y in 0..extent[1] {
            for z in 0..extent[2] {
                let src = ((origin[0] + x) * rec.shape[1] + origin[1] + y) * rec.shape[2]
                    + origin[2]
                    + z;
                intensity.push(rec.intensity[src]);
                labels.push(rec.labels[src]);
            }
        }
    }
    Ok(Patch { extent, origin, intensity, labels })
}

fn uniform_origin<R: Rng>(shape: [usize; 3], extent: [usize; 3], rng: &mut R) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=shape[a] - extent[a]);
    }
    origin
}

fn unflatten(idx: usize, shape: [usize; 3]) -> [usize; 3] {
    let z = idx % shape[2];
    let y = (idx / shape[2]) % shape[1];
    let x = idx / (shape[1] * shape[2]);
    [x, y, z]
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentCfg {
    /// Per-axis mirror probability.
    pub flip_prob: f64,
    /// Probability of a 90/180/270 degree rotation in the (y, z) plane;
    /// applied only when the patch is square in (y, z).
    pub rot90_prob: f64,
    /// Probability of scaling intensities by a factor in [0.9, 1.1].
    pub scale_prob: f64,
    /// Probability of shifting intensities by an offset in [-0.1, 0.1].
    pub shift_prob: f64,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg { flip_prob: 0.2, rot90_prob: 0.2, scale_prob: 0.5, shift_prob: 0.5 }
    }
}

/// Applies spatial and intensity augmentation in place. Spatial transforms
/// move intensities and labels together; intensity transforms leave labels
/// alone. The random draw order is fixed: three flip coins, the rotation
/// coin (plus count when it fires), the scale coin (plus factor), the
/// shift coin (plus offset).
pub fn augment<R: Rng>(patch: &mut Patch, cfg: &AugmentCfg, rng: &mut R) -> Result<()> {
    for p in [cfg.flip_prob, cfg.rot90_prob, cfg.scale_prob, cfg.shift_prob] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::argument(format!("augment probability {} is out of [0, 1]", p)));
        }
    }
    for axis in 0..3 {
        if rng.gen::<f64>() < cfg.flip_prob {
            flip_axis(&mut patch.intensity, patch.extent, axis);
            flip_axis(&mut patch.labels, patch.extent, axis);
        }
    }
    if rng.gen::<f64>() < cfg.rot90_prob && patch.extent[1] == patch.extent[2] {
        let quarter_turns = rng.gen_range(1..4);
        for _ in 0..quarter_turns {
            rot90_yz(&mut patch.intensity, patch.extent);
            rot90_yz(&mut patch.labels, patch.extent);
        }
    }
    if rng.gen::<f64>() < cfg.scale_prob {
        let factor = rng.gen_range(0.9f32..=1.1);
        for v in patch.intensity.iter_mut() {
            *v *= factor;
        }
    }
    if rng.gen::<f64>() < cfg.shift_prob {
        let offset = rng.gen_range(-0.1f32..=0.1);
        for v in patch.intensity.iter_mut() {
            *v += offset;
        }
    }
    Ok(())
}

fn flip_axis<T: Copy>(data: &mut [T], extent: [usize; 3], axis: usize) {
    let [ex, ey, ez] = extent;
    let idx = |x: usize, y: usize, z: usize| (x * ey + y) * ez + z;
    match axis {
        0 => {
            for x in 0..ex / 2 {
                for y in 0..ey {
                    for z in 0..ez {
                        data.swap(idx(x, y, z), idx(ex - 1 - x, y, z));
                    }
                }
            }
        }
        1 => {
            for x in 0..ex {
                for y in 0..ey / 2 {
                    for z in 0..ez {
                        data.swap(idx(x, y, z), idx(x, ey - 1 - y, z));
                    }
                }
            }
        }
        _ => {
            for x in 0..ex {
                for y in 0..ey {
                    for z in 0..ez / 2 {
                        data.swap(idx(x, y, z), idx(x, y, ez - 1 - z));
                    }
                }
            }
        }
    }
}

/// One quarter turn in the (y, z) plane: (y, z) -> (z, e-1-y).
fn rot90_yz<T: Copy + Default>(data: &mut Vec<T>, extent: [usize; 3]) {
    let [ex, e, e2] = extent;
    debug_assert_eq!(e, e2);
    let mut out = vec![T::default(); data.len()];
    let idx = |x: usize, y: usize, z: usize| (x * e + y) * e + z;
    for x in 0..ex {
        for y in 0..e {
            for z in 0..e {
                out[idx(x, z, e - 1 - y)] = data[idx(x, y, z)];
            }
        }
    }
    *data = out;
}
