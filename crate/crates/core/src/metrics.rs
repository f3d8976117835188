//! Segmentation quality metrics: per-class Dice overlap and normalized
//! surface distance (NSD), plus per-case and cross-case aggregation.
//!
//! Conventions, pinned here and relied on by the acceptance suite:
//! * class 0 is background and is never scored;
//! * a class absent from both ground truth and prediction is excluded from
//!   a case's report (`None`), not counted as a trivial success;
//! * inside the metric functions, empty-vs-empty scores 1.0 and
//!   empty-vs-nonempty scores 0.0.

use crate::error::{Error, Result};

/// A labeled volume with physical voxel spacing in millimetres. Data is
/// row-major over `[x, y, z]` with z fastest.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        let numel = shape[0] * shape[1] * shape[2];
        if data.len() != numel {
            return Err(Error::shape(format!(
                "label volume {:?} needs {} voxels, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::argument(format!("spacing must be positive, got {:?}", spacing)));
        }
        Ok(LabelVolume { shape, spacing, data })
    }

    #[inline]
    fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[(x * self.shape[1] + y) * self.shape[2] + z]
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.data.iter().any(|&v| v == class)
    }
}

fn check_comparable(a: &LabelVolume, b: &LabelVolume, spacing_matters: bool) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "volumes have different shapes {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    if spacing_matters && a.spacing != b.spacing {
        return Err(Error::argument(format!(
            "volumes have different spacings {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Dice overlap of one class: 2|A intersect B| / (|A| + |B|). Both masks
/// empty scores 1.0; exactly one empty scores 0.0 (the formula already
/// does, since the intersection is empty).
pub fn dice(gt: &LabelVolume, pred: &LabelVolume, class: u8) -> Result<f64> {
    check_comparable(gt, pred, false)?;
    let (mut a, mut b, mut i) = (0u64, 0u64, 0u64);
    for (g, p) in gt.data.iter().zip(pred.data.iter()) {
        let ga = *g == class;
        let pb = *p == class;
        a += ga as u64;
        b += pb as u64;
        i += (ga && pb) as u64;
    }
    if a + b == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * i as f64 / (a + b) as f64)
    }
}

/// Boundary of a class mask under 6-connectivity: a class voxel is boundary
/// when any face neighbor has a different label; space outside the volume
/// counts as background.
fn boundary(v: &LabelVolume, class: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = v.shape;
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if v.at(x, y, z) != class {
                    continue;
                }
                let neighbor = |dx: isize, dy: isize, dz: isize| -> u8 {
                    let (px, py, pz) =
                        (x as isize + dx, y as isize + dy, z as isize + dz);
                    if px < 0
                        || py < 0
                        || pz < 0
                        || px >= nx as isize
                        || py >= ny as isize
                        || pz >= nz as isize
                    {
                        0
                    } else {
                        v.at(px as usize, py as usize, pz as usize)
                    }
                };
                let exposed = neighbor(-1, 0, 0) != class
                    || neighbor(1, 0, 0) != class
                    || neighbor(0, -1, 0) != class
                    || neighbor(0, 1, 0) != class
                    || neighbor(0, 0, -1) != class
                    || neighbor(0, 0, 1) != class;
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Count of points in `from` whose nearest point in `to` lies within
/// `tau_mm`, by exhaustive squared-distance search in millimetres.
fn within_tolerance(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    spacing: [f32; 3],
    tau_mm: f64,
) -> usize {
    let sp = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let tau_sq = tau_mm * tau_mm;
    from.iter()
        .filter(|p| {
            to.iter().any(|q| {
                let dx = (p[0] as f64 - q[0] as f64) * sp[0];
                let dy = (p[1] as f64 - q[1] as f64) * sp[1];
                let dz = (p[2] as f64 - q[2] as f64) * sp[2];
                dx * dx + dy * dy + dz * dz <= tau_sq
            })
        })
        .count()
}

/// Normalized surface distance at tolerance `tau_mm`: the fraction of
/// boundary voxels (of both masks pooled) whose nearest opposing boundary
/// voxel lies within the tolerance. Distances are exact voxel-center
/// distances scaled by the physical spacing.
pub fn nsd(gt: &LabelVolume, pred: &LabelVolume, class: u8, tau_mm: f64) -> Result<f64> {
    check_comparable(gt, pred, true)?;
    if !(tau_mm >= 0.0) {
        return Err(Error::argument(format!("tolerance must be non-negative, got {}", tau_mm)));
    }
    let bg = boundary(gt, class);
    let bp = boundary(pred, class);
    if bg.is_empty() && bp.is_empty() {
        return Ok(1.0);
    }
    if bg.is_empty() || bp.is_empty() {
        return Ok(0.0);
    }
    let hits =
        within_tolerance(&bg, &bp, gt.spacing, tau_mm) + within_tolerance(&bp, &bg, gt.spacing, tau_mm);
    Ok(hits as f64 / (bg.len() + bp.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub dice: f64,
    pub nsd: f64,
}

/// Metrics of one case. Index i holds class i+1; `None` means the class
/// appears in neither volume and is excluded from aggregation.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub id: String,
    pub per_class: Vec<Option<ClassScore>>,
}

pub fn evaluate_case(
    id: &str,
    gt: &LabelVolume,
    pred: &LabelVolume,
    num_classes: usize,
    tau_mm: f64,
) -> Result<CaseReport> {
    check_comparable(gt, pred, true)?;
    if num_classes < 2 || num_classes > 256 {
        return Err(Error::argument(format!(
            "num_classes must be in 2..=256, got {}",
            num_classes
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes - 1);
    for class in 1..num_classes {
        let class = class as u8;
        if !gt.contains_class(class) && !pred.contains_class(class) {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(ClassScore {
            dice: dice(gt, pred, class)?,
            nsd: nsd(gt, pred, class, tau_mm)?,
        }));
    }
    Ok(CaseReport { id: id.to_string(), per_class })
}

/// Cross-case mean for one class. `cases` counts only cases where the
/// class was present somewhere.
#[derive(Debug, Clone, Copy)]
pub struct ClassAggregate {
    pub class: u8,
    pub cases: usize,
    pub mean_dice: f64,
    pub mean_nsd: f64,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Index i holds class i+1; `None` when no case contained the class.
    pub per_class: Vec<Option<ClassAggregate>>,
    /// Unweighted mean over classes that appeared in at least one case.
    pub macro_dice: Option<f64>,
    pub macro_nsd: Option<f64>,
}

pub fn aggregate(reports: &[CaseReport]) -> Result<MetricReport> {
    let k = match reports.first() {
        Some(r) => r.per_class.len(),
        None => return Err(Error::argument("cannot aggregate zero cases")),
    };
    if let Some(bad) = reports.iter().find(|r| r.per_class.len() != k) {
        return Err(Error::argument(format!(
            "case `{}` reports {} classes, expected {}",
            bad.id,
            bad.per_class.len(),
            k
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<ClassScore> =
            reports.iter().filter_map(|r| r.per_class[c]).collect();
        if scores.is_empty() {
            per_class.push(None);
        } else {
            let n = scores.len() as f64;
            per_class.push(Some(ClassAggregate {
                class: (c + 1) as u8,
                cases: scores.len(),
                mean_dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
                mean_nsd: scores.iter().map(|s| s.nsd).sum::<f64>() / n,
            }));
        }
    }
    let present: Vec<&ClassAggregate> = per_class.iter().flatten().collect();
    let (macro_dice, macro_nsd) = if present.is_empty() {
        (None, None)
    } else {
        let n = present.len() as f64;
        (
            Some(present.iter().map(|a| a.mean_dice).sum::<f64>() / n),
            Some(present.iter().map(|a| a.mean_nsd).sum::<f64>() / n),
        )
    };
    Ok(MetricReport { per_class, macro_dice, macro_nsd })
}
