//! Volume I/O and synthetic data: NIfTI-1 and raw-volume readers, phantom
//! generation, and patch sampling with augmentation.

pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod sshv;

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;

/// One case: intensities and voxel labels over the same grid, with
/// physical spacing in millimetres. Data is row-major over `[x, y, z]`
/// with z fastest, matching the tensor layout used everywhere else.
#[derive(Debug, Clone)]
pub struct VolumeRecord {
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub intensity: Vec<f32>,
    pub labels: Vec<u8>,
}

impl VolumeRecord {
    pub fn new(
        id: impl Into<String>,
        shape: [usize; 3],
        spacing: [f32; 3],
        intensity: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let numel = shape[0] * shape[1] * shape[2];
        if intensity.len() != numel || labels.len() != numel {
            return Err(Error::shape(format!(
                "volume {:?} needs {} voxels, got {} intensities and {} labels",
                shape,
                numel,
                intensity.len(),
                labels.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::argument(format!("spacing must be positive, got {:?}", spacing)));
        }
        Ok(VolumeRecord { id: id.into(), shape, spacing, intensity, labels })
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// The labels as a metrics-ready volume.
    pub fn label_volume(&self) -> LabelVolume {
        LabelVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.labels.clone(),
        }
    }
}
