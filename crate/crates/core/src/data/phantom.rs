//! Synthetic labeled volumes built from geometric primitives.
//!
//! Two presets matter for the test suites. `slice_ambiguous` places a
//! sphere and an axis-aligned cylinder of the same radius and the same
//! intensity: the sphere's equator slice is pixel-identical to any
//! cylinder body slice, so the classes cannot be told apart one slice at
//! a time; context across slices is required. `blobs` uses distinct
//! intensities, making the classes separable voxel-by-voxel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::VolumeRecord;
use crate::error::{Error, Result};

/// Geometry is expressed in voxel units (spacing does not bend shapes).
#[derive(Debug, Clone, Copy)]
pub enum Primitive {
    Sphere { center: [f32; 3], radius: f32 },
    Ellipsoid { center: [f32; 3], radii: [f32; 3] },
    /// Extends `half_length` both ways along `axis` from the center.
    Cylinder { axis: usize, center: [f32; 3], radius: f32, half_length: f32 },
}

impl Primitive {
    pub fn contains(&self, p: [f32; 3]) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d: f32 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d <= radius * radius
            }
            Primitive::Ellipsoid { center, radii } => {
                let d: f32 = (0..3)
                    .map(|i| ((p[i] - center[i]) / radii[i]).powi(2))
                    .sum();
                d <= 1.0
            }
            Primitive::Cylinder { axis, center, radius, half_length } => {
                if (p[axis] - center[axis]).abs() > half_length {
                    return false;
                }
                let d: f32 = (0..3)
                    .filter(|&i| i != axis)
                    .map(|i| (p[i] - center[i]).powi(2))
                    .sum();
                d <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhantomShape {
    pub primitive: Primitive,
    pub label: u8,
    pub intensity: f32,
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub background_intensity: f32,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_sd: f32,
    /// Painted in order; a later shape overwrites earlier ones where they
    /// overlap.
    pub shapes: Vec<PhantomShape>,
}

/// Renders a spec to a volume. Voxel centers sit at integer coordinates;
/// noise is drawn voxel-by-voxel in flat index order, so a seed pins the
/// output bitwise.
pub fn generate_phantom(id: &str, spec: &PhantomSpec, seed: u64) -> Result<VolumeRecord> {
    if spec.noise_sd < 0.0 || !spec.noise_sd.is_finite() {
        return Err(Error::argument(format!("noise_sd must be >= 0, got {}", spec.noise_sd)));
    }
    let [nx, ny, nz] = spec.shape;
    let numel = nx * ny * nz;
    if numel == 0 {
        return Err(Error::argument("phantom volume has a zero extent"));
    }
    let mut intensity = vec![spec.background_intensity; numel];
    let mut labels = vec![0u8; numel];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f32, y as f32, z as f32];
                let idx = (x * ny + y) * nz + z;
                for shape in &spec.shapes {
                    if shape.primitive.contains(p) {
                        intensity[idx] = shape.intensity;
                        labels[idx] = shape.label;
                    }
                }
            }
        }
    }
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, spec.noise_sd)
            .map_err(|e| Error::argument(format!("bad noise distribution: {}", e)))?;
        for v in intensity.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    VolumeRecord::new(id, spec.shape, spec.spacing, intensity, labels)
}

/// Sphere (class 1) and x-axis cylinder (class 2) with equal radius and
/// equal intensity on a d-cube. Every (y, z) slice through the cylinder
/// body equals the sphere's equator slice pixel for pixel, so per-slice
/// classification of the two classes is ill-posed by construction.
pub fn slice_ambiguous_spec(d: usize) -> Result<PhantomSpec> {
    if d < 16 {
        return Err(Error::argument(format!(
            "slice-ambiguous phantom needs extent >= 16, got {}",
            d
        )));
    }
    let r = d as f32 / 6.0;
    let mid = (d / 2) as f32;
    let sphere_cx = (d / 4) as f32;
    let cyl_cx = (3 * d / 4) as f32;
    Ok(PhantomSpec {
        shape: [d, d, d],
        spacing: [1.0; 3],
        background_intensity: 0.2,
        noise_sd: 0.05,
        shapes: vec![
            PhantomShape {
                primitive: Primitive::Sphere { center: [sphere_cx, mid, mid], radius: r },
                label: 1,
                intensity: 0.8,
            },
            PhantomShape {
                primitive: Primitive::Cylinder {
                    axis: 0,
                    center: [cyl_cx, mid, mid],
                    radius: r,
                    half_length: r,
                },
                label: 2,
                intensity: 0.8,
            },
        ],
    })
}

/// Sphere (class 1) and cylinder (class 2) with well-separated intensities
/// and light noise: every voxel is classifiable from its own value.
pub fn blobs_spec(d: usize) -> Result<PhantomSpec> {
    if d < 12 {
        return Err(Error::argument(format!("blobs phantom needs extent >= 12, got {}", d)));
    }
    let r = d as f32 / 6.0;
    let mid = (d / 2) as f32;
    Ok(PhantomSpec {
        shape: [d, d, d],
        spacing: [1.0; 3],
        background_intensity: 0.1,
        noise_sd: 0.02,
        shapes: vec![
            PhantomShape {
                primitive: Primitive::Sphere { center: [(d / 4) as f32, mid, mid], radius: r },
                label: 1,
                intensity: 0.9,
            },
            PhantomShape {
                primitive: Primitive::Cylinder {
                    axis: 0,
                    center: [(3 * d / 4) as f32, mid, mid],
                    radius: r,
                    half_length: r,
                },
                label: 2,
                intensity: 0.4,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
        (x * shape[1] + y) * shape[2] + z
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = slice_ambiguous_spec(24).unwrap();
        let a = generate_phantom("a", &spec, 5).unwrap();
        let b = generate_phantom("b", &spec, 5).unwrap();
        let c = generate_phantom("c", &spec, 6).unwrap();
        assert_eq!(a.intensity, b.intensity);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.intensity, c.intensity, "different seed, same noise");
        assert_eq!(a.labels, c.labels, "noise never touches labels");
    }

    #[test]
    fn labels_follow_the_primitives() {
        let spec = slice_ambiguous_spec(24).unwrap();
        let v = generate_phantom("v", &spec, 0).unwrap();
        // d=24: sphere center (6,12,12) r=4, cylinder center (18,12,12).
        assert_eq!(v.labels[index(v.shape, 6, 12, 12)], 1);
        assert_eq!(v.labels[index(v.shape, 18, 12, 12)], 2);
        assert_eq!(v.labels[index(v.shape, 0, 0, 0)], 0);
        // Both classes actually present in bulk.
        let count = |c: u8| v.labels.iter().filter(|&&l| l == c).count();
        assert!(count(1) > 100, "sphere voxels: {}", count(1));
        assert!(count(2) > 100, "cylinder voxels: {}", count(2));
    }

    #[test]
    fn sphere_equator_slice_equals_cylinder_body_slice() {
        // The core ambiguity, checked literally: with noise off, the
        // intensity plane through the sphere center is identical to the
        // plane through the cylinder body, while the labels differ 1 vs 2.
        let mut spec = slice_ambiguous_spec(24).unwrap();
        spec.noise_sd = 0.0;
        let v = generate_phantom("v", &spec, 0).unwrap();
        let plane = |x: usize| -> (Vec<f32>, Vec<u8>) {
            let mut ints = Vec::new();
            let mut labs = Vec::new();
            for y in 0..24 {
                for z in 0..24 {
                    ints.push(v.intensity[index(v.shape, x, y, z)]);
                    labs.push(v.labels[index(v.shape, x, y, z)]);
                }
            }
            (ints, labs)
        };
        let (sphere_ints, sphere_labs) = plane(6);
        let (cyl_ints, cyl_labs) = plane(18);
        assert_eq!(sphere_ints, cyl_ints, "equator and body slices must be identical");
        let relabeled: Vec<u8> = sphere_labs
            .iter()
            .map(|&l| if l == 1 { 2 } else { l })
            .collect();
        assert_eq!(relabeled, cyl_labs);
        assert!(sphere_labs.iter().any(|&l| l == 1), "slice is not empty");
    }

    #[test]
    fn blobs_classes_have_distinct_intensities() {
        let mut spec = blobs_spec(16).unwrap();
        spec.noise_sd = 0.0;
        let v = generate_phantom("v", &spec, 0).unwrap();
        for (i, &l) in v.labels.iter().enumerate() {
            let want = match l {
                0 => 0.1,
                1 => 0.9,
                2 => 0.4,
                _ => panic!("unexpected label {}", l),
            };
            assert_eq!(v.intensity[i], want);
        }
    }

    #[test]
    fn later_shapes_overwrite_earlier_ones() {
        let spec = PhantomSpec {
            shape: [8, 8, 8],
            spacing: [1.0; 3],
            background_intensity: 0.0,
            noise_sd: 0.0,
            shapes: vec![
                PhantomShape {
                    primitive: Primitive::Sphere { center: [4.0, 4.0, 4.0], radius: 3.0 },
                    label: 1,
                    intensity: 0.5,
                },
                PhantomShape {
                    primitive: Primitive::Sphere { center: [4.0, 4.0, 4.0], radius: 1.5 },
                    label: 2,
                    intensity: 0.9,
                },
            ],
        };
        let v = generate_phantom("v", &spec, 0).unwrap();
        let at = |x: usize, y: usize, z: usize| v.labels[index(v.shape, x, y, z)];
        assert_eq!(at(4, 4, 4), 2, "inner sphere wins at the center");
        assert_eq!(at(4, 4, 6), 1, "outer shell keeps the first label");
    }

    #[test]
    fn ellipsoid_containment() {
        let e = Primitive::Ellipsoid { center: [0.0; 3], radii: [4.0, 2.0, 1.0] };
        assert!(e.contains([3.9, 0.0, 0.0]));
        assert!(!e.contains([0.0, 2.1, 0.0]));
        assert!(e.contains([0.0, 0.0, 1.0]));
        assert!(!e.contains([2.0, 1.0, 0.9]));
    }
}
