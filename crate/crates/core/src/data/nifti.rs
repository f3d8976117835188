//! Minimal NIfTI-1 single-file (.nii) reader and fixture writer.
//!
//! Scope: 3D volumes, scalar datatypes uint8 / int16 / float32, both byte
//! orders (decided by whichever direction makes `sizeof_hdr` read 348),
//! and the `scl_slope` / `scl_inter` intensity scaling (slope 0 means 1).
//! Detached .hdr/.img pairs (magic "ni1") are recognized and refused.
//!
//! On disk NIfTI stores x fastest; in memory this crate keeps z fastest,
//! so reading and writing transpose. With slope 1 and intercept 0 a round
//! trip is bitwise exact.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::data::VolumeRecord;
use crate::error::{Error, Result};

// Header field offsets (NIfTI-1, 348-byte header).
const SIZEOF_HDR: usize = 0;
const DIM: usize = 40;
const DATATYPE: usize = 70;
const BITPIX: usize = 72;
const PIXDIM: usize = 76;
const VOX_OFFSET: usize = 108;
const SCL_SLOPE: usize = 112;
const SCL_INTER: usize = 116;
const MAGIC: usize = 344;

const HEADER_LEN: usize = 348;
/// Single-file payload offset: header plus the 4-byte extension flag.
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// Raw voxel payload for the fixture writer, in z-fastest order.
pub enum NiftiData<'a> {
    F32(&'a [f32]),
    U8(&'a [u8]),
    I16(&'a [i16]),
}

/// Reads a .nii volume as intensities; labels come back zeroed (pair with
/// `attach_labels` when a segmentation file exists).
pub fn read_nifti1(path: &Path) -> Result<VolumeRecord> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    let parsed = parse_nifti1(&bytes)?;
    let numel = parsed.shape[0] * parsed.shape[1] * parsed.shape[2];
    VolumeRecord::new(id, parsed.shape, parsed.spacing, parsed.values, vec![0u8; numel])
}

/// Reads a .nii segmentation and attaches it to an intensity record. The
/// label file must match the record's grid and hold integers in 0..=255.
pub fn attach_labels(rec: &mut VolumeRecord, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_nifti1(&bytes)?;
    if parsed.shape != rec.shape {
        return Err(Error::shape(format!(
            "label volume {:?} does not match intensity volume {:?}",
            parsed.shape, rec.shape
        )));
    }
    let mut labels = Vec::with_capacity(parsed.values.len());
    for &v in &parsed.values {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Format(format!(
                "label value {} is not an integer in 0..=255",
                v
            )));
        }
        labels.push(v as u8);
    }
    rec.labels = labels;
    Ok(())
}

struct Parsed {
    shape: [usize; 3],
    spacing: [f32; 3],
    values: Vec<f32>,
}

fn parse_nifti1(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[SIZEOF_HDR..]) == HEADER_LEN as i32 {
        parse_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[SIZEOF_HDR..]) == HEADER_LEN as i32 {
        parse_with::<BigEndian>(bytes)
    } else {
        Err(Error::Format(
            "sizeof_hdr is 348 in neither byte order; not a NIfTI-1 file".to_string(),
        ))
    }
}

fn parse_with<E: ByteOrder>(bytes: &[u8]) -> Result<Parsed> {
    match &bytes[MAGIC..MAGIC + 4] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Unsupported(
                "detached .hdr/.img pairs (magic ni1) are not supported; use single-file .nii"
                    .to_string(),
            ))
        }
        other => {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"n+1\"",
                String::from_utf8_lossy(other)
            )))
        }
    }

    let ndim = E::read_i16(&bytes[DIM..]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {} is out of range", ndim)));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = E::read_i16(&bytes[DIM + 2 * (i + 1)..]);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {} is not positive", i + 1, v)));
        }
        *d = v as usize;
    }
    if ndim < 3 {
        return Err(Error::Unsupported(format!("{}D volumes are not supported", ndim)));
    }
    if dims[3..].iter().any(|&d| d > 1) {
        return Err(Error::Unsupported(format!(
            "volume has a non-trivial dimension beyond 3D: dims {:?}",
            &dims[..ndim as usize]
        )));
    }
    let shape = [dims[0], dims[1], dims[2]];

    let datatype = E::read_i16(&bytes[DATATYPE..]);
    let bitpix = E::read_i16(&bytes[BITPIX..]);
    let bytes_per: usize = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Unsupported(format!(
                "datatype {} is not supported (uint8, int16, float32 are)",
                other
            )))
        }
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(Error::Format(format!(
            "bitpix {} contradicts datatype {}",
            bitpix, datatype
        )));
    }

    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = E::read_f32(&bytes[PIXDIM + 4 * (i + 1)..]);
        if !(*s > 0.0) || !s.is_finite() {
            return Err(Error::Format(format!("pixdim[{}] = {} is not positive", i + 1, s)));
        }
    }

    let vox_offset = E::read_f32(&bytes[VOX_OFFSET..]);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {} is not usable", vox_offset)));
    }
    let vox_offset = vox_offset as usize;

    let mut slope = E::read_f32(&bytes[SCL_SLOPE..]);
    let inter = E::read_f32(&bytes[SCL_INTER..]);
    if slope == 0.0 {
        slope = 1.0;
    }
    if !slope.is_finite() || !inter.is_finite() {
        return Err(Error::Format(format!(
            "scl_slope {} / scl_inter {} are not finite",
            slope, inter
        )));
    }

    let numel = shape[0] * shape[1] * shape[2];
    let need = vox_offset + numel * bytes_per;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "file is {} bytes but the voxel payload needs {}",
            bytes.len(),
            need
        )));
    }
    let payload = &bytes[vox_offset..need];

    // Decode in file order (x fastest), writing into z-fastest layout.
    let [nx, ny, nz] = shape;
    let mut values = vec![0f32; numel];
    let scale = |raw: f32| if slope == 1.0 && inter == 0.0 { raw } else { raw * slope + inter };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let file_idx = x + nx * (y + ny * z);
                let raw = match datatype {
                    DT_UINT8 => payload[file_idx] as f32,
                    DT_INT16 => E::read_i16(&payload[2 * file_idx..]) as f32,
                    _ => E::read_f32(&payload[4 * file_idx..]),
                };
                values[(x * ny + y) * nz + z] = scale(raw);
            }
        }
    }
    Ok(Parsed { shape, spacing, values })
}

/// Writes a single-file .nii in the requested byte order. `data` is given
/// in z-fastest order and is stored raw; `slope` / `inter` land in the
/// header for the reader to apply (pass 1.0 and 0.0 for none).
pub fn write_nifti1(
    path: &Path,
    shape: [usize; 3],
    spacing: [f32; 3],
    data: &NiftiData,
    endian: Endianness,
    slope: f32,
    inter: f32,
) -> Result<()> {
    match endian {
        Endianness::Little => write_with::<LittleEndian>(path, shape, spacing, data, slope, inter),
        Endianness::Big => write_with::<BigEndian>(path, shape, spacing, data, slope, inter),
    }
}

fn write_with<E: ByteOrder>(
    path: &Path,
    shape: [usize; 3],
    spacing: [f32; 3],
    data: &NiftiData,
    slope: f32,
    inter: f32,
) -> Result<()> {
    let numel = shape[0] * shape[1] * shape[2];
    let (len, datatype, bytes_per) = match data {
        NiftiData::F32(v) => (v.len(), DT_FLOAT32, 4usize),
        NiftiData::U8(v) => (v.len(), DT_UINT8, 1),
        NiftiData::I16(v) => (v.len(), DT_INT16, 2),
    };
    if len != numel {
        return Err(Error::shape(format!(
            "volume {:?} needs {} voxels, got {}",
            shape, numel, len
        )));
    }

    let mut out = vec![0u8; DATA_OFFSET + numel * bytes_per];
    E::write_i32(&mut out[SIZEOF_HDR..], HEADER_LEN as i32);
    E::write_i16(&mut out[DIM..], 3);
    for i in 0..3 {
        E::write_i16(&mut out[DIM + 2 * (i + 1)..], shape[i] as i16);
    }
    for i in 3..7 {
        E::write_i16(&mut out[DIM + 2 * (i + 1)..], 1);
    }
    E::write_i16(&mut out[DATATYPE..], datatype);
    E::write_i16(&mut out[BITPIX..], (bytes_per * 8) as i16);
    E::write_f32(&mut out[PIXDIM..], 1.0);
    for i in 0..3 {
        E::write_f32(&mut out[PIXDIM + 4 * (i + 1)..], spacing[i]);
    }
    E::write_f32(&mut out[VOX_OFFSET..], DATA_OFFSET as f32);
    E::write_f32(&mut out[SCL_SLOPE..], slope);
    E::write_f32(&mut out[SCL_INTER..], inter);
    out[MAGIC..MAGIC + 4].copy_from_slice(b"n+1\0");

    // Transpose z-fastest memory order to x-fastest file order.
    let [nx, ny, nz] = shape;
    let payload = &mut out[DATA_OFFSET..];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mem_idx = (x * ny + y) * nz + z;
                let file_idx = x + nx * (y + ny * z);
                match data {
                    NiftiData::F32(v) => E::write_f32(&mut payload[4 * file_idx..], v[mem_idx]),
                    NiftiData::U8(v) => payload[file_idx] = v[mem_idx],
                    NiftiData::I16(v) => E::write_i16(&mut payload[2 * file_idx..], v[mem_idx]),
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
