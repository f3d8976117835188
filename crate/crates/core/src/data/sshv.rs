//! SSHV: a minimal raw volume container for fixtures and intermediate
//! results. Always little-endian.
//!
//! Layout: magic "SSHV", u32 dtype (0 = f32, 1 = u8, 2 = i16), u32 dims
//! x/y/z, f32 spacing x/y/z, then the payload in z-fastest order (the
//! in-memory order of this crate, so no transpose happens).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSHV";

#[derive(Debug, Clone, PartialEq)]
pub enum SshvPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I16(Vec<i16>),
}

impl SshvPayload {
    pub fn len(&self) -> usize {
        match self {
            SshvPayload::F32(v) => v.len(),
            SshvPayload::U8(v) => v.len(),
            SshvPayload::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u32 {
        match self {
            SshvPayload::F32(_) => 0,
            SshvPayload::U8(_) => 1,
            SshvPayload::I16(_) => 2,
        }
    }
}

pub fn write_sshv(
    path: &Path,
    shape: [usize; 3],
    spacing: [f32; 3],
    payload: &SshvPayload,
) -> Result<()> {
    let numel = shape[0] * shape[1] * shape[2];
    if payload.len() != numel {
        return Err(Error::shape(format!(
            "volume {:?} needs {} voxels, got {}",
            shape,
            numel,
            payload.len()
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(payload.dtype_code())?;
    for &d in &shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &spacing {
        w.write_f32::<LittleEndian>(s)?;
    }
    match payload {
        SshvPayload::F32(v) => {
            for &x in v {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        SshvPayload::U8(v) => w.write_all(v)?,
        SshvPayload::I16(v) => {
            for &x in v {
                w.write_i16::<LittleEndian>(x)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sshv(path: &Path) -> Result<([usize; 3], [f32; 3], SshvPayload)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file is too short for an SSHV header".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected SSHV", magic)));
    }
    let dtype = r.read_u32::<LittleEndian>()?;
    let mut shape = [0usize; 3];
    for d in shape.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in spacing.iter_mut() {
        *s = r.read_f32::<LittleEndian>()?;
    }
    let numel = shape[0] * shape[1] * shape[2];
    let truncated = |_| Error::Format("SSHV payload is truncated".to_string());
    let payload = match dtype {
        0 => {
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes).map_err(truncated)?;
            SshvPayload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        1 => {
            let mut bytes = vec![0u8; numel];
            r.read_exact(&mut bytes).map_err(truncated)?;
            SshvPayload::U8(bytes)
        }
        2 => {
            let mut bytes = vec![0u8; numel * 2];
            r.read_exact(&mut bytes).map_err(truncated)?;
            SshvPayload::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            )
        }
        other => return Err(Error::Format(format!("unknown SSHV dtype code {}", other))),
    };
    Ok((shape, spacing, payload))
}
