//! `MSIC` cube container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MSIC"
//!      4     2  version (u16, currently 1)
//!      6     2  channels (u16)
//!      8     4  height (u32)
//!     12     4  width (u32)
//!     16     1  dtype tag: 1 = f64, 2 = u16, 3 = f32
//!     17     *  payload, little-endian, channel-major (c, y, x)
//! ```
//!
//! A single-channel file holds a mosaic. `u16` payloads are normalized by
//! 65535 on load; float payloads must already lie in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mosaic::{MosaicImage, SpectralCube};

pub const MAGIC: &[u8; 4] = b"MSIC";
pub const VERSION: u16 = 1;
const HEADER: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    U16,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 1,
            DType::U16 => 2,
            DType::F32 => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F64),
            2 => Ok(DType::U16),
            3 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }
}

pub fn encode_cube(cube: &SpectralCube, dtype: DType) -> Result<Vec<u8>> {
    let channels = u16::try_from(cube.channels)
        .map_err(|_| Error::Format(format!("{} channels do not fit the header", cube.channels)))?;
    let height = u32::try_from(cube.height).map_err(|_| Error::Format("height too large".into()))?;
    let width = u32::try_from(cube.width).map_err(|_| Error::Format("width too large".into()))?;
    let mut out = Vec::with_capacity(HEADER + cube.data.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.push(dtype.tag());
    for &v in &cube.data {
        match dtype {
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::U16 => {
                let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<SpectralCube> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let dtype = DType::from_tag(bytes[16])?;
    let count = channels * height * width;
    let expected = HEADER + count * dtype.width();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[HEADER..];
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect(),
        DType::U16 => payload
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_le_bytes([b[0], b[1]])) / 65535.0)
            .collect(),
    };
    if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!("value {bad} outside [0, 1]")));
    }
    SpectralCube::new(channels, height, width, data)
}

pub fn save_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    save_cube_as(cube, path, DType::F64)
}

pub fn save_cube_as(cube: &SpectralCube, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let bytes = encode_cube(cube, dtype)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_cube(&bytes)
}

pub fn mosaic_as_cube(m: &MosaicImage) -> SpectralCube {
    SpectralCube {
        channels: 1,
        height: m.height,
        width: m.width,
        data: m.data.clone(),
    }
}

pub fn cube_as_mosaic(c: &SpectralCube) -> Result<MosaicImage> {
    if c.channels != 1 {
        return Err(Error::Format(format!("expected a 1-channel mosaic, found {} channels", c.channels)));
    }
    MosaicImage::new(c.height, c.width, c.data.clone())
}
