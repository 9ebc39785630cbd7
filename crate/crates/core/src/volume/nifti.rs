//! Single-file NIfTI-1 (`n+1\0`) reader and writer.
//!
//! Only the subset the toolkit needs: little-endian, 348-byte header with a
//! 4-byte empty extension block, payload at offset 352. Orientation
//! (qform/sform) is not interpreted; spacing comes from `pixdim[1..=3]` and
//! the origin from `qoffset_{x,y,z}`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";
const TWO_FILE_MAGIC: [u8; 4] = *b"ni1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_UINT16: i16 = 512;

pub const NIFTI_UNITS_MICRON: u8 = 3;
pub const NIFTI_INTENT_VECTOR: i16 = 1007;

const DESCRIP_SCALE_PREFIX: &str = "volreg scale=";

/// Header fields the toolkit reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    /// `dim[0..8]`, with `dim[0]` the number of used dimensions.
    pub dim: [i16; 8],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub datatype: i16,
    pub intent_code: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Resolution annotation in percent of the source acquisition, e.g. 10 or 15.
    pub scale_percent: Option<f64>,
}

impl VolumeHeader {
    pub fn for_volume(vol: &Volume3) -> Self {
        let [nx, ny, nz] = vol.dims();
        VolumeHeader {
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            spacing: vol.spacing(),
            origin: vol.origin(),
            datatype: DT_FLOAT32,
            intent_code: 0,
            scl_slope: 1.0,
            scl_inter: 0.0,
            scale_percent: vol.scale_percent(),
        }
    }

    pub fn spatial_dims(&self) -> Dims {
        [
            self.dim[1].max(1) as usize,
            self.dim[2].max(1) as usize,
            self.dim[3].max(1) as usize,
        ]
    }

    /// Number of stored elements across all used dimensions.
    pub fn element_count(&self) -> usize {
        let used = self.dim[0].clamp(0, 7) as usize;
        (1..=used).map(|i| self.dim[i].max(1) as usize).product()
    }

    fn bytes_per_element(&self) -> Result<usize> {
        Ok(match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 | DT_UINT16 => 2,
            DT_FLOAT32 => 4,
            DT_FLOAT64 => 8,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    fn bitpix(&self) -> i16 {
        self.bytes_per_element().map(|b| 8 * b as i16).unwrap_or(0)
    }

    pub fn encode(&self) -> Result<[u8; VOX_OFFSET]> {
        for (axis, &n) in self.dim[1..=self.dim[0] as usize].iter().enumerate() {
            if n < 1 {
                return Err(Error::MalformedHeader(format!(
                    "dim[{}] = {n} is not positive",
                    axis + 1
                )));
            }
        }
        let mut h = [0u8; VOX_OFFSET];
        put_i32(&mut h, 0, HEADER_SIZE as i32);
        h[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d);
        }
        put_i16(&mut h, 68, self.intent_code);
        put_i16(&mut h, 70, self.datatype);
        put_i16(&mut h, 72, self.bitpix());
        // pixdim[0] is the qfac; 1 means a right-handed frame.
        put_f32(&mut h, 76, 1.0);
        for a in 0..3 {
            put_f32(&mut h, 80 + 4 * a, self.spacing[a] as f32);
        }
        put_f32(&mut h, 108, VOX_OFFSET as f32);
        put_f32(&mut h, 112, self.scl_slope);
        put_f32(&mut h, 116, self.scl_inter);
        h[123] = NIFTI_UNITS_MICRON;
        if let Some(p) = self.scale_percent {
            let text = format!("{DESCRIP_SCALE_PREFIX}{p}");
            let bytes = text.as_bytes();
            let n = bytes.len().min(79);
            h[148..148 + n].copy_from_slice(&bytes[..n]);
        }
        // qform_code 1 with a zero quaternion: identity rotation, offset = origin.
        put_i16(&mut h, 252, 1);
        for a in 0..3 {
            put_f32(&mut h, 268 + 4 * a, self.origin[a] as f32);
        }
        h[344..348].copy_from_slice(&MAGIC);
        Ok(h)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the 348-byte header",
                bytes.len()
            )));
        }
        let sizeof_hdr = get_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(Error::MalformedHeader(
                    "big-endian headers are not supported".into(),
                ));
            }
            return Err(Error::MalformedHeader(format!(
                "sizeof_hdr = {sizeof_hdr}, expected 348"
            )));
        }
        let magic: [u8; 4] = bytes[344..348].try_into().expect("4-byte slice");
        if magic != MAGIC {
            return Err(Error::BadMagic { magic });
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = get_i16(bytes, 40 + 2 * i);
        }
        if !(1..=7).contains(&dim[0]) {
            return Err(Error::MalformedHeader(format!("dim[0] = {}", dim[0])));
        }
        for i in 1..=dim[0] as usize {
            if dim[i] < 1 {
                return Err(Error::MalformedHeader(format!("dim[{i}] = {}", dim[i])));
            }
        }
        let spacing = [0, 1, 2].map(|a| get_f32(bytes, 80 + 4 * a) as f64);
        let origin = [0, 1, 2].map(|a| get_f32(bytes, 268 + 4 * a) as f64);
        let vox_offset = get_f32(bytes, 108);
        if vox_offset < VOX_OFFSET as f32 {
            return Err(Error::MalformedHeader(format!(
                "vox_offset = {vox_offset} inside the header"
            )));
        }
        let descrip_end = bytes[148..228].iter().position(|&b| b == 0).unwrap_or(80);
        let descrip = String::from_utf8_lossy(&bytes[148..148 + descrip_end]);
        let scale_percent = descrip
            .strip_prefix(DESCRIP_SCALE_PREFIX)
            .and_then(|s| s.trim().parse::<f64>().ok());
        Ok(VolumeHeader {
            dim,
            spacing,
            origin,
            datatype: get_i16(bytes, 70),
            intent_code: get_i16(bytes, 68),
            scl_slope: get_f32(bytes, 112),
            scl_inter: get_f32(bytes, 116),
            scale_percent,
        })
    }
}

/// Header plus payload converted to `f32` with intensity scaling applied.
pub(crate) fn read_nifti(path: &Path) -> Result<(VolumeHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= HEADER_SIZE && bytes[344..348] == TWO_FILE_MAGIC {
        return Err(Error::BadMagic {
            magic: TWO_FILE_MAGIC,
        });
    }
    let header = VolumeHeader::decode(&bytes)?;
    let offset = get_f32(&bytes, 108) as usize;
    let width = header.bytes_per_element()?;
    let count = header.element_count();
    let payload = bytes.get(offset..offset + count * width).ok_or_else(|| {
        Error::MalformedHeader(format!(
            "payload needs {} bytes after offset {offset}, file has {}",
            count * width,
            bytes.len().saturating_sub(offset)
        ))
    })?;
    let raw: Vec<f64> = match header.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_UINT16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let slope = header.scl_slope as f64;
    let data: Vec<f32> = if slope != 0.0 && slope.is_finite() {
        let inter = header.scl_inter as f64;
        raw.iter().map(|&v| (slope * v + inter) as f32).collect()
    } else {
        raw.iter().map(|&v| v as f32).collect()
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok((header, data))
}

pub(crate) fn write_nifti(path: &Path, header: &VolumeHeader, data: &[f32]) -> Result<()> {
    debug_assert_eq!(header.datatype, DT_FLOAT32);
    if data.len() != header.element_count() {
        return Err(Error::MalformedHeader(format!(
            "payload of {} elements does not match header dims {:?}",
            data.len(),
            &header.dim[..=header.dim[0] as usize]
        )));
    }
    let mut out = Vec::with_capacity(VOX_OFFSET + 4 * data.len());
    out.extend_from_slice(&header.encode()?);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a single-file NIfTI-1 volume. Integer payloads are converted to
/// `f32`; `scl_slope`/`scl_inter` are applied when the slope is non-zero.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let (header, data) = read_nifti(path)?;
    if header.dim[0] != 3 {
        return Err(Error::DimensionCount(header.dim[0]));
    }
    let mut vol = Volume3::new(header.spatial_dims(), header.spacing, data)?;
    vol.set_origin(header.origin);
    vol.set_scale_percent(header.scale_percent);
    Ok(vol)
}

/// Writes `vol` as float32 NIfTI-1; loading it back is bit-exact.
pub fn save_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(path.as_ref(), &VolumeHeader::for_volume(vol), vol.data())
}

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(h: &mut [u8], at: usize, v: i32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}
fn get_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
fn get_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
