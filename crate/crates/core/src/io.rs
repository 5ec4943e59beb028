//! Volume file formats.
//!
//! Two containers are supported:
//!
//! * single-file NIfTI-1 (`.nii`): `dim`, `pixdim`, `datatype` (uint8,
//!   int16, float32), `scl_slope`/`scl_inter` and the `n+1` magic are
//!   honoured; every other header field is ignored on read and zeroed on
//!   write.
//! * raw interchange (`.json`): a JSON sidecar
//!   `{dims, spacing, dtype, order: "x-fastest", byte_order: "little", data}`
//!   naming a flat little-endian blob next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, Grid, Volume3D};

const NIFTI1_HEADER_SIZE: usize = 348;
const NIFTI1_VOX_OFFSET: usize = 352;

/// Sample encodings understood by the readers and writers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I16,
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn nifti_code(self) -> Option<i16> {
        match self {
            DType::U8 => Some(2),
            DType::I16 => Some(4),
            DType::F32 => Some(16),
            DType::F64 => None,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DType::U8),
            4 => Ok(DType::I16),
            16 => Ok(DType::F32),
            other => Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        }
    }

    /// Smallest encoding that stores every value exactly, preferring
    /// integer types and falling back to float32 for NIfTI.
    fn lossless_for(data: &[f64], allow_f64: bool) -> Self {
        let integral = data.iter().all(|v| v.fract() == 0.0);
        if integral && data.iter().all(|&v| (0.0..=255.0).contains(&v)) {
            DType::U8
        } else if integral && data.iter().all(|&v| (-32768.0..=32767.0).contains(&v)) {
            DType::I16
        } else if allow_f64 && data.iter().any(|&v| f64::from(v as f32) != v) {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Container {
    Nifti,
    Raw,
}

fn container_of(path: &Path) -> Result<Container> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    if name.ends_with(".nii") {
        Ok(Container::Nifti)
    } else if name.ends_with(".json") {
        Ok(Container::Raw)
    } else {
        Err(Error::Unsupported(format!(
            "{}: expected a .nii or .json volume",
            path.display()
        )))
    }
}

/// Read a volume; intensities are converted to `f64` after applying any
/// NIfTI scaling.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    match container_of(path)? {
        Container::Nifti => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_nifti(&bytes)
        }
        Container::Raw => read_raw(path),
    }
}

/// Write a volume using the narrowest lossless encoding.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(vol, path, None)
}

pub fn write_volume_as(vol: &Volume3D, path: impl AsRef<Path>, dtype: Option<DType>) -> Result<()> {
    let path = path.as_ref();
    let container = container_of(path)?;
    let dtype =
        dtype.unwrap_or_else(|| DType::lossless_for(vol.data(), container == Container::Raw));
    match container {
        Container::Nifti => {
            let bytes = encode_nifti(vol, dtype)?;
            fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        Container::Raw => write_raw(vol, path, dtype),
    }
}

/// Binary volumes are stored as 8-bit 0/1.
pub fn write_binary(bin: &BinaryVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_as(&bin.to_volume(), path, Some(DType::U8))
}

/// Nonzero voxels become foreground.
pub fn read_binary(path: impl AsRef<Path>) -> Result<BinaryVolume> {
    let vol = read_volume(path)?;
    let bits = vol.data().iter().map(|&v| v != 0.0).collect();
    BinaryVolume::new(*vol.grid(), bits)
}

/// Shortest decimal that round-trips through `f32`, so a header pixdim of
/// 0.52 reads back as exactly 0.52.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(f64::from(v))
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        a
    }
    fn i16(&self, at: usize) -> i16 {
        let a = self.arr::<2>(at);
        if self.big_endian {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }
    fn i32(&self, at: usize) -> i32 {
        let a = self.arr::<4>(at);
        if self.big_endian {
            i32::from_be_bytes(a)
        } else {
            i32::from_le_bytes(a)
        }
    }
    fn f32(&self, at: usize) -> f32 {
        let a = self.arr::<4>(at);
        if self.big_endian {
            f32::from_be_bytes(a)
        } else {
            f32::from_le_bytes(a)
        }
    }
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(Error::Format {
            field: "sizeof_hdr",
            reason: format!("file holds only {} bytes", bytes.len()),
        });
    }
    let mut r = Reader {
        bytes,
        big_endian: false,
    };
    if r.i32(0) != NIFTI1_HEADER_SIZE as i32 {
        r.big_endian = true;
        if r.i32(0) != NIFTI1_HEADER_SIZE as i32 {
            return Err(Error::Format {
                field: "sizeof_hdr",
                reason: "expected 348".into(),
            });
        }
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Format {
            field: "magic",
            reason: format!(
                "expected \"n+1\", found {:?}",
                String::from_utf8_lossy(&bytes[344..347])
            ),
        });
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format {
            field: "dim",
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = r.i16(42 + 2 * a);
        if v < 1 {
            return Err(Error::Format {
                field: "dim",
                reason: format!("dim[{}] = {v}", a + 1),
            });
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        let v = r.i16(42 + 2 * a);
        if v > 1 {
            return Err(Error::Unsupported(format!(
                "{}-dimensional NIfTI (dim[{}] = {v})",
                ndim,
                a + 1
            )));
        }
    }
    let dtype = DType::from_nifti_code(r.i16(70))?;
    let bitpix = r.i16(72);
    if bitpix as usize != dtype.width() * 8 {
        return Err(Error::Format {
            field: "bitpix",
            reason: format!("{bitpix} does not match datatype {dtype:?}"),
        });
    }
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * a);
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Format {
                field: "pixdim",
                reason: format!("pixdim[{}] = {v}", a + 1),
            });
        }
        *s = widen(v);
    }
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI1_HEADER_SIZE as f32) {
        return Err(Error::Format {
            field: "vox_offset",
            reason: format!("{vox_offset}"),
        });
    }
    let offset = vox_offset as usize;
    let (slope, inter) = (r.f32(112), r.f32(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (f64::from(slope), f64::from(inter))
    };

    let grid = Grid::new(dims, spacing)?;
    let need = offset + grid.len() * dtype.width();
    if bytes.len() < need {
        return Err(Error::Format {
            field: "dim",
            reason: format!("header describes {need} bytes, file holds {}", bytes.len()),
        });
    }
    let mut data = decode_samples(&bytes[offset..need], dtype, r.big_endian);
    if slope != 1.0 || inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume3D::new(grid, data)
}

fn decode_samples(raw: &[u8], dtype: DType, big_endian: bool) -> Vec<f64> {
    let w = dtype.width();
    raw.chunks_exact(w)
        .map(|c| match dtype {
            DType::U8 => f64::from(c[0]),
            DType::I16 => {
                let a = [c[0], c[1]];
                f64::from(if big_endian {
                    i16::from_be_bytes(a)
                } else {
                    i16::from_le_bytes(a)
                })
            }
            DType::F32 => {
                let a = [c[0], c[1], c[2], c[3]];
                f64::from(if big_endian {
                    f32::from_be_bytes(a)
                } else {
                    f32::from_le_bytes(a)
                })
            }
            DType::F64 => {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                if big_endian {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                }
            }
        })
        .collect()
}

fn encode_samples(data: &[f64], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * dtype.width());
    for (i, &v) in data.iter().enumerate() {
        match dtype {
            DType::U8 => {
                if !(0.0..=255.0).contains(&v) {
                    return Err(Error::Parameter(format!(
                        "voxel {i} = {v} does not fit uint8"
                    )));
                }
                out.push(v.round() as u8);
            }
            DType::I16 => {
                if !(-32768.0..=32767.0).contains(&v) {
                    return Err(Error::Parameter(format!(
                        "voxel {i} = {v} does not fit int16"
                    )));
                }
                out.extend_from_slice(&(v.round() as i16).to_le_bytes());
            }
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

fn encode_nifti(vol: &Volume3D, dtype: DType) -> Result<Vec<u8>> {
    let code = dtype.nifti_code().ok_or_else(|| {
        Error::Unsupported("NIfTI output supports uint8, int16 and float32".into())
    })?;
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Unsupported(format!(
            "dims {dims:?} exceed the NIfTI-1 limit"
        )));
    }
    let mut h = vec![0u8; NIFTI1_VOX_OFFSET];
    h[0..4].copy_from_slice(&(NIFTI1_HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [
        3,
        dims[0] as i16,
        dims[1] as i16,
        dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (k, d) in dim.iter().enumerate() {
        h[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&code.to_le_bytes());
    h[72..74].copy_from_slice(&((dtype.width() * 8) as i16).to_le_bytes());
    let sp = vol.spacing();
    let pixdim: [f32; 8] = [
        1.0,
        sp[0] as f32,
        sp[1] as f32,
        sp[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (k, p) in pixdim.iter().enumerate() {
        h[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI1_VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend(encode_samples(vol.data(), dtype)?);
    Ok(h)
}

/// JSON sidecar of the raw interchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: DType,
    pub order: String,
    #[serde(default = "little")]
    pub byte_order: String,
    /// Blob file name, relative to the sidecar.
    pub data: String,
}

fn little() -> String {
    "little".into()
}

fn blob_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn read_raw(path: &Path) -> Result<Volume3D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if header.order != "x-fastest" {
        return Err(Error::Format {
            field: "order",
            reason: format!("`{}`", header.order),
        });
    }
    if header.byte_order != "little" {
        return Err(Error::Format {
            field: "byte_order",
            reason: format!("`{}`", header.byte_order),
        });
    }
    let grid = Grid::new(header.dims, header.spacing)?;
    let blob = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() != grid.len() * header.dtype.width() {
        return Err(Error::Format {
            field: "dims",
            reason: format!(
                "blob holds {} bytes, expected {}",
                bytes.len(),
                grid.len() * header.dtype.width()
            ),
        });
    }
    Volume3D::new(grid, decode_samples(&bytes, header.dtype, false))
}

fn write_raw(vol: &Volume3D, path: &Path, dtype: DType) -> Result<()> {
    let blob = blob_path(path);
    let header = RawHeader {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype,
        order: "x-fastest".into(),
        byte_order: little(),
        data: blob
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
    };
    let bytes = encode_samples(vol.data(), dtype)?;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
