//! Volume I/O: single-file NIfTI-1 (`.nii`, `.nii.gz`) and a raw
//! little-endian float32 array with a JSON sidecar.
//!
//! NIfTI stores `x` fastest, so a `(D, H, W)` row-major volume is written
//! with `dim = [3, W, H, D]` and needs no reordering.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Result, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

pub(super) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(super) fn format_err(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn chunk<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
}

/// Reads a 3D NIfTI-1 volume. Integer and float datatypes are converted to
/// `f32`; `scl_slope`/`scl_inter` are applied when set. The volume is flagged
/// as a mask when the file stores unsigned bytes holding only 0 and 1.
pub fn read_nifti(path: &Path) -> Result<Volume3D> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI header"));
    }
    let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 => true,
        _ => return Err(format_err(path, "sizeof_hdr is not 348")),
    };
    let cur = Cursor {
        bytes: &bytes,
        big_endian,
    };
    if &bytes[344..347] != b"n+1" {
        return Err(format_err(
            path,
            "only single-file NIfTI-1 (magic n+1) is supported",
        ));
    }
    let ndim = cur.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = cur.i16(42 + 2 * i);
        if v < 1 {
            return Err(format_err(path, format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(format_err(path, "only 3D volumes are supported"));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let datatype = cur.i16(70);
    let vox_offset = cur.f32(108) as usize;
    let slope = cur.f32(112);
    let inter = cur.f32(116);
    let pix = [cur.f32(80), cur.f32(84), cur.f32(88)];

    let n = nx * ny * nz;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported datatype {other}"))),
    };
    let payload = bytes
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| format_err(path, "truncated voxel data"))?;
    let sub = Cursor {
        bytes: payload,
        big_endian,
    };
    let mut values: Vec<f32> = (0..n)
        .map(|i| {
            let o = i * width;
            match datatype {
                DT_UINT8 => payload[o] as f32,
                DT_INT8 => payload[o] as i8 as f32,
                DT_INT16 => i16::from_le_bytes(sub.chunk::<2>(o)) as f32,
                DT_UINT16 => u16::from_le_bytes(sub.chunk::<2>(o)) as f32,
                DT_INT32 => i32::from_le_bytes(sub.chunk::<4>(o)) as f32,
                DT_FLOAT32 => f32::from_le_bytes(sub.chunk::<4>(o)),
                _ => f64::from_le_bytes(sub.chunk::<8>(o)) as f32,
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| format_err(path, e.to_string()))?;
    let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
    let vol = if datatype == DT_UINT8 && binary {
        Volume3D::mask(data)?
    } else {
        Volume3D::new(data)?
    };
    Ok(if pix.iter().all(|p| p.is_finite() && *p > 0.0) {
        vol.with_spacing([pix[2], pix[1], pix[0]])
    } else {
        vol
    })
}

fn put_i16(h: &mut [u8], off: usize, v: i16) {
    h[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn nifti_bytes(vol: &Volume3D) -> Vec<u8> {
    let [d, hgt, w] = vol.shape();
    let spacing = vol.spacing().unwrap_or([1.0, 1.0, 1.0]);
    let (datatype, bitpix) = if vol.is_mask() {
        (DT_UINT8, 8)
    } else {
        (DT_FLOAT32, 32)
    };
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dims = [3i16, w as i16, hgt as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *v);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let pixdim = [
        1.0f32, spacing[2], spacing[1], spacing[0], 0.0, 0.0, 0.0, 0.0,
    ];
    for (i, v) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *v);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 1);
    for (row, (off, s)) in [(280usize, spacing[2]), (296, spacing[1]), (312, spacing[0])]
        .into_iter()
        .enumerate()
    {
        put_f32(&mut h, off + 4 * row, s);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(vol.len() * (bitpix as usize / 8));
    for &v in vol.data().iter() {
        if vol.is_mask() {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes a volume as NIfTI-1; gzip-compressed when the path ends in `.gz`.
/// Masks are stored as `uint8`, everything else as `float32`.
pub fn write_nifti(path: &Path, vol: &Volume3D) -> Result<()> {
    let bytes = nifti_bytes(vol);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut gz = GzEncoder::new(w, Compression::default());
        gz.write_all(&bytes).map_err(io_err(path))?;
        gz.finish()
            .and_then(|mut w| w.flush())
            .map_err(io_err(path))?;
    } else {
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(io_err(path))?;
    }
    Ok(())
}

/// JSON sidecar of the raw format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    #[serde(default)]
    pub spacing: Option<Vec<f32>>,
    pub dtype: String,
    #[serde(default)]
    pub is_mask: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `array` as raw little-endian float32 at `path` and its sidecar next
/// to it (same stem, `.json` extension).
pub fn write_raw(
    path: &Path,
    array: &ArrayD<f32>,
    spacing: Option<&[f32]>,
    is_mask: bool,
) -> Result<()> {
    let sidecar = RawSidecar {
        shape: array.shape().to_vec(),
        spacing: spacing.map(|s| s.to_vec()),
        dtype: "float32".into(),
        is_mask,
    };
    let mut bytes = Vec::with_capacity(array.len() * 4);
    for &v in array.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    let side = sidecar_path(path);
    std::fs::write(&side, json).map_err(io_err(&side))
}

/// Reads a raw array; `path` may name either the data file or its sidecar.
pub fn read_raw(path: &Path) -> Result<(ArrayD<f32>, RawSidecar)> {
    let (data_path, side) = if path.extension().is_some_and(|e| e == "json") {
        (path.with_extension("raw"), path.to_path_buf())
    } else {
        (path.to_path_buf(), sidecar_path(path))
    };
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: RawSidecar =
        serde_json::from_str(&text).map_err(|e| format_err(&side, e.to_string()))?;
    if sidecar.dtype != "float32" {
        return Err(format_err(
            &side,
            format!("unsupported dtype {:?}", sidecar.dtype),
        ));
    }
    let bytes = std::fs::read(&data_path).map_err(io_err(&data_path))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(format_err(
            &data_path,
            format!("expected {} bytes, found {}", n * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&sidecar.shape), values)
        .map_err(|e| format_err(&data_path, e.to_string()))?;
    Ok((array, sidecar))
}

pub fn write_raw_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_raw(
        path,
        &vol.data().clone().into_dyn(),
        vol.spacing().as_ref().map(|s| s.as_slice()),
        vol.is_mask(),
    )
}

pub fn read_raw_volume(path: &Path) -> Result<Volume3D> {
    let (array, sidecar) = read_raw(path)?;
    let data = array
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| format_err(path, "raw volume is not 3D"))?;
    let vol = if sidecar.is_mask {
        Volume3D::mask(data)?
    } else {
        Volume3D::new(data)?
    };
    Ok(match sidecar.spacing.as_deref() {
        Some(&[a, b, c]) => vol.with_spacing([a, b, c]),
        _ => vol,
    })
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Loads a volume, choosing the format from the file name.
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw_volume(path)
    }
}

/// Saves a volume, choosing the format from the file name.
pub fn save_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    if is_nifti(path) {
        write_nifti(path, vol)
    } else {
        write_raw_volume(path, vol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn sample_volume() -> Volume3D {
        Volume3D::new(Array3::from_shape_fn((3, 4, 5), |(d, h, w)| {
            d as f32 * 0.5 - h as f32 * 1.25 + w as f32 * 3.0
        }))
        .unwrap()
        .with_spacing([1.0, 0.9, 1.1])
    }

    #[test]
    fn nifti_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample_volume();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, &vol).unwrap();
            assert_eq!(read_nifti(&p).unwrap(), vol);
        }
        let bytes = std::fs::read(dir.path().join("a.nii")).unwrap();
        assert_eq!(bytes.len(), 352 + 60 * 4);
        // dim[1] is the fastest (W) axis
        assert_eq!(i16::from_le_bytes([bytes[42], bytes[43]]), 5);
    }

    #[test]
    fn mask_round_trips_as_uint8() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Volume3D::mask(Array3::from_shape_fn((2, 3, 4), |(d, h, w)| {
            ((d + h + w) % 2) as f32
        }))
        .unwrap();
        let p = dir.path().join("m.nii.gz");
        write_nifti(&p, &mask).unwrap();
        let back = read_nifti(&p).unwrap();
        assert!(back.is_mask());
        assert_eq!(back.data(), mask.data());
    }

    #[test]
    fn reads_int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = nifti_bytes(&Volume3D::zeros([1, 1, 2]));
        bytes.truncate(VOX_OFFSET);
        put_i16(&mut bytes, 70, DT_INT16);
        put_i16(&mut bytes, 72, 16);
        put_f32(&mut bytes, 112, 2.0);
        put_f32(&mut bytes, 116, 1.0);
        bytes.extend_from_slice(&(-3i16).to_le_bytes());
        bytes.extend_from_slice(&(7i16).to_le_bytes());
        let p = dir.path().join("i.nii");
        std::fs::write(&p, bytes).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(
            v.data().iter().copied().collect::<Vec<_>>(),
            vec![-5.0, 15.0]
        );
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::Format { .. })));
    }

    #[test]
    fn raw_round_trip_volume_and_4d_field() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample_volume();
        let p = dir.path().join("v.raw");
        save_volume(&p, &vol).unwrap();
        assert_eq!(load_volume(&p).unwrap(), vol);
        assert_eq!(load_volume(&dir.path().join("v.json")).unwrap(), vol);

        let field = Array4::from_shape_fn((3, 2, 2, 2), |(c, a, b, d)| {
            (c * 8 + a * 4 + b * 2 + d) as f32
        });
        let fp = dir.path().join("field.raw");
        write_raw(&fp, &field.clone().into_dyn(), None, false).unwrap();
        let (back, side) = read_raw(&fp).unwrap();
        assert_eq!(side.shape, vec![3, 2, 2, 2]);
        assert_eq!(back, field.into_dyn());
    }
}
