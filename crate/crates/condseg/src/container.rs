//! Binary tensor container and PGM export.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! magic   4 bytes  "CSEG"
//! version u16      currently 1
//! dtype   u8       1 = f32, 2 = f64, 3 = u8
//! rank    u8
//! extents rank x u32
//! payload numel scalars, little-endian
//! ```
//!
//! Images are stored as f32, masks as u8 (exact 0/1). Readers refuse
//! unknown magic, versions, dtype tags, and short payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtypeTag {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DtypeTag {
    fn from_byte(b: u8) -> Option<DtypeTag> {
        match b {
            1 => Some(DtypeTag::F32),
            2 => Some(DtypeTag::F64),
            3 => Some(DtypeTag::U8),
            _ => None,
        }
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_header<W: Write>(w: &mut W, dtype: DtypeTag, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8, shape.len() as u8])?;
    for &extent in shape {
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Write an f32 tensor stream.
pub fn write_f32<W: Write>(w: &mut W, tensor: &Tensor<f32>) -> std::io::Result<()> {
    write_header(w, DtypeTag::F32, tensor.shape())?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write an f64 tensor stream.
pub fn write_f64<W: Write>(w: &mut W, tensor: &Tensor<f64>) -> std::io::Result<()> {
    write_header(w, DtypeTag::F64, tensor.shape())?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write a binary mask as u8. The tensor must contain only 0 and 1.
pub fn write_mask<W: Write>(w: &mut W, mask: &Tensor<f32>) -> Result<()> {
    if !mask.is_binary() {
        return Err(Error::invalid("write_mask", "mask is not binary"));
    }
    let io = |e| Error::io("<stream>", e);
    write_header(w, DtypeTag::U8, mask.shape()).map_err(io)?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
    w.write_all(&bytes).map_err(io)?;
    Ok(())
}

fn read_exact_checked<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| corrupt(path, format!("truncated while reading {what}")))
}

/// Read any supported dtype as an f32 tensor (u8 masks and f64 payloads
/// are converted).
pub fn read_as_f32<R: Read>(r: &mut R, path: &Path) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact_checked(r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt(path, format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 2];
    read_exact_checked(r, &mut version, path, "version")?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let mut meta = [0u8; 2];
    read_exact_checked(r, &mut meta, path, "dtype/rank")?;
    let dtype = DtypeTag::from_byte(meta[0])
        .ok_or_else(|| corrupt(path, format!("unknown dtype tag {}", meta[0])))?;
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        read_exact_checked(r, &mut e, path, "extent")?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let numel: usize = shape.iter().product();
    let data = match dtype {
        DtypeTag::F32 => {
            let mut bytes = vec![0u8; numel * 4];
            read_exact_checked(r, &mut bytes, path, "payload")?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        DtypeTag::F64 => {
            let mut bytes = vec![0u8; numel * 8];
            read_exact_checked(r, &mut bytes, path, "payload")?;
            bytes
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
                })
                .collect()
        }
        DtypeTag::U8 => {
            let mut bytes = vec![0u8; numel];
            read_exact_checked(r, &mut bytes, path, "payload")?;
            bytes.into_iter().map(f32::from).collect()
        }
    };
    Ok(Tensor::from_vec(shape, data))
}

pub fn write_f32_file(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_f32(&mut w, tensor).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_mask_file(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_mask(&mut w, mask)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32_file(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_as_f32(&mut r, path)
}

/// Export a single-channel image (`[H, W]` or `[1, H, W]`) as binary PGM
/// for human inspection, mapping `[0, 1]` to 0..=255.
pub fn write_pgm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::invalid(
                "write_pgm",
                format!("expected [H, W] or [1, H, W], got {other:?}"),
            ))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(io)?;
    out.flush().map_err(io)
}
