//! Bit-exact tensor file format ("AHT1").
//!
//! Layout, all little-endian, no padding or checksum:
//!
//! ```text
//! bytes 0..4    magic "AHT1"
//! bytes 4..8    format version (u32) = 1
//! bytes 8..12   rows (u32)
//! bytes 12..16  cols (u32)
//! bytes 16..    rows*cols f32 values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"AHT1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 16;

pub fn write_matrix(path: impl AsRef<Path>, a: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_matrix_to(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn write_matrix_to<W: Write>(w: &mut W, a: &DenseMatrix) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(a.rows() as u32).to_le_bytes())?;
    w.write_all(&(a.cols() as u32).to_le_bytes())?;
    for &v in a.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    read_matrix_from(&mut r)
}

pub fn read_matrix_from<R: Read>(r: &mut R) -> Result<DenseMatrix> {
    let mut header = [0u8; 16];
    read_exact_at(r, &mut header, 0)?;
    if header[0..4] != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {:?}, expected \"AHT1\"", &header[0..4]) });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if rows == 0 {
        return Err(Error::Format { offset: 8, message: "rows must be positive".into() });
    }
    if cols == 0 {
        return Err(Error::Format { offset: 12, message: "cols must be positive".into() });
    }
    let count = (rows as u64)
        .checked_mul(cols as u64)
        .filter(|&c| c <= (usize::MAX / 4) as u64)
        .ok_or(Error::Format { offset: 8, message: format!("{rows}x{cols} overflows") })? as usize;

    let mut payload = vec![0u8; count * 4];
    read_exact_at(r, &mut payload, HEADER_LEN)?;

    // Strict framing: nothing may follow the payload.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format {
            offset: HEADER_LEN + payload.len() as u64,
            message: "trailing bytes after payload".into(),
        });
    }

    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: HEADER_LEN + (i as u64) * 4,
                message: format!("non-finite value {v}"),
            });
        }
        data.push(v);
    }
    DenseMatrix::new(rows as usize, cols as usize, data)
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], base: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Format {
                offset: base + filled as u64,
                message: format!("truncated: expected {} more bytes", buf.len() - filled),
            });
        }
        filled += n;
    }
    Ok(())
}
