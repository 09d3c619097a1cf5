//! "TSR1" binary tensor container.
//!
//! Layout: magic bytes `T S R 1`, u8 dtype code (1 = f32, 2 = f64),
//! u8 ndim, ndim little-endian u64 dims, then the row-major payload in
//! little-endian dtype order. Used for every weight, gradient, and mask
//! dump in the workspace.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: [u8; 4] = *b"TSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Parse {
                line: 0,
                msg: format!("unknown TSR1 dtype code {other}"),
            }),
        }
    }
}

/// Writes a tensor with the given dims. `data` is row-major and narrowed
/// to f32 when that dtype is requested.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64], dtype: Dtype) -> Result<()> {
    let expected: usize = dims.iter().product();
    if dims.is_empty() || expected != data.len() {
        return Err(Error::contract(format!(
            "tsr1 write: dims {dims:?} do not match payload of {}",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&path.display().to_string(), e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&[dtype.code(), dims.len() as u8]).map_err(io)?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        Dtype::F64 => {
            for &v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads any TSR1 tensor; f32 payloads are widened to f64.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>, Dtype)> {
    let file = File::open(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(&path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: format!("bad TSR1 magic {magic:?} in {}", path.display()),
        });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(io)?;
    let dtype = Dtype::from_code(head[0])?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut buf8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut buf8).map_err(io)?;
        dims.push(u64::from_le_bytes(buf8) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F32 => {
            let mut buf4 = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut buf4).map_err(io)?;
                data.push(f32::from_le_bytes(buf4) as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..count {
                r.read_exact(&mut buf8).map_err(io)?;
                data.push(f64::from_le_bytes(buf8));
            }
        }
    }
    Ok((dims, data, dtype))
}

pub fn write_matrix(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    write_tensor(path, &[m.rows(), m.cols()], m.data(), dtype)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let (dims, data, _) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected 2-d tensor in {}, got {} dims", path.display(), dims.len()),
        });
    }
    Matrix::from_vec(dims[0], dims[1], data)
}

pub fn write_vector(path: &Path, v: &[f64], dtype: Dtype) -> Result<()> {
    write_tensor(path, &[v.len()], v, dtype)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let (dims, data, _) = read_tensor(path)?;
    if dims.len() != 1 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected 1-d tensor in {}, got {} dims", path.display(), dims.len()),
        });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        write_tensor(&path, &[1, 2], &[1.0, -2.0], Dtype::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TSR1");
        assert_eq!(bytes[4], 2); // f64 code
        assert_eq!(bytes[5], 2); // ndim
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &2u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[30..38], &(-2.0f64).to_le_bytes());
        assert_eq!(bytes.len(), 38);
    }

    #[test]
    fn f64_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsr");
        let m = Matrix::from_rows(&[&[0.1, -1.5e-7], &[3.7e12, 0.0]]).unwrap();
        write_matrix(&path, &m, Dtype::F64).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_payload_widens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tsr");
        write_vector(&path, &[0.5, 0.25], Dtype::F32).unwrap();
        let (dims, data, dtype) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![2]);
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(data, vec![0.5, 0.25]);
    }

    #[test]
    fn bad_magic_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tsr");
        std::fs::write(&path, b"NOPE\x02\x01").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Parse { .. })));
    }
}
