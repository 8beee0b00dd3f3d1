//! "ETF v1" tensor files.
//!
//! Layout (little-endian): magic `ETF1`, `u32` rank, `rank` x `u32` dims,
//! `u8` dtype code (0 = f32, 1 = f64), then the raw scalar payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"ETF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Writes a rank-4 record. Narrowing to f32 rounds to nearest.
pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&4u32.to_le_bytes())?;
    for d in t.dims().as_array() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    match dtype {
        Dtype::F64 => t.data().iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        Dtype::F32 => t.data().iter().try_for_each(|&v| w.write_all(&(v as f32).to_le_bytes()))?,
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record. Ranks below 4 are padded with leading unit dims.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for slot in dims[4 - rank..].iter_mut() {
        *slot = read_u32(&mut r)? as usize;
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = Dtype::from_code(code[0])?;
    let dims = Dims::from(dims);
    dims.validate().map_err(|e| Error::Format(e.to_string()))?;
    let count = dims.numel();
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    let mut raw = vec![0u8; count * width];
    r.read_exact(&mut raw).map_err(|_| Error::Format(format!("payload shorter than {count} scalars")))?;
    let data = match dtype {
        Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((Tensor::from_vec(dims, data)?, dtype))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?)).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F32).unwrap();
        let mut expected = b"ETF1".to_vec();
        expected.extend(4u32.to_le_bytes());
        for d in [1u32, 1, 1, 2] {
            expected.extend(d.to_le_bytes());
        }
        expected.push(0);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn lower_rank_is_left_padded() {
        let mut buf = b"ETF1".to_vec();
        buf.extend(1u32.to_le_bytes());
        buf.extend(3u32.to_le_bytes());
        buf.push(1);
        for v in [1.0f64, 2.0, 3.0] {
            buf.extend(v.to_le_bytes());
        }
        let (t, dtype) = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(t.dims(), Dims::new(1, 1, 1, 3));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::ones([1, 2, 1, 1]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_tensor(bad_magic.as_slice()).is_err());
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tensor(extra.as_slice()).is_err());
        let mut bad_code = buf.clone();
        bad_code[4 + 4 + 16] = 7;
        assert!(read_tensor(bad_code.as_slice()).is_err());
    }
}
