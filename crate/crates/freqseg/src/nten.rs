//! NTEN v1 tensor file codec.
//!
//! Layout: magic `NTEN`, u8 version (1), u8 dtype (0=f32, 1=u8, 2=i64),
//! u8 ndim, ndim little-endian u32 extents, then the row-major payload in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTEN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum NtenArray {
    F32(Vec<usize>, Vec<f32>),
    U8(Vec<usize>, Vec<u8>),
    I64(Vec<usize>, Vec<i64>),
}

impl NtenArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NtenArray::F32(s, _) | NtenArray::U8(s, _) | NtenArray::I64(s, _) => s,
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            NtenArray::F32(..) => 0,
            NtenArray::U8(..) => 1,
            NtenArray::I64(..) => 2,
        }
    }
}

pub fn write(path: &Path, arr: &NtenArray) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, arr.dtype_code(), arr.shape().len() as u8])?;
    for &e in arr.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    match arr {
        NtenArray::F32(_, d) => {
            for v in d {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        NtenArray::U8(_, d) => w.write_all(d)?,
        NtenArray::I64(_, d) => {
            for v in d {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<NtenArray> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated NTEN header", path.display())))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not an NTEN file", path.display())));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported NTEN version {}",
            path.display(),
            head[4]
        )));
    }
    let dtype = head[5];
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    match dtype {
        0 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let d = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(NtenArray::F32(shape, d))
        }
        1 => {
            let mut d = vec![0u8; n];
            r.read_exact(&mut d)?;
            Ok(NtenArray::U8(shape, d))
        }
        2 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let d = buf
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(NtenArray::I64(shape, d))
        }
        other => Err(Error::Format(format!(
            "{}: unknown NTEN dtype {}",
            path.display(),
            other
        ))),
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &NtenArray::F32(t.shape().to_vec(), t.to_vec()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    match read(path)? {
        NtenArray::F32(shape, data) => Ok(Tensor::from_vec(&shape, data)),
        other => Err(Error::Format(format!(
            "{}: expected f32 tensor, found dtype {}",
            path.display(),
            other.dtype_code()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nten");
        let arr = NtenArray::F32(vec![2, 3], vec![1.0, -2.5, 0.0, 3.5, 4.0, 5.5]);
        write(&p, &arr).unwrap();
        assert_eq!(read(&p).unwrap(), arr);
    }

    #[test]
    fn roundtrip_u8_and_i64() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nten");
        let arr = NtenArray::U8(vec![4], vec![0, 128, 255, 7]);
        write(&p, &arr).unwrap();
        assert_eq!(read(&p).unwrap(), arr);
        let arr = NtenArray::I64(vec![2], vec![-5, 1 << 40]);
        write(&p, &arr).unwrap();
        assert_eq!(read(&p).unwrap(), arr);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nten");
        std::fs::write(&p, b"JUNKxxxxxxx").unwrap();
        assert!(read(&p).is_err());
    }

    #[test]
    fn header_bytes_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nten");
        write(&p, &NtenArray::F32(vec![1, 2], vec![0.5, 1.5])).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..7], b"NTEN\x01\x00\x02");
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &2u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &0.5f32.to_le_bytes());
    }
}
