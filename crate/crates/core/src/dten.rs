//! `DTEN` tensor container.
//!
//! Layout, all little-endian:
//!
//! | field   | type          |
//! |---------|---------------|
//! | magic   | `b"DTEN"`     |
//! | version | `u32` = 1     |
//! | ndim    | `u32`         |
//! | dims    | `u64 * ndim`  |
//! | dtype   | `u32` (0=f32) |
//! | payload | `f32 * prod(dims)`, row-major |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Kernel, Tensor};

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// A decoded container: arbitrary rank, `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct DtenArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl DtenArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {len} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| {
                Error::Format("dimension does not fit in usize".into())
            })?);
        }
        let dtype = read_u32(&mut r)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl From<&Tensor> for DtenArray {
    fn from(t: &Tensor) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TryFrom<DtenArray> for Tensor {
    type Error = Error;

    /// Arrays of rank below 4 get leading unit dimensions.
    fn try_from(a: DtenArray) -> Result<Self> {
        if a.dims.len() > 4 {
            return Err(Error::Format(format!("rank {} tensor cannot be 4-D", a.dims.len())));
        }
        let mut shape = [1usize; 4];
        shape[4 - a.dims.len()..].copy_from_slice(&a.dims);
        Tensor::new(shape, a.data)
    }
}

impl From<&Kernel> for DtenArray {
    /// Weights only; biases are stored as separate entries.
    fn from(k: &Kernel) -> Self {
        Self {
            dims: k.shape().to_vec(),
            data: k.data().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let a = DtenArray::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DTEN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..28], &3u64.to_le_bytes());
        assert_eq!(&buf[28..32], &0u32.to_le_bytes());
        assert_eq!(&buf[32..36], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 32 + 24);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DtenArray::read_from(&b"NOPE\x01\0\0\0"[..]).is_err());
        let a = DtenArray::new(vec![4], vec![0.0; 4]).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(DtenArray::read_from(&buf[..]).is_err());
        assert!(DtenArray::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(0usize..5, 0..5), seed in any::<u32>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len).map(|i| (i as f32 + seed as f32).sin()).collect();
            let a = DtenArray::new(dims, data).unwrap();
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            prop_assert_eq!(DtenArray::read_from(&buf[..]).unwrap(), a);
        }
    }
}
