//! The `PITD` binary container used for datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PITD" | version u32 | count u32 |
//!   count x ( name_len u16 | name utf-8 | ndim u32 | dims u64 x ndim | dtype u8 | values )
//! ```
//!
//! The only dtype is `1`, real64 little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PitError, Result};
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 4] = b"PITD";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

/// Ordered set of named real64 arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    arrays: Vec<Array>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(PitError::Format(format!("array name too long ({} bytes)", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(PitError::Format(format!("duplicate array `{name}`")));
        }
        let n: u64 = dims.iter().product();
        if n != values.len() as u64 {
            return Err(PitError::Format(format!(
                "array `{name}` has dims {dims:?} but {} values",
                values.len()
            )));
        }
        self.arrays.push(Array { name, dims, values });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor2) -> Result<()> {
        self.push(name, vec![t.rows() as u64, t.cols() as u64], t.data().to_vec())
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.push(name, vec![1], vec![v])
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| PitError::Format(format!("missing array `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor2> {
        let a = self.require(name)?;
        match a.dims.as_slice() {
            [r, c] => Tensor2::from_vec(*r as usize, *c as usize, a.values.clone()),
            _ => Err(PitError::Format(format!(
                "array `{name}` is not two-dimensional: {:?}",
                a.dims
            ))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let a = self.require(name)?;
        match a.values.as_slice() {
            [v] => Ok(*v),
            _ => Err(PitError::Format(format!("array `{name}` is not a scalar"))),
        }
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.require(name)?.values)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u16).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.dims.len() as u32).to_le_bytes())?;
            for d in &a.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F64])?;
            let mut buf = Vec::with_capacity(a.values.len() * 8);
            for v in &a.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(PitError::Format("not a PITD file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(PitError::Format(format!(
                "unsupported PITD version {version} (expected {VERSION})"
            )));
        }
        let count = read_u32(r)?;
        let mut out = Container::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| PitError::Format("array name is not valid UTF-8".into()))?;
            let ndim = read_u32(r)?;
            let mut dims = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                dims.push(u64::from_le_bytes(b));
            }
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(PitError::Format(format!(
                    "array `{name}` has unknown dtype code {}",
                    dtype[0]
                )));
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| PitError::Format(format!("array `{name}` dims overflow")))?;
            let bytes = n
                .checked_mul(8)
                .and_then(|b| usize::try_from(b).ok())
                .ok_or_else(|| PitError::Format(format!("array `{name}` is too large")))?;
            let mut raw = Vec::new();
            r.take(bytes as u64).read_to_end(&mut raw)?;
            if raw.len() != bytes {
                return Err(PitError::Format(format!("array `{name}` is truncated")));
            }
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.push(name, dims, values)?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let c = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(PitError::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PitError::Format("unexpected end of file".into()),
        _ => PitError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push_tensor("w", &Tensor2::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64))
            .unwrap();
        c.push_scalar("config.d_v", 32.0).unwrap();
        c.push("odd", vec![2, 1, 2], vec![f64::MIN_POSITIVE, -0.0, 1e300, 5e-324])
            .unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in c.arrays().iter().zip(back.arrays()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits_a: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.push_scalar("a", 1.0).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"PITD");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..14], &1u16.to_le_bytes());
        assert_eq!(b[14], b'a');
        assert_eq!(&b[15..19], &1u32.to_le_bytes());
        assert_eq!(&b[19..27], &1u64.to_le_bytes());
        assert_eq!(b[27], 1);
        assert_eq!(&b[28..36], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(matches!(Container::from_bytes(&b), Err(PitError::Format(m)) if m.contains("version")));

        let mut c = Container::new();
        c.push_scalar("a", 1.0).unwrap();
        let mut b = c.to_bytes();
        b[27] = 2;
        assert!(matches!(Container::from_bytes(&b), Err(PitError::Format(m)) if m.contains("dtype")));

        let b = sample().to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(Container::from_bytes(b"NOPE").is_err());

        let mut c = Container::new();
        c.push_scalar("a", 1.0).unwrap();
        assert!(c.push_scalar("a", 2.0).is_err());
        assert!(c.push("b", vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn accessors() {
        let c = sample();
        assert_eq!(c.scalar("config.d_v").unwrap(), 32.0);
        assert_eq!(c.tensor("w").unwrap().shape(), (2, 3));
        assert!(c.tensor("odd").is_err());
        assert!(c.scalar("missing").is_err());
    }
}
